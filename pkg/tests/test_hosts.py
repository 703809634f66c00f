import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from nnwm.errors import ConfigError, DataError
from nnwm.hosts import CIFAR_RECORD, TrainConfig, build_host, load_cifar10, make_synthetic, train
from nnwm.watermark import Message, make_key, target_size


# --- hosts -----------------------------------------------------------------

def test_small_cnn_target_is_144():
    m = build_host("small-cnn", 0)
    assert m.embed_layer == "conv2"
    assert target_size(m) == 144


def test_mini_wide_target_sizes_scale_with_depth():
    m = build_host("mini-wide", 0)
    assert [target_size(m, n) for n in ("conv2b", "conv3b", "conv4b")] == [144, 288, 576]
    assert target_size(build_host("mini-wide", 0, width=2)) == 288


def test_toy_mlp_has_no_conv_target():
    m = build_host("toy-mlp", 0)
    assert m.embed_layer is None
    with pytest.raises(ConfigError):
        target_size(m)


def test_host_init_is_seeded():
    a, b, c = build_host("small-cnn", 5), build_host("small-cnn", 5), build_host("small-cnn", 6)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p, q)
    assert not np.array_equal(a.parameters()[0], c.parameters()[0])


def test_unknown_preset():
    with pytest.raises(ConfigError):
        build_host("resnet", 0)


# --- synthetic data --------------------------------------------------------

def test_synthetic_is_deterministic_and_balanced():
    a = make_synthetic(4, (2, 2, 3), 100, 3)
    b = make_synthetic(4, (2, 2, 3), 100, 3)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(np.bincount(a.labels), [25] * 4)
    test = make_synthetic(4, (2, 2, 3), 100, 3, split="test")
    assert not np.array_equal(a.inputs, test.inputs)


def test_synthetic_arrays_are_read_only():
    d = make_synthetic(3, 5, 12, 0)
    with pytest.raises(ValueError):
        d.inputs[0, 0] = 1.0


def test_zero_separation_has_no_signal():
    d = make_synthetic(2, 6, 20000, 1, separation=0.0)
    means = [d.inputs[d.labels == c].mean(axis=0) for c in range(2)]
    assert np.abs(means[0] - means[1]).max() < 0.1


def test_nearest_mean_error_matches_closed_form():
    # orthonormal means at distance sep*sqrt(2): pairwise error Phi(-sep/sqrt(2))
    classes, sep = 10, 4.0
    d = make_synthetic(classes, (8, 8, 3), 20000, 0, sep)
    x = d.inputs.reshape(len(d), -1)
    centroids = np.stack([x[d.labels == c].mean(axis=0) for c in range(classes)])
    dist = ((x[:, None, :] - centroids[None]) ** 2).sum(-1)
    err = np.mean(dist.argmin(1) != d.labels)
    pair = norm.cdf(-sep / np.sqrt(2))
    assert pair <= err + 0.01
    assert err <= (classes - 1) * pair + 0.01
    assert err < 0.05


# --- CIFAR-10 binary loader ------------------------------------------------

def _fake_cifar(root, n_train=60, n_test=30):
    rng = np.random.default_rng(0)
    for i in range(1, 6):
        labels = np.arange(n_train) % 10
        recs = np.concatenate([labels[:, None], rng.integers(0, 256, (n_train, 3072))], axis=1).astype(np.uint8)
        recs.tofile(root / f"data_batch_{i}.bin")
    labels = np.arange(n_test) % 10
    recs = np.concatenate([labels[:, None], rng.integers(0, 256, (n_test, 3072))], axis=1).astype(np.uint8)
    recs.tofile(root / "test_batch.bin")


def test_cifar_stratified_counts(tmp_path):
    _fake_cifar(tmp_path)
    train_ds, test_ds = load_cifar10(tmp_path, 100, 20, seed=1)
    np.testing.assert_array_equal(np.bincount(train_ds.labels, minlength=10), [10] * 10)
    np.testing.assert_array_equal(np.bincount(test_ds.labels, minlength=10), [2] * 10)
    assert train_ds.inputs.shape == (100, 32, 32, 3)
    np.testing.assert_allclose(train_ds.inputs.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)


def test_cifar_full_and_deterministic(tmp_path):
    _fake_cifar(tmp_path)
    a, t = load_cifar10(tmp_path)
    assert len(a) == 300 and len(t) == 30
    b, _ = load_cifar10(tmp_path, 50, 10, seed=4)
    c, _ = load_cifar10(tmp_path, 50, 10, seed=4)
    np.testing.assert_array_equal(b.inputs, c.inputs)


def test_cifar_channel_layout(tmp_path):
    _fake_cifar(tmp_path)
    raw = np.fromfile(tmp_path / "test_batch.bin", dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    train_ds, test_ds = load_cifar10(tmp_path)
    raw_train = np.concatenate([np.fromfile(tmp_path / f"data_batch_{i}.bin", dtype=np.uint8)
                                .reshape(-1, CIFAR_RECORD) for i in range(1, 6)])
    mean = raw_train[:, 1:].reshape(-1, 3, 1024).mean(axis=(0, 2)) / 255
    # red plane first, row-major within the plane
    assert test_ds.inputs[0, 0, 1, 0] == pytest.approx(raw[0, 1 + 1] / 255 - mean[0])
    assert test_ds.inputs[0, 1, 0, 2] == pytest.approx(raw[0, 1 + 2048 + 32] / 255 - mean[2])


def test_cifar_truncated_reports_offset(tmp_path):
    _fake_cifar(tmp_path)
    path = tmp_path / "data_batch_3.bin"
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(DataError, match=f"offset {59 * CIFAR_RECORD}"):
        load_cifar10(tmp_path)


def test_cifar_missing_file_and_short_class(tmp_path):
    with pytest.raises(DataError):
        load_cifar10(tmp_path)
    _fake_cifar(tmp_path)
    with pytest.raises(DataError):
        load_cifar10(tmp_path, test_count=40)


# --- training --------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    data = make_synthetic(3, (4, 4, 2), 120, 0, 4.0)
    test = make_synthetic(3, (4, 4, 2), 90, 0, 4.0, "test")
    return data, test


def tiny_host(seed=0):
    return build_host("small-cnn", seed, (4, 4, 2), 3)


def test_lambda_zero_embedding_equals_plain_training(tiny):
    data, _ = tiny
    cfg = TrainConfig(epochs=2, batch_size=32, lr=0.05, seed=1, situation="none")
    plain = train(tiny_host(), data, cfg)
    key = make_key("random", 0, 16, 144)
    cfg0 = TrainConfig(epochs=2, batch_size=32, lr=0.05, seed=1, lam=0.0)
    emb = train(tiny_host(), data, cfg0, key, Message.ones(16))
    for p, q in zip(plain.model.parameters(), emb.model.parameters()):
        np.testing.assert_array_equal(p, q)


def test_training_does_not_mutate_input(tiny):
    host = tiny_host()
    before = [p.copy() for p in host.parameters()]
    train(host, tiny[0], TrainConfig(epochs=1, situation="none"))
    for p, q in zip(before, host.parameters()):
        np.testing.assert_array_equal(p, q)
    assert host.meta["epochs_trained"] == 0


def test_situation_requirements(tiny):
    data, _ = tiny
    key, msg = make_key("random", 0, 8, 144), Message.ones(8)
    with pytest.raises(ConfigError):
        train(tiny_host(), data, TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        train(tiny_host(), data, TrainConfig(epochs=1, situation="none"), key, msg)
    for situation in ("fine-tune-to-embed", "distill-to-embed"):
        with pytest.raises(ConfigError, match="pre-trained"):
            train(tiny_host(), data, TrainConfig(epochs=1, situation=situation), key, msg)
    with pytest.raises(ConfigError):
        train(tiny_host(), data.unlabeled(), TrainConfig(epochs=1, situation="none"))


def test_embedding_reaches_zero_ber(tiny):
    data, test = tiny
    key, msg = make_key("random", 2, 16, 144), Message.random(16, 3)
    res = train(tiny_host(), data, TrainConfig(epochs=8, lr=0.05, lam=0.1, batch_size=16), key, msg, test)
    assert res.stats.ber == 0.0
    assert res.history[-1]["E_R"] < res.history[0]["E_R"]
    assert res.model.meta["epochs_trained"] == 8


def test_distill_uses_no_labels_and_tracks_teacher(tiny):
    data, test = tiny
    teacher = train(tiny_host(), data, TrainConfig(epochs=8, lr=0.05, batch_size=16, situation="none"), test_data=test)
    key, msg = make_key("random", 2, 16, 144), Message.ones(16)
    cfg = TrainConfig(epochs=4, lr=0.02, lam=0.1, batch_size=16, situation="distill-to-embed", seed=3)
    res = train(teacher.model, data.unlabeled(), cfg, key, msg, test)
    assert res.stats.ber == 0.0
    gap = res.history[-1]["test_error"] - teacher.history[-1]["test_error"]
    assert gap <= 0.015


def test_fine_tune_to_embed_from_trained(tiny):
    data, _ = tiny
    base = train(tiny_host(), data, TrainConfig(epochs=2, situation="none"))
    key, msg = make_key("diff", 2, 8, 144), Message.ones(8)
    res = train(base.model, data, TrainConfig(epochs=4, lam=0.5, situation="fine-tune-to-embed"), key, msg)
    assert res.stats.ber == 0.0
    assert res.model.meta["epochs_trained"] == 6


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 200), st.integers(1, 7))
def test_partial_last_batch_is_trained(n, bs):
    data = make_synthetic(2, 3, n, 0)
    host = build_host("toy-mlp", 0, (3,), 2)
    res = train(host, data, TrainConfig(epochs=1, batch_size=bs, situation="none"))
    assert np.isfinite(res.history[0]["E0"])
