"""Embedding, extracting and attacking projection-based watermarks in conv-layer weights."""

from .attacks import AttackReport, PruneSpec, attack_finetune, attack_overwrite, attack_prune, embed_posthoc, prune_sweep
from .core import Model, OptimizerState, backward, forward, grad_check, sgd_step
from .errors import ConfigError, DataError, NumericError, UsageError
from .hosts import Dataset, TrainConfig, build_host, load_cifar10, make_synthetic, train
from .watermark import (DetectionStats, Message, WatermarkKey, attach_regularizer, ber, embedding_loss,
                        extract, flatten_target, make_key)

__version__ = "0.1.0"
