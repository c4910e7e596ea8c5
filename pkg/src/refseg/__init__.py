"""Referring image segmentation from precomputed features via slot-based entity discovery.

The package bundles a small reverse-mode autodiff engine, the entity
discovery, fusion and decoder modules, the training objectives, mask
inference with its metrics, and the synthetic benchmark harness.
"""
from .autodiff import Tensor, backward, no_grad, precision
from .config import RunConfig, SyntheticSpec, load_config, synthetic_run_config
from .discovery import EntityDiscovery, SlotInit
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    DomainError,
    FormatError,
    GenerationError,
    NonFiniteError,
    RefsegError,
    StateError,
)
from .fusion import CrossModalOutput, ModalityFusion
from .inference import InferenceScheme, Mask, predict_mask
from .metrics import EvalRecord, iou, metrics_json
from .model import ReferringSegmenter
from .objectives import BatchPairs, SpatialBroadcastDecoder, c3_loss, recon_loss, total_loss
from .synthetic import SyntheticDataset, generate_synthetic
from .training import AdamW, cosine_lr, evaluate, train

__version__ = "0.1.0"
