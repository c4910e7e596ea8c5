"""The full referring-segmentation model: discovery, fusion and reconstruction decoder."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .discovery import EntityDiscovery
from .fusion import ModalityFusion
from .nn import Module
from .objectives import SpatialBroadcastDecoder


class ReferringSegmenter(Module):
    def __init__(self, config: RunConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        with ad.precision(config.precision):
            self.discovery = EntityDiscovery(
                config.dim,
                config.hidden_dim,
                config.k_g,
                config.k_s,
                config.t_iters,
                rng,
                slot_kind=config.slot_kind,
                heads=config.heads,
                mlp_ratio=config.mlp_ratio,
            )
            self.fusion = ModalityFusion(config.dim, config.hidden_dim, rng, use_mlp=config.fusion_mlp)
            self.decoder = SpatialBroadcastDecoder(
                config.dim,
                config.num_patches,
                config.decoder_width,
                rng,
                pos_encoding=config.pos_encoding,
                grid=(config.grid_h, config.grid_w),
            )

    @property
    def c3_temperature(self) -> float:
        return self.config.c3_temperature

    def attention_maps(self, visual: np.ndarray, textual: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """A_slot ``(B, N, K)`` and A_fuse ``(B, K)`` for matched image/text pairs."""
        with ad.no_grad():
            entities, a_slot = self.discovery(Tensor(visual), seed)
            fused = self.fusion(entities, Tensor(textual))
        return a_slot.data, fused.a_fuse.data
