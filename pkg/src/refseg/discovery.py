"""Bottom-up entity discovery: slot initialisation, aggregation and interaction.

Shapes use a leading batch axis throughout: visual features are
``(B, N, D)``, slots ``(B, K, D)`` and the patch-to-slot attention
``(B, N, K)``.  Unbatched inputs (no leading axis) are accepted as well.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .nn import MLP, Linear, Module, Projection, SelfAttentionLayer, param

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 2.0


@dataclass
class SlotBank:
    """Slots ``(..., K, D)`` in group-major order plus their group layout."""

    slots: Tensor
    k_g: int
    k_s: int

    @property
    def group_of(self) -> np.ndarray:
        return np.repeat(np.arange(self.k_g), self.k_s)

    @property
    def num_slots(self) -> int:
        return self.k_g * self.k_s

    def grouped(self) -> Tensor:
        """(..., K, D) -> (..., K_g, K_s, D)."""
        lead = self.slots.shape[:-2]
        return self.slots.reshape(lead + (self.k_g, self.k_s, self.slots.shape[-1]))


class SlotInit(Module):
    """Learnable slot initialiser for the entity, random and query variants.

    * entity: ``k_g`` Gaussians, ``k_s`` reparameterised samples from each
    * random: one Gaussian shared by all ``k_g * k_s`` slots
    * query:  a deterministic learnable ``K x D`` table
    """

    def __init__(self, kind: str, k_g: int, k_s: int, dim: int, rng: np.random.Generator):
        if k_g < 1 or k_s < 1:
            raise ConfigError(f"k_g and k_s must be positive, got {k_g}, {k_s}")
        if kind not in ("entity", "random", "query"):
            raise ConfigError(f"unknown slot kind {kind!r}")
        self.kind = kind
        self.k_g = k_g
        self.k_s = k_s
        self.dim = dim
        scale = 1.0 / math.sqrt(dim)
        if kind == "entity":
            self.mu = param(rng.standard_normal((k_g, dim)) * scale)
            self.log_sigma = param(np.zeros((k_g, dim)))
        elif kind == "random":
            self.mu = param(rng.standard_normal((1, dim)) * scale)
            self.log_sigma = param(np.zeros((1, dim)))
        else:
            self.table = param(rng.standard_normal((k_g * k_s, dim)) * scale)

    @property
    def groups(self) -> tuple[int, int]:
        """Layout seen by the interaction block: (number of groups, slots per group)."""
        if self.kind == "entity":
            return self.k_g, self.k_s
        return 1, self.k_g * self.k_s

    def sigma(self) -> Tensor:
        return ad.exp(ad.clamp(self.log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX))

    def __call__(self, batch: int | None, seed: int) -> SlotBank:
        k = self.k_g * self.k_s
        n_groups, per_group = self.groups
        lead = () if batch is None else (batch,)
        if self.kind == "query":
            slots = self.table if batch is None else ad.broadcast_to(self.table, lead + (k, self.dim))
            return SlotBank(slots, n_groups, per_group)
        eta = np.random.default_rng(seed).standard_normal(lead + (k, self.dim))
        eta = Tensor(eta)
        n_dist = self.mu.shape[0]
        per = k // n_dist

        def expand(t: Tensor) -> Tensor:
            t = ad.broadcast_to(t.reshape(n_dist, 1, self.dim), (n_dist, per, self.dim))
            return t.reshape(k, self.dim)

        slots = expand(self.mu) + expand(self.sigma()) * eta
        return SlotBank(slots, n_groups, per_group)


class EntityDiscovery(Module):
    def __init__(
        self,
        dim: int,
        hidden_dim: int,
        k_g: int,
        k_s: int,
        t_iters: int,
        rng: np.random.Generator,
        slot_kind: str = "entity",
        heads: int = 4,
        mlp_ratio: int = 4,
    ):
        if t_iters < 1:
            raise ConfigError("t_iters must be >= 1")
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.t_iters = t_iters
        self.slot_init = SlotInit(slot_kind, k_g, k_s, dim, rng)
        self.q_proj = Projection(dim, hidden_dim, rng)
        self.k_proj = Projection(dim, hidden_dim, rng)
        self.v_proj = Projection(dim, hidden_dim, rng)
        self.w_o = Linear(hidden_dim, dim, rng, bias=False)
        self.refine = MLP(dim, hidden_dim, dim, rng, norm=True)
        # one parameter set, applied to every group
        self.interaction = SelfAttentionLayer(dim, heads, mlp_ratio, rng)
        self.images_processed = 0

    def init_slots(self, batch: int | None, seed: int) -> SlotBank:
        return self.slot_init(batch, seed)

    def _check_features(self, x_v: Tensor) -> None:
        if x_v.ndim < 2 or x_v.shape[-1] != self.dim:
            raise DimensionError(f"visual features must be (..., N, {self.dim}), got {x_v.shape}")
        if x_v.shape[-2] == 0:
            raise DimensionError("visual features have no patches")

    def project_features(self, x_v: Tensor) -> tuple[Tensor, Tensor]:
        return self.k_proj(x_v), self.v_proj(x_v)

    def aggregate(
        self, x_v: Tensor, bank: SlotBank, keys: Tensor | None = None, values: Tensor | None = None
    ) -> tuple[SlotBank, Tensor]:
        """One aggregation step; returns the updated bank and A_slot ``(..., N, K)``."""
        if keys is None or values is None:
            self._check_features(x_v)
            keys, values = self.project_features(x_v)
        s_prev = bank.slots
        q = self.q_proj(s_prev)
        logits = ad.matmul(keys, ad.swapaxes(q, -1, -2)) * (1.0 / math.sqrt(self.hidden_dim))
        # slots compete for each patch: normalise over the slot axis
        a_slot = ad.softmax(logits, axis=-1)
        weights = ad.l1_normalize_columns(a_slot)
        pooled = ad.matmul(ad.swapaxes(weights, -1, -2), values)
        s_hat = self.w_o(pooled) + s_prev
        s_hat = self.refine(s_hat) + s_hat
        return SlotBank(s_hat, bank.k_g, bank.k_s), a_slot

    def interact(self, bank: SlotBank) -> SlotBank:
        """Shared self-attention applied independently within each group."""
        out = self.interaction(bank.grouped())
        return SlotBank(out.reshape(bank.slots.shape), bank.k_g, bank.k_s)

    def __call__(self, x_v: Tensor, seed: int) -> tuple[Tensor, Tensor]:
        """Run T refinement rounds; returns entity embeddings and the last A_slot."""
        self._check_features(x_v)
        batch = x_v.shape[0] if x_v.ndim == 3 else None
        self.images_processed += 1 if batch is None else batch
        keys, values = self.project_features(x_v)
        bank = self.init_slots(batch, seed)
        a_slot = None
        for _ in range(self.t_iters):
            bank, a_slot = self.aggregate(x_v, bank, keys, values)
            bank = self.interact(bank)
        return bank.slots, a_slot

    discover = __call__
