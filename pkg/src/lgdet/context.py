"""Global context aggregation over the four encoder levels."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ContextConfig
from .nn import Linear, Module, SharedMLP, make_norm
from .tensor import Tensor


class ChannelNorm(Module):
    """Pointwise MLP to ``k`` channels, then max over every seed: [B, N, C] -> [B, k]."""

    def __init__(self, in_channels: int, k: int, rng: np.random.Generator, norm: str = "batch"):
        self.mlp = SharedMLP([in_channels, k], rng, norm=norm)

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[1] == 0:
            raise ValueError("channel_normalize needs at least one seed")
        pooled, _ = T.max_reduce(self.mlp(f), axis=1)
        return pooled


class GlobalContext(Module):
    def __init__(self, level_channels: list[int], feature_channels: int, cfg: ContextConfig,
                 rng: np.random.Generator, norm: str = "batch"):
        k, cg = cfg.compressed_channels, cfg.global_channels
        self.cn = [ChannelNorm(c, k, rng, norm) for c in level_channels]
        # per-scene vectors: normalizing over the batch would break B = 1, so no norm here
        self.agg = SharedMLP([len(level_channels) * k, cg, cg], rng, norm="none", last_act=False)
        self.fuse = Linear(feature_channels + cg, feature_channels, rng)
        self.fuse_norm = make_norm(norm, feature_channels)

    def aggregate(self, levels: list[Tensor]) -> Tensor:
        """Concatenate the per-level compressed vectors and map them to ``[B, C_g]``."""
        return self.agg(T.concat([cn(f) for cn, f in zip(self.cn, levels)], axis=-1))

    def fuse_global(self, points: Tensor, g: Tensor) -> Tensor:
        """Broadcast ``g`` to every point, concat on channels, project back to the input width.

        The projection is added to the point features as a residual,
        ``relu(points + norm(W [points, g] + b))``, so the scene vector refines
        local features instead of replacing them.
        """
        B, N, _ = points.shape
        tiled = T.reshape(g, (B, 1, g.shape[-1])) * Tensor(np.ones((1, N, 1)))
        return T.relu(points + self.fuse_norm(self.fuse(T.concat([points, tiled], axis=-1))))

    def forward(self, points: Tensor, levels: list[Tensor]) -> tuple[Tensor, Tensor]:
        g = self.aggregate(levels)
        return self.fuse_global(points, g), g
