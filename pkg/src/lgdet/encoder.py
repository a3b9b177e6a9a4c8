"""Feature encoding (SG -> RPL -> DPI) and feature decoding blocks.

Feature tensors are channel-last: seeds ``[B, N, C]`` and grouped sets
``[B, N, n, 3 + C]`` whose first three channels are offsets from the seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pointops
from . import tensor as T
from .config import EncoderConfig, LevelConfig
from .nn import Linear, Module, SharedMLP, activation, make_norm
from .tensor import Tensor


@dataclass
class SeedFeatures:
    features: Tensor  # [B, N, C]
    coords: np.ndarray  # [B, N, 3] meters
    norm_coords: np.ndarray  # [B, N, 3] scene-normalized, in [0, 1]


@dataclass
class GroupedFeatures:
    features: Tensor  # [B, N, n, 3 + C]
    neighbor_idx: np.ndarray  # [B, N, n] into the previous level
    norm_coords: np.ndarray  # [B, N, n, 3] absolute normalized neighbor coords


# ---------------------------------------------------------------- sample & group

def sample_and_group(xyz: np.ndarray, feats: Tensor | None, norm_xyz: np.ndarray,
                     level: LevelConfig, start: np.ndarray | int = 0) -> tuple[np.ndarray, np.ndarray, GroupedFeatures]:
    """FPS seeds, ball-query neighbors, and relative grouping for one level.

    Returns ``(seed_idx [B, N], seed_xyz [B, N, 3], grouped)``.
    """
    B = xyz.shape[0]
    seed_idx = pointops.farthest_point_sample_batch(xyz, level.num_seeds, start)
    seed_xyz = np.take_along_axis(xyz, seed_idx[..., None], axis=1)
    nbr = pointops.ball_query_batch(xyz, seed_xyz, level.radius, level.neighbors)
    rows = np.arange(B)[:, None, None]
    rel = xyz[rows, nbr] - seed_xyz[:, :, None, :]
    parts = [Tensor(rel)]
    if feats is not None:
        parts.append(T.gather_rows(feats, nbr))
    grouped = T.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    return seed_idx, seed_xyz, GroupedFeatures(grouped, nbr, norm_xyz[rows, nbr])


# ---------------------------------------------------------------- Fourier PE

def fourier_features(coords: np.ndarray, bands: int, base: float) -> np.ndarray:
    """Raw sinusoidal embedding ``[..., 6 * bands]`` of coordinates in [0, 1].

    Frequencies are ``base ** (i / bands)``. Per coordinate the layout is
    ``(cos f0 v, sin f0 v, cos f1 v, sin f1 v, ...)``; coordinate blocks follow x, y, z.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[-1] != 3:
        raise ValueError(f"expected [..., 3] coordinates, got {coords.shape}")
    if (coords < -1e-9).any() or (coords > 1 + 1e-9).any():
        raise ValueError("fourier_features expects coordinates normalized to [0, 1]")
    freqs = base ** (np.arange(bands) / bands)
    ang = 2.0 * np.pi * coords[..., :, None] * freqs  # [..., 3, bands]
    pairs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)  # [..., 3, bands, 2]
    return pairs.reshape(coords.shape[:-1] + (6 * bands,))


class FourierPE(Module):
    def __init__(self, bands: int, base: float, channels: int, rng: np.random.Generator):
        self.bands = bands
        self.base = base
        self.proj = Linear(6 * bands, channels, rng)

    def forward(self, coords: np.ndarray) -> Tensor:
        return self.proj(Tensor(fourier_features(coords, self.bands, self.base)))


# ---------------------------------------------------------------- RPL

class ResidualBlock(Module):
    """x -> ReLU(x + norm(fc2(ReLU(norm(fc1(x))))))."""

    def __init__(self, channels: int, rng: np.random.Generator, norm: str = "batch", act: str = "relu"):
        self.act = act
        self.fc1 = Linear(channels, channels, rng)
        self.norm1 = make_norm(norm, channels)
        self.fc2 = Linear(channels, channels, rng)
        self.norm2 = make_norm(norm, channels)

    def forward(self, x: Tensor) -> Tensor:
        h = activation(self.act, self.norm1(self.fc1(x)))
        h = self.norm2(self.fc2(h))
        if h.shape != x.shape:
            raise ValueError(f"residual branch {h.shape} does not match identity {x.shape}")
        return activation(self.act, x + h)


class RPL(Module):
    """Entry MLP, ``blocks`` residual MLP blocks, then max-pool over neighbors."""

    def __init__(self, in_channels: int, channels: int, blocks: int, rng: np.random.Generator,
                 norm: str = "batch", act: str = "relu"):
        self.entry = SharedMLP([in_channels, channels], rng, norm=norm, act=act)
        self.blocks = [ResidualBlock(channels, rng, norm, act) for _ in range(blocks)]

    def forward(self, grouped: Tensor) -> Tensor:
        x = self.entry(grouped)
        for blk in self.blocks:
            x = blk(x)
        pooled, _ = T.max_reduce(x, axis=-2)
        return pooled


# ---------------------------------------------------------------- DPI

class DPI(Module):
    """Grouped features query key/value matrices expanded from the pooled seed feature.

    queries  q = lift(grouped) + PE(neighbor coords)         [B, N, n, C]
    keys     k = kv(pooled)[:C*r] -> [B, N, C, r]            r = C / bottleneck
    values   v = kv(pooled)[C*r:] -> [B, N, r, C]
    y = maxpool_n(act(norm(act(norm(q k)) v)));  out = act(y + pooled)
    """

    def __init__(self, in_channels: int, channels: int, bottleneck: int, pe_bands: int,
                 pe_base: float, rng: np.random.Generator, norm: str = "batch", act: str = "relu"):
        if channels % bottleneck:
            raise ValueError(f"bottleneck {bottleneck} must divide channels {channels}")
        self.channels = channels
        self.reduced = channels // bottleneck
        self.act = act
        self.lift = Linear(in_channels, channels, rng)
        self.pe = FourierPE(pe_bands, pe_base, channels, rng)
        self.kv = Linear(channels, 2 * channels * self.reduced, rng)
        self.norm_key = make_norm(norm, self.reduced)
        self.norm_value = make_norm(norm, channels)

    def forward(self, grouped: GroupedFeatures, pooled: Tensor) -> Tensor:
        g = grouped.features
        B, N, n, _ = g.shape
        C, r = self.channels, self.reduced
        if pooled.shape != (B, N, C):
            raise ValueError(f"pooled features {pooled.shape} do not match grouped {g.shape} / C={C}")
        q = self.lift(g) + self.pe(grouped.norm_coords)
        kv = self.kv(pooled)
        keys = T.reshape(kv[..., : C * r], (B, N, C, r))
        values = T.reshape(kv[..., C * r:], (B, N, r, C))
        y = activation(self.act, self.norm_key(T.matmul(q, keys)))
        y = activation(self.act, self.norm_value(T.matmul(y, values)))
        y, _ = T.max_reduce(y, axis=2)
        return activation(self.act, y + pooled)


class SelfAttention(Module):
    """Single-head scaled dot-product attention across seeds, residual add, ReLU.

    Only used as the ablation stand-in for DPI.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.scale = 1.0 / np.sqrt(channels)

    def forward(self, pooled: Tensor) -> Tensor:
        q, k, v = self.q(pooled), self.k(pooled), self.v(pooled)
        att = T.softmax(T.matmul(q, T.transpose(k, (0, 2, 1))) * self.scale, axis=-1)
        return T.relu(pooled + T.matmul(att, v))


# ---------------------------------------------------------------- blocks

class FEBlock(Module):
    def __init__(self, in_channels: int, level: LevelConfig, cfg: EncoderConfig, rng: np.random.Generator):
        self.level = level
        grouped_ch = 3 + in_channels
        self.rpl = RPL(grouped_ch, level.channels, cfg.rpl_blocks, rng, cfg.norm, cfg.activation)
        self.mode = cfg.dpi
        if cfg.dpi == "on":
            self.dpi = DPI(grouped_ch, level.channels, cfg.dpi_bottleneck, cfg.pe_bands, cfg.pe_base,
                           rng, cfg.norm, cfg.activation)
        elif cfg.dpi == "self_attention":
            self.attn = SelfAttention(level.channels, rng)

    def forward(self, seeds: SeedFeatures, start: np.ndarray | int = 0) -> tuple[SeedFeatures, GroupedFeatures, np.ndarray]:
        idx, xyz, grouped = sample_and_group(seeds.coords, seeds.features, seeds.norm_coords, self.level, start)
        out = self.forward_grouped(grouped)
        norm = np.take_along_axis(seeds.norm_coords, idx[..., None], axis=1)
        return SeedFeatures(out, xyz, norm), grouped, idx

    def forward_grouped(self, grouped: GroupedFeatures) -> Tensor:
        pooled = self.rpl(grouped.features)
        if self.mode == "on":
            return self.dpi(grouped, pooled)
        if self.mode == "self_attention":
            return self.attn(pooled)
        return pooled


def interpolate_features(sparse: SeedFeatures, dense_coords: np.ndarray) -> Tensor:
    """Differentiable three-NN inverse-distance interpolation onto ``dense_coords``."""
    idx, w = [], []
    for b in range(dense_coords.shape[0]):
        i, wb = pointops.three_nn_weights(sparse.coords[b], dense_coords[b])
        idx.append(i)
        w.append(wb)
    gathered = T.gather_rows(sparse.features, np.stack(idx))  # [B, D, k, C]
    return T.sum_(gathered * Tensor(np.stack(w)[..., None]), axis=2)


class FDBlock(Module):
    def __init__(self, sparse_channels: int, skip_channels: int, out_channels: int,
                 rng: np.random.Generator, norm: str = "batch", act: str = "relu"):
        self.mlp = SharedMLP([sparse_channels + skip_channels, out_channels, out_channels], rng, norm=norm, act=act)

    def forward(self, sparse: SeedFeatures, skip: SeedFeatures) -> SeedFeatures:
        up = interpolate_features(sparse, skip.coords)
        fused = self.mlp(T.concat([up, skip.features], axis=-1))
        return SeedFeatures(fused, skip.coords, skip.norm_coords)


class Backbone(Module):
    """Four FE blocks followed by two FD blocks back to the level-2 seeds."""

    def __init__(self, in_channels: int, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = [in_channels] + [lv.channels for lv in cfg.levels]
        self.fe = [FEBlock(chans[i], lv, cfg, rng) for i, lv in enumerate(cfg.levels)]
        dc = cfg.decoder_channels
        self.fd = [
            FDBlock(chans[4], chans[3], dc, rng, cfg.norm, cfg.activation),
            FDBlock(dc, chans[2], dc, rng, cfg.norm, cfg.activation),
        ]

    def forward(self, inputs: SeedFeatures, rng: np.random.Generator | None = None) -> tuple[SeedFeatures, list[SeedFeatures]]:
        levels = []
        cur = inputs
        for blk in self.fe:
            start = 0
            if self.cfg.fps_random_start and rng is not None:
                start = rng.integers(0, cur.coords.shape[1], size=cur.coords.shape[0])
            cur, _, _ = blk(cur, start)
            levels.append(cur)
        up = self.fd[0](levels[3], levels[2])
        up = self.fd[1](up, levels[1])
        return up, levels
