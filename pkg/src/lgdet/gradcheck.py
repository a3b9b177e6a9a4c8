"""Central finite-difference checks of every parameterized module.

Each case builds a small float64 instance from a seed, reduces the module output
to a scalar through fixed random weights, and compares analytic gradients of
inputs and parameters with central differences at a sample of coordinates.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ContextConfig, EncoderConfig, HeadConfig, LevelConfig, LossWeights
from .context import ChannelNorm, GlobalContext
from .encoder import DPI, RPL, FEBlock, FourierPE, GroupedFeatures, SeedFeatures
from .head import ProposalModule, SceneTargets, Votes, VotingModule, compute_loss
from .data import Box3D
from .nn import BatchNorm, Linear, Module
from .tensor import Tensor

TOLERANCE = 1e-5
STEP = 1e-5


@dataclass
class CheckResult:
    suite: str
    seed: int
    tensor: str
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error < TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(max |a|, max |n|, floor) over the sampled coordinates."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


# Tensors whose true gradient is (near) zero, such as a bias feeding a batch norm,
# only carry difference noise; their error is measured against this fraction of
# the largest gradient entry in the whole check.
GLOBAL_FLOOR = 1e-3


def check(f: Callable[[], Tensor], tensors: dict[str, Tensor], rng: np.random.Generator,
          samples: int = 12) -> dict[str, float]:
    """Compare backprop with central differences for each named leaf tensor."""
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    backward_loss = f()
    T.backward(backward_loss, tensors.values())
    floor = max(1e-8, GLOBAL_FLOOR * max(np.abs(t.grad).max(initial=0.0) for t in tensors.values()))
    errors = {}
    for name, t in tensors.items():
        idx = rng.choice(t.size, size=min(samples, t.size), replace=False)
        numeric = T.finite_diff_grad(lambda _: f(), t, STEP, indices=idx)
        errors[name] = rel_error(t.grad.reshape(-1)[idx], numeric, floor)
    return errors


def _probe(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.standard_normal(out.shape))
    return lambda y: T.sum_(y * w)


def _params(m: Module, prefix: str = "") -> dict[str, Tensor]:
    return {prefix + n: p for n, p in m.named_parameters()}


def _scalarize(fwd: Callable[[], Tensor], rng: np.random.Generator) -> Callable[[], Tensor]:
    probe = _probe(fwd(), rng)
    return lambda: probe(fwd())


def _grouped(rng, B=2, N=3, n=4, C=3) -> GroupedFeatures:
    feats = rng.standard_normal((B, N, n, 3 + C))
    norm = rng.random((B, N, n, 3))
    return GroupedFeatures(Tensor(feats), np.zeros((B, N, n), dtype=np.int64), norm)


# ---------------------------------------------------------------- suites

def suite_linear(rng):
    m = Linear(5, 4, rng)
    x = Tensor(rng.standard_normal((3, 6, 5)))
    m.bias.data[:] = rng.standard_normal(4)
    return _scalarize(lambda: m(x), rng), {"x": x, **_params(m)}


def suite_norm(rng):
    m = BatchNorm(4)
    m.weight.data[:] = rng.uniform(0.5, 1.5, 4)
    m.bias.data[:] = rng.standard_normal(4)
    x = Tensor(rng.standard_normal((3, 5, 4)) * 2 + 1)
    return _scalarize(lambda: m(x), rng), {"x": x, **_params(m)}


def suite_rpl(rng):
    m = RPL(6, 8, 2, rng)
    x = Tensor(rng.standard_normal((2, 3, 5, 6)))
    return _scalarize(lambda: m(x), rng), {"x": x, **_params(m)}


def suite_pe_projection(rng):
    m = FourierPE(4, 1000.0, 6, rng)
    m.proj.bias.data[:] = rng.standard_normal(6)
    coords = rng.random((2, 5, 3))
    return _scalarize(lambda: m(coords), rng), _params(m)


def suite_dpi(rng):
    m = DPI(6, 8, 4, 4, 1000.0, rng)
    g = _grouped(rng)
    pooled = Tensor(rng.standard_normal((2, 3, 8)))
    return _scalarize(lambda: m(g, pooled), rng), {"grouped": g.features, "pooled": pooled, **_params(m)}


def suite_fe_block(rng):
    cfg = EncoderConfig(levels=[LevelConfig(num_seeds=s, radius=0.6, neighbors=4, channels=8) for s in (6, 4, 3, 2)],
                        rpl_blocks=1, pe_bands=3)
    blk = FEBlock(2, cfg.levels[0], cfg, rng)
    xyz = rng.random((2, 16, 3))
    feats = Tensor(rng.standard_normal((2, 16, 2)))
    seeds = SeedFeatures(feats, xyz, xyz)
    return _scalarize(lambda: blk(seeds)[0].features, rng), {"features": feats, **_params(blk)}


def suite_cn(rng):
    m = ChannelNorm(5, 6, rng)
    x = Tensor(rng.standard_normal((2, 7, 5)))
    return _scalarize(lambda: m(x), rng), {"x": x, **_params(m)}


def _context(rng):
    cfg = ContextConfig(compressed_channels=4, global_channels=5)
    return GlobalContext([3, 4, 4, 5], 6, cfg, rng)


def suite_aggregate(rng):
    m = _context(rng)
    levels = [Tensor(rng.standard_normal((2, n, c))) for n, c in ((9, 3), (7, 4), (5, 4), (3, 5))]
    leaves = {f"level{i}": t for i, t in enumerate(levels)}
    return _scalarize(lambda: m.aggregate(levels), rng), {**leaves, **_params(m)}


def suite_fuse(rng):
    m = _context(rng)
    m.fuse.bias.data[:] = rng.standard_normal(6)
    pts = Tensor(rng.standard_normal((2, 5, 6)))
    g = Tensor(rng.standard_normal((2, 5)))
    return _scalarize(lambda: m.fuse_global(pts, g), rng), {"points": pts, "g": g, **_params(m.fuse, "fuse."), **_params(m.fuse_norm, "fuse_norm.")}


def suite_vote(rng):
    m = VotingModule(6, rng)
    xyz = rng.random((2, 8, 3)) * 4
    feats = Tensor(rng.standard_normal((2, 8, 6)))

    def fwd():
        v = m(xyz, feats, 100.0)
        return T.concat([v.coords, v.features], axis=-1)
    return _scalarize(fwd, rng), {"features": feats, **_params(m)}


def suite_head(rng):
    cfg = HeadConfig(num_classes=3, num_proposals=4, cluster_radius=0.8, cluster_neighbors=3, channels=6)
    m = ProposalModule(5, cfg, rng)
    S = 12
    seed_xyz = rng.random((2, S, 3)) * 3
    coords = Tensor(seed_xyz + rng.standard_normal((2, S, 3)) * 0.1)
    feats = Tensor(rng.standard_normal((2, S, 5)))
    targets = []
    for b in range(2):
        c = seed_xyz[b, :2]
        targets.append(SceneTargets.from_boxes([Box3D(c[k], np.full(3, 1.5), 0.0, k) for k in range(2)]))
    # wide positive band so center/size/class terms are active
    cfg_loss = cfg.model_copy(update={"positive_dist": 10.0, "negative_dist": 20.0})

    def fwd():
        votes = Votes(coords, feats, seed_xyz)
        return compute_loss(m(votes), votes, targets, cfg_loss, LossWeights())[0]
    return fwd, {"vote_coords": coords, "vote_features": feats, **_params(m)}


SUITES: dict[str, Callable] = {
    "linear": suite_linear,
    "norm": suite_norm,
    "rpl": suite_rpl,
    "pe_projection": suite_pe_projection,
    "dpi": suite_dpi,
    "fe_block": suite_fe_block,
    "cn": suite_cn,
    "aggregate": suite_aggregate,
    "fuse": suite_fuse,
    "vote": suite_vote,
    "head": suite_head,
}

GROUPS = {
    "all": list(SUITES),
    "encoder": ["linear", "norm", "rpl", "pe_projection", "dpi", "fe_block"],
    "dpi": ["pe_projection", "dpi"],
    "gca": ["cn", "aggregate", "fuse"],
    "head": ["vote", "head"],
}


def run_suite(name: str, seeds=range(5)) -> list[CheckResult]:
    out = []
    for seed in seeds:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        f, leaves = SUITES[name](rng)
        for tensor, err in check(f, leaves, rng).items():
            out.append(CheckResult(name, seed, tensor, err))
    return out


def run(group: str = "all", seeds=range(5)) -> list[CheckResult]:
    if group not in GROUPS:
        raise KeyError(f"unknown gradcheck group {group!r}; choose from {sorted(GROUPS)}")
    return [r for name in GROUPS[group] for r in run_suite(name, seeds)]
