"""Voting, vote clustering into proposals, box decoding and the detection loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pointops
from . import tensor as T
from .config import HeadConfig, LossWeights
from .data import Box3D
from .metrics import nms_3d  # noqa: F401  (re-exported as part of the head API)
from .nn import Linear, Module, SharedMLP
from .tensor import Tensor

LOG_SIZE_BOUNDS = (-10.0, 5.0)


@dataclass
class Votes:
    coords: Tensor  # [B, S, 3] seed coords + clamped offsets
    features: Tensor  # [B, S, C]
    seed_coords: np.ndarray  # [B, S, 3]


@dataclass
class Proposals:
    base_coords: np.ndarray  # [B, P, 3] sampled vote locations
    objectness: Tensor  # [B, P, 2] logits (background, object)
    center: Tensor  # [B, P, 3]
    log_size: Tensor  # [B, P, 3]
    class_logits: Tensor  # [B, P, K]


@dataclass
class LossReport:
    total: float
    vote_loss: float
    objectness_loss: float
    center_loss: float
    size_loss: float
    class_loss: float

    def as_dict(self) -> dict[str, float]:
        return dict(vars(self))


class VotingModule(Module):
    """Per-seed offset and feature residual; votes = seeds + predictions."""

    def __init__(self, channels: int, rng: np.random.Generator, norm: str = "batch"):
        self.channels = channels
        self.mlp = SharedMLP([channels, channels, channels], rng, norm=norm)
        self.out = Linear(channels, 3 + channels, rng)

    def forward(self, seed_xyz: np.ndarray, feats: Tensor, max_offset: np.ndarray | float) -> Votes:
        pred = self.out(self.mlp(feats))
        offset = T.clamp(pred[..., :3], -np.asarray(max_offset).reshape(-1, 1, 1),
                         np.asarray(max_offset).reshape(-1, 1, 1))
        coords = Tensor(seed_xyz) + offset
        return Votes(coords, feats + pred[..., 3:], seed_xyz)


class ProposalModule(Module):
    def __init__(self, channels: int, cfg: HeadConfig, rng: np.random.Generator, norm: str = "batch"):
        self.cfg = cfg
        self.group_mlp = SharedMLP([3 + channels, cfg.channels, cfg.channels], rng, norm=norm)
        self.head_mlp = SharedMLP([cfg.channels, cfg.channels], rng, norm=norm)
        self.out = Linear(cfg.channels, 2 + 3 + 3 + cfg.num_classes, rng)

    def forward(self, votes: Votes) -> Proposals:
        """FPS over vote locations, ball-query grouping, pointwise MLP + max-pool, box head."""
        cfg = self.cfg
        vxyz = votes.coords.data
        B = vxyz.shape[0]
        idx = pointops.farthest_point_sample_batch(vxyz, cfg.num_proposals)
        base_np = np.take_along_axis(vxyz, idx[..., None], axis=1)
        nbr = pointops.ball_query_batch(vxyz, base_np, cfg.cluster_radius, cfg.cluster_neighbors)
        base = T.gather_rows(votes.coords, idx)  # [B, P, 3]
        rel = T.gather_rows(votes.coords, nbr) - T.reshape(base, (B, cfg.num_proposals, 1, 3))
        grouped = T.concat([rel, T.gather_rows(votes.features, nbr)], axis=-1)
        pooled, _ = T.max_reduce(self.group_mlp(grouped), axis=2)
        raw = self.out(self.head_mlp(pooled))
        K = cfg.num_classes
        return Proposals(
            base_coords=base_np,
            objectness=raw[..., 0:2],
            center=base + raw[..., 2:5],
            log_size=raw[..., 5:8],
            class_logits=raw[..., 8:8 + K],
        )


def cluster_proposals(votes: Votes, module: ProposalModule) -> Proposals:
    return module(votes)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def decode_boxes(props: Proposals, batch_index: int = 0, score_threshold: float = 0.0) -> list[Box3D]:
    """Boxes for one scene with objectness score at or above ``score_threshold``.

    Sizes come from ``exp`` of the clamped log-size, so they are always positive.
    """
    obj = _softmax_np(props.objectness.data[batch_index])[:, 1]
    centers = props.center.data[batch_index]
    sizes = np.exp(np.clip(props.log_size.data[batch_index], *LOG_SIZE_BOUNDS))
    classes = props.class_logits.data[batch_index].argmax(axis=-1)
    out = []
    for i in range(len(obj)):
        if obj[i] >= score_threshold:
            out.append(Box3D(centers[i], sizes[i], 0.0, int(classes[i]), float(obj[i])))
    return out


# ---------------------------------------------------------------- loss

@dataclass
class SceneTargets:
    centers: np.ndarray  # [G, 3]
    sizes: np.ndarray  # [G, 3]
    classes: np.ndarray  # [G]
    boxes: list[Box3D]

    @classmethod
    def from_boxes(cls, boxes: list[Box3D]) -> "SceneTargets":
        if not boxes:
            return cls(np.zeros((0, 3)), np.ones((0, 3)), np.zeros(0, dtype=np.int64), [])
        return cls(np.stack([b.center for b in boxes]), np.stack([b.size for b in boxes]),
                   np.array([b.class_id for b in boxes], dtype=np.int64), list(boxes))


def _zero() -> Tensor:
    return Tensor(0.0)


def vote_targets(seed_xyz: np.ndarray, tgt: SceneTargets) -> tuple[np.ndarray, np.ndarray]:
    """Seeds inside some GT box and the center each should vote for (nearest containing box)."""
    if not tgt.boxes:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    inside = np.stack([b.contains(seed_xyz) for b in tgt.boxes], axis=1)  # [S, G]
    d2 = pointops.sq_dist(seed_xyz, tgt.centers)
    d2 = np.where(inside, d2, np.inf)
    members = np.nonzero(inside.any(axis=1))[0]
    which = np.argmin(d2[members], axis=1)
    return members, tgt.centers[which]


def objectness_labels(base_xyz: np.ndarray, tgt: SceneTargets, pos: float, neg: float):
    """Labels (1 object / 0 background / -1 ignored) and nearest-GT index per proposal."""
    P = len(base_xyz)
    if not tgt.boxes:
        return np.zeros(P, dtype=np.int64), np.full(P, -1)
    d = np.sqrt(pointops.sq_dist(base_xyz, tgt.centers))
    nearest = np.argmin(d, axis=1)
    dmin = d[np.arange(P), nearest]
    labels = np.full(P, -1, dtype=np.int64)
    labels[dmin < pos] = 1
    labels[dmin > neg] = 0
    return labels, nearest


def compute_loss(props: Proposals, votes: Votes, targets: list[SceneTargets], cfg: HeadConfig,
                 weights: LossWeights) -> tuple[Tensor, LossReport]:
    """VoteNet-style multi-task loss, pooled over the whole batch.

    vote: mean over object seeds of the L1 distance from vote to its GT center.
    objectness: cross-entropy over proposals that are not in the ignore band.
    center / size / class: L1, L1 on log-size, and cross-entropy over positives.
    """
    B, S, _ = votes.coords.shape
    P = props.base_coords.shape[1]

    vote_rows, vote_tgt = [], []
    obj_rows, obj_lab = [], []
    pos_rows, pos_center, pos_logsize, pos_cls = [], [], [], []
    for b, tgt in enumerate(targets):
        members, centers = vote_targets(votes.seed_coords[b], tgt)
        vote_rows.append(members + b * S)
        vote_tgt.append(centers)
        labels, nearest = objectness_labels(props.base_coords[b], tgt, cfg.positive_dist, cfg.negative_dist)
        keep = np.nonzero(labels >= 0)[0]
        obj_rows.append(keep + b * P)
        obj_lab.append(labels[keep])
        pos = np.nonzero(labels == 1)[0]
        pos_rows.append(pos + b * P)
        pos_center.append(tgt.centers[nearest[pos]])
        pos_logsize.append(np.log(tgt.sizes[nearest[pos]]))
        pos_cls.append(tgt.classes[nearest[pos]])

    vote_rows = np.concatenate(vote_rows)
    if len(vote_rows):
        flat = T.reshape(votes.coords, (B * S, 3))[vote_rows]
        vote_loss = T.sum_(T.abs_(flat - Tensor(np.concatenate(vote_tgt)))) * (1.0 / len(vote_rows))
    else:
        vote_loss = _zero()

    obj_rows = np.concatenate(obj_rows)
    if len(obj_rows):
        obj_loss = T.cross_entropy(T.reshape(props.objectness, (B * P, 2))[obj_rows], np.concatenate(obj_lab),
                                   cfg.objectness_weights)
    else:
        obj_loss = _zero()

    pos_rows = np.concatenate(pos_rows)
    npos = len(pos_rows)
    if npos:
        c = T.reshape(props.center, (B * P, 3))[pos_rows]
        center_loss = T.sum_(T.abs_(c - Tensor(np.concatenate(pos_center)))) * (1.0 / npos)
        s = T.reshape(props.log_size, (B * P, 3))[pos_rows]
        size_loss = T.sum_(T.abs_(s - Tensor(np.concatenate(pos_logsize)))) * (1.0 / npos)
        K = props.class_logits.shape[-1]
        cls_loss = T.cross_entropy(T.reshape(props.class_logits, (B * P, K))[pos_rows], np.concatenate(pos_cls))
    else:
        center_loss = size_loss = cls_loss = _zero()

    total = (vote_loss * weights.vote + obj_loss * weights.objectness + center_loss * weights.center
             + size_loss * weights.size + cls_loss * weights.cls)
    report = LossReport(total.item(), vote_loss.item(), obj_loss.item(), center_loss.item(),
                        size_loss.item(), cls_loss.item())
    return total, report
