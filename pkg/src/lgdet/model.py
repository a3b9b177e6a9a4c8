"""The end-to-end detector and batching of scenes into model inputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .context import GlobalContext
from .data import Box3D, Scene, apply_normalization, normalization
from .encoder import Backbone, SeedFeatures
from .head import (Proposals, ProposalModule, SceneTargets, Votes, VotingModule, compute_loss,
                   decode_boxes)
from .metrics import nms_3d
from .nn import Module
from .tensor import Tensor


@dataclass
class Batch:
    xyz: np.ndarray  # [B, N, 3]
    features: np.ndarray  # [B, N, C]
    norm_xyz: np.ndarray  # [B, N, 3]
    diag: np.ndarray  # [B] scene bounding-box diagonal, bounds vote offsets
    targets: list[SceneTargets]
    scene_ids: list[str]


def make_batch(scenes: list[Scene]) -> Batch:
    xyz = np.stack([s.cloud.coords for s in scenes])
    feats = np.stack([s.cloud.features if s.cloud.features is not None else np.zeros((len(s.cloud), 0))
                      for s in scenes])
    norm, diag = [], []
    for pts in xyz:
        off, scale = normalization(pts)
        norm.append(apply_normalization(pts, off, scale))
        diag.append(float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))))
    return Batch(xyz, feats, np.stack(norm), np.array(diag),
                 [SceneTargets.from_boxes(s.gt_boxes) for s in scenes], [s.scene_id for s in scenes])


@dataclass
class Output:
    seeds: SeedFeatures
    levels: list[SeedFeatures]
    global_context: Tensor | None
    votes: Votes
    proposals: Proposals


class Detector(Module):
    def __init__(self, cfg: RunConfig, in_channels: int = 1, seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        self.in_channels = in_channels
        enc = cfg.encoder
        self.backbone = Backbone(in_channels, enc, rng)
        dc = enc.decoder_channels
        if cfg.context.enabled:
            self.context = GlobalContext([lv.channels for lv in enc.levels], dc, cfg.context, rng, enc.norm)
        self.voting = VotingModule(dc, rng, enc.norm)
        self.proposal = ProposalModule(dc, cfg.head, rng, enc.norm)

    def forward(self, batch: Batch, rng: np.random.Generator | None = None) -> Output:
        inputs = SeedFeatures(Tensor(batch.features), batch.xyz, batch.norm_xyz)
        seeds, levels = self.backbone(inputs, rng)
        g = None
        feats = seeds.features
        if self.cfg.context.enabled:
            feats, g = self.context(feats, [lv.features for lv in levels])
            seeds = SeedFeatures(feats, seeds.coords, seeds.norm_coords)
        votes = self.voting(seeds.coords, feats, batch.diag)
        props = self.proposal(votes)
        return Output(seeds, levels, g, votes, props)

    def loss(self, out: Output, batch: Batch):
        return compute_loss(out.proposals, out.votes, batch.targets, self.cfg.head, self.cfg.loss)

    def detect(self, out: Output, nms: bool = True) -> list[list[Box3D]]:
        h = self.cfg.head
        res = []
        for b in range(out.proposals.base_coords.shape[0]):
            boxes = decode_boxes(out.proposals, b, h.score_threshold)
            res.append(nms_3d(boxes, h.nms_iou) if nms else boxes)
        return res
