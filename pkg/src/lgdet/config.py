"""Run configuration: presets, validation and JSON round-trip."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LevelConfig(_Strict):
    num_seeds: int = Field(gt=0)
    radius: float = Field(gt=0)
    neighbors: int = Field(gt=0)
    channels: int = Field(gt=0)


class EncoderConfig(_Strict):
    levels: list[LevelConfig]
    rpl_blocks: int = Field(2, ge=0)
    dpi: Literal["on", "off", "self_attention"] = "on"
    dpi_bottleneck: int = Field(4, gt=0)
    pe_bands: int = Field(8, gt=0)
    pe_base: float = Field(1000.0, gt=0)
    decoder_channels: int = Field(256, gt=0)
    norm: Literal["batch", "none"] = "batch"
    activation: Literal["relu"] = "relu"
    fps_random_start: bool = False

    @model_validator(mode="after")
    def _check(self):
        seeds = [lv.num_seeds for lv in self.levels]
        if len(seeds) != 4:
            raise ValueError("encoder needs exactly four levels")
        if any(a <= b for a, b in zip(seeds, seeds[1:])):
            raise ValueError(f"num_seeds must strictly decrease across levels, got {seeds}")
        if self.dpi == "on":
            for lv in self.levels:
                if lv.channels % self.dpi_bottleneck:
                    raise ValueError(f"dpi_bottleneck {self.dpi_bottleneck} must divide channels {lv.channels}")
        return self


class ContextConfig(_Strict):
    enabled: bool = True
    compressed_channels: int = Field(128, gt=0)
    global_channels: int = Field(256, gt=0)
    fuse_site: Literal["decoder"] = "decoder"


class HeadConfig(_Strict):
    num_classes: int = Field(3, gt=0)
    num_proposals: int = Field(64, gt=0)
    cluster_radius: float = Field(0.3, gt=0)
    cluster_neighbors: int = Field(16, gt=0)
    channels: int = Field(64, gt=0)
    positive_dist: float = 0.3
    negative_dist: float = 0.6
    objectness_weights: tuple[float, float] = (0.2, 0.8)  # (background, object)
    score_threshold: float = 0.05
    nms_iou: float = 0.25


class LossWeights(_Strict):
    vote: float = 1.0
    objectness: float = 0.5
    center: float = 1.0
    size: float = 1.0
    cls: float = 0.1


class OptimConfig(_Strict):
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.1, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    milestones: list[int] = [12, 24, 36]
    decay: float = 0.2


class AugmentConfig(_Strict):
    enabled: bool = True
    flip_prob: float = 0.5
    max_rotation_deg: float = 18.0
    scale_range: tuple[float, float] = (0.85, 1.15)


class SceneGenConfig(_Strict):
    num_classes: int = 3
    min_objects: int = 2
    max_objects: int = 4
    room: tuple[float, float, float] = (4.5, 4.5, 2.5)
    num_points: int = 2048
    background_fraction: float = 0.4


class RunConfig(_Strict):
    preset: Literal["toy", "full", "full_sunrgbd"] = "toy"
    encoder: EncoderConfig
    context: ContextConfig = ContextConfig()
    head: HeadConfig = HeadConfig()
    loss: LossWeights = LossWeights()
    optim: OptimConfig = OptimConfig()
    augment: AugmentConfig = AugmentConfig()
    scenes: SceneGenConfig = SceneGenConfig()
    num_points: int = Field(2048, gt=0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(8, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.encoder.levels[0].num_seeds > self.num_points:
            raise ValueError("first level samples more seeds than input points")
        if self.head.num_proposals > self.encoder.levels[1].num_seeds:
            raise ValueError("more proposals than voting seeds")
        if self.head.num_classes != self.scenes.num_classes:
            raise ValueError("head.num_classes must match scenes.num_classes")
        return self

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def with_ablation(self, dpi: str | None = None, gca: str | None = None,
                      rpl_blocks: int | None = None) -> "RunConfig":
        data = self.model_dump()
        if dpi is not None:
            data["encoder"]["dpi"] = dpi
        if gca is not None:
            data["context"]["enabled"] = gca == "on"
        if rpl_blocks is not None:
            data["encoder"]["rpl_blocks"] = rpl_blocks
        return RunConfig.model_validate(data)


def toy_preset() -> RunConfig:
    levels = [
        LevelConfig(num_seeds=512, radius=0.4, neighbors=8, channels=32),
        LevelConfig(num_seeds=256, radius=0.8, neighbors=8, channels=64),
        LevelConfig(num_seeds=128, radius=1.2, neighbors=8, channels=64),
        LevelConfig(num_seeds=64, radius=1.8, neighbors=8, channels=64),
    ]
    return RunConfig(
        preset="toy",
        encoder=EncoderConfig(levels=levels, decoder_channels=64),
        context=ContextConfig(compressed_channels=16, global_channels=32),
        head=HeadConfig(num_proposals=64, cluster_radius=0.3, channels=64),
        optim=OptimConfig(lr=1e-3, weight_decay=0.1, milestones=[20, 26]),
        epochs=30,
        batch_size=4,
        num_points=2048,
    )


def full_preset() -> RunConfig:
    levels = [
        LevelConfig(num_seeds=2048, radius=0.2, neighbors=64, channels=128),
        LevelConfig(num_seeds=1024, radius=0.4, neighbors=32, channels=256),
        LevelConfig(num_seeds=512, radius=0.8, neighbors=16, channels=256),
        LevelConfig(num_seeds=256, radius=1.2, neighbors=16, channels=256),
    ]
    return RunConfig(
        preset="full",
        encoder=EncoderConfig(levels=levels, decoder_channels=256),
        head=HeadConfig(num_proposals=256, cluster_radius=0.3, channels=128),
        optim=OptimConfig(lr=1e-3, weight_decay=0.1, milestones=[12, 24, 36]),
        epochs=48,
        batch_size=8,
        num_points=40000,
        scenes=SceneGenConfig(num_points=40000),
    )


def full_sunrgbd_preset() -> RunConfig:
    cfg = full_preset().model_dump()
    cfg.update(preset="full_sunrgbd", epochs=36, num_points=20000)
    cfg["optim"].update(weight_decay=5e-2, milestones=[12, 24])
    cfg["scenes"]["num_points"] = 20000
    return RunConfig.model_validate(cfg)


PRESETS = {"toy": toy_preset, "full": full_preset, "full_sunrgbd": full_sunrgbd_preset}


def load_config(path: str | Path | None = None, preset: str = "toy") -> RunConfig:
    """Load a JSON run config; a partial file is merged over the named preset."""
    base = PRESETS[preset]().model_dump(mode="json")
    if path is None:
        return RunConfig.model_validate(base)
    override = json.loads(Path(path).read_text())
    if "preset" in override and override["preset"] != preset:
        base = PRESETS[override["preset"]]().model_dump(mode="json")
    return RunConfig.model_validate(_merge(base, override))


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
