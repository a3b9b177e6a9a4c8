"""Synthetic indoor scenes, augmentation, and point-cloud / scene / detection files."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import AugmentConfig, SceneGenConfig
from .pointops import PointCloud


@dataclass
class Box3D:
    center: np.ndarray
    size: np.ndarray
    heading: float = 0.0
    class_id: int = 0
    score: float | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not (self.size > 0).all():
            raise ValueError(f"box size must be positive, got {self.size}")
        if not -math.pi <= self.heading < math.pi:
            raise ValueError(f"heading {self.heading} outside [-pi, pi)")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.size / 2

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.size / 2

    def contains(self, xyz: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        # tol absorbs the rounding of center/size <-> bounds conversion
        return ((xyz >= self.lo - tol) & (xyz <= self.hi + tol)).all(axis=-1)

    def to_dict(self) -> dict:
        d = {"class_id": int(self.class_id), "center": self.center.tolist(),
             "size": self.size.tolist(), "heading": float(self.heading)}
        if self.score is not None:
            d["score"] = float(self.score)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(center=d["center"], size=d["size"], heading=d.get("heading", 0.0),
                   class_id=d.get("class_id", 0), score=d.get("score"))

    @classmethod
    def from_bounds(cls, lo, hi, class_id: int = 0) -> "Box3D":
        lo, hi = np.asarray(lo), np.asarray(hi)
        return cls(center=(lo + hi) / 2, size=hi - lo, class_id=class_id)


def normalization(xyz: np.ndarray) -> tuple[np.ndarray, float]:
    """Offset and isotropic scale mapping ``xyz`` into the unit cube."""
    lo = xyz.min(axis=0)
    extent = float((xyz.max(axis=0) - lo).max())
    return lo, (1.0 / extent if extent > 0 else 1.0)


def apply_normalization(xyz: np.ndarray, offset: np.ndarray, scale: float) -> np.ndarray:
    return np.clip((xyz - offset) * scale, 0.0, 1.0)


def height_feature(xyz: np.ndarray) -> np.ndarray:
    floor = np.percentile(xyz[:, 2], 0.99)
    return (xyz[:, 2] - floor)[:, None]


@dataclass
class Scene:
    cloud: PointCloud
    gt_boxes: list[Box3D]
    scene_id: str
    norm_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    norm_scale: float = 1.0
    # per-point object index (-1 = background); lets rotation re-fit boxes to object points
    instance_ids: np.ndarray | None = None

    def refresh_norm(self) -> "Scene":
        self.norm_offset, self.norm_scale = normalization(self.cloud.coords)
        return self


# ---------------------------------------------------------------- generation

def _sample_box_surface(rng: np.random.Generator, lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    size = hi - lo
    areas = np.array([size[1] * size[2], size[1] * size[2], size[0] * size[2],
                      size[0] * size[2], size[0] * size[1], size[0] * size[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.random((n, 3))
    pts = lo + u * size
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 1, hi[axis], lo[axis])
    return pts


def _object_extent(rng: np.random.Generator, cls: int) -> tuple[np.ndarray, float]:
    """Size and bottom height for one synthetic object of class ``cls``."""
    if cls == 0:
        return rng.uniform(0.4, 1.2, size=3), 0.0
    if cls == 1:
        return np.array([rng.uniform(0.8, 1.6), rng.uniform(0.8, 1.6), rng.uniform(0.10, 0.16)]), rng.uniform(0.55, 0.75)
    return np.array([rng.uniform(0.3, 0.6), rng.uniform(0.3, 0.6), rng.uniform(1.4, 2.0)]), 0.0


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def gen_synthetic_scene(seed: int, cfg: SceneGenConfig | None = None, scene_id: str | None = None) -> Scene:
    """Deterministic toy room: floor, two walls, clutter and 1..4 axis-aligned objects.

    Coordinates are rounded to float32 so the binary cloud format stores them exactly.
    """
    cfg = cfg or SceneGenConfig()
    rng = np.random.default_rng(seed)
    W, D, H = cfg.room
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1)) if cfg.max_objects > 0 else 0

    placed: list[tuple[np.ndarray, np.ndarray, int]] = []
    attempts = 0
    while len(placed) < n_obj and attempts < 1000:
        attempts += 1
        cls = int(rng.integers(cfg.num_classes))
        size, bottom = _object_extent(rng, cls)
        cx = rng.uniform(0.3 + size[0] / 2, W - 0.3 - size[0] / 2)
        cy = rng.uniform(0.3 + size[1] / 2, D - 0.3 - size[1] / 2)
        lo = np.array([cx - size[0] / 2, cy - size[1] / 2, bottom])
        hi = lo + size
        if any((lo[:2] < h[:2] + 0.15).all() and (hi[:2] > l[:2] - 0.15).all() for l, h, _ in placed):
            continue
        placed.append((lo, hi, cls))

    N = cfg.num_points
    n_bg = N if not placed else int(round(N * cfg.background_fraction))
    n_floor = n_bg // 2
    n_wall = n_bg // 5
    n_clutter = n_bg - n_floor - 2 * n_wall
    floor = np.column_stack([rng.uniform(0, W, n_floor), rng.uniform(0, D, n_floor), np.zeros(n_floor)])
    wall_x = np.column_stack([np.zeros(n_wall), rng.uniform(0, D, n_wall), rng.uniform(0, H, n_wall)])
    wall_y = np.column_stack([rng.uniform(0, W, n_wall), np.zeros(n_wall), rng.uniform(0, H, n_wall)])
    clutter = rng.uniform([0, 0, 0], [W, D, H], size=(n_clutter, 3))
    parts = [floor, wall_x, wall_y, clutter]
    inst = [np.full(n_bg, -1)]

    n_obj_pts = N - n_bg
    for k, (lo, hi, _) in enumerate(placed):
        cnt = n_obj_pts // len(placed) + (1 if k < n_obj_pts % len(placed) else 0)
        parts.append(_sample_box_surface(rng, lo, hi, cnt))
        inst.append(np.full(cnt, k))

    # shuffle so index order carries no part structure (ball query keeps the first hits by index)
    order = rng.permutation(N)
    xyz = _f32(np.concatenate(parts))[order]
    instance_ids = np.concatenate(inst)[order]
    boxes = []
    for k, (_, _, cls) in enumerate(placed):
        pts = xyz[instance_ids == k]
        boxes.append(Box3D.from_bounds(pts.min(axis=0), pts.max(axis=0), class_id=cls))
    cloud = PointCloud(xyz, _f32(height_feature(xyz)))
    scene = Scene(cloud, boxes, scene_id or f"scene_{seed:06d}", instance_ids=instance_ids)
    return scene.refresh_norm()


# ---------------------------------------------------------------- augmentation

def augment_params(rng: np.random.Generator, cfg: AugmentConfig) -> tuple[bool, float, float]:
    flip = bool(rng.random() < cfg.flip_prob)
    theta = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    scale = float(rng.uniform(*cfg.scale_range))
    return flip, theta, scale


def augment(scene: Scene, rng: np.random.Generator | None = None, cfg: AugmentConfig | None = None,
            params: tuple[bool, float, float] | None = None) -> Scene:
    """Random x-flip, z-rotation and global scale applied to points and boxes alike.

    Boxes stay axis-aligned: after a rotation each box is re-fit to the rotated
    points of its object (or to its rotated corners when instance ids are absent).
    """
    cfg = cfg or AugmentConfig()
    flip, theta, scale = params if params is not None else augment_params(rng, cfg)
    xyz = scene.cloud.coords.copy()
    boxes = [replace(b, center=b.center.copy(), size=b.size.copy()) for b in scene.gt_boxes]
    if flip:
        xyz[:, 0] = -xyz[:, 0]
        for b in boxes:
            b.center[0] = -b.center[0]
    if theta != 0.0:
        c, s = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        xyz = xyz @ rot.T
        refit = []
        for k, b in enumerate(boxes):
            if scene.instance_ids is not None and (scene.instance_ids == k).any():
                pts = xyz[scene.instance_ids == k]
            else:
                corners = b.lo + np.array(np.meshgrid([0, 1], [0, 1], [0, 1])).T.reshape(-1, 3) * b.size
                pts = corners @ rot.T
            refit.append(Box3D.from_bounds(pts.min(axis=0), pts.max(axis=0), class_id=b.class_id))
        boxes = refit
    if scale != 1.0:
        xyz = xyz * scale
        for b in boxes:
            b.center = b.center * scale
            b.size = b.size * scale
    feats = None
    if scene.cloud.features is not None:
        # flip and z-rotation leave heights alone; scaling about the origin scales them
        feats = scene.cloud.features.copy()
        if scale != 1.0:
            feats[:, 0] *= scale
    out = Scene(PointCloud(xyz, feats), boxes, scene.scene_id, instance_ids=scene.instance_ids)
    return out.refresh_norm()


def downsample(scene: Scene, target_points: int, rng: np.random.Generator) -> Scene:
    """Uniform random subset (with replacement only when the cloud is too small)."""
    N = len(scene.cloud)
    idx = rng.choice(N, size=target_points, replace=N < target_points)
    feats = None if scene.cloud.features is None else scene.cloud.features[idx]
    inst = None if scene.instance_ids is None else scene.instance_ids[idx]
    out = Scene(PointCloud(scene.cloud.coords[idx], feats), list(scene.gt_boxes), scene.scene_id,
                instance_ids=inst)
    return out.refresh_norm()


# ---------------------------------------------------------------- files

_MAGIC = b"PCB1"


def save_cloud(cloud: PointCloud, path: str | Path) -> None:
    """``.pcb``: magic, u32 N, u32 C, f32 coords, f32 features. Anything else: text lines."""
    path = Path(path)
    feats = cloud.features if cloud.features is not None else np.zeros((len(cloud), 0))
    if path.suffix == ".pcb":
        header = _MAGIC + struct.pack("<II", len(cloud), feats.shape[1])
        body = cloud.coords.astype("<f4").tobytes() + feats.astype("<f4").tobytes()
        path.write_bytes(header + body)
        return
    rows = np.concatenate([cloud.coords, feats], axis=1)
    path.write_text("".join(" ".join(repr(float(v)) for v in r) + "\n" for r in rows))


def load_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == _MAGIC:
        n, c = struct.unpack("<II", raw[4:12])
        xyz = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=12).reshape(n, 3)
        feats = np.frombuffer(raw, dtype="<f4", count=c * n, offset=12 + 12 * n).reshape(n, c)
        return PointCloud(xyz.astype(np.float64), feats.astype(np.float64) if c else None)
    rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return PointCloud(rows[:, :3], rows[:, 3:] if rows.shape[1] > 3 else None)


def save_scene(scene: Scene, path: str | Path, cloud_name: str | None = None) -> None:
    """Writes ``<path>`` (JSON) and its cloud next to it (binary by default)."""
    path = Path(path)
    cloud_name = cloud_name or path.with_suffix(".pcb").name
    save_cloud(scene.cloud, path.parent / cloud_name)
    doc = {
        "scene_id": scene.scene_id,
        "cloud_path": cloud_name,
        "norm": {"offset": [float(v) for v in scene.norm_offset], "scale": float(scene.norm_scale)},
        "boxes": [b.to_dict() for b in scene.gt_boxes],
    }
    if scene.instance_ids is not None:
        doc["instances"] = scene.instance_ids.astype(int).tolist()
    path.write_text(json.dumps(doc))


def load_scene(path: str | Path) -> Scene:
    path = Path(path)
    doc = json.loads(path.read_text())
    cloud = load_cloud(path.parent / doc["cloud_path"])
    inst = np.asarray(doc["instances"], dtype=np.int64) if "instances" in doc else None
    return Scene(cloud, [Box3D.from_dict(b) for b in doc["boxes"]], doc["scene_id"],
                 np.asarray(doc["norm"]["offset"], dtype=np.float64), float(doc["norm"]["scale"]), inst)


def save_detections(dets: list[Box3D], path: str | Path) -> None:
    Path(path).write_text(json.dumps([d.to_dict() for d in dets], indent=1))


def load_detections(path: str | Path) -> list[Box3D]:
    return [Box3D.from_dict(d) for d in json.loads(Path(path).read_text())]
