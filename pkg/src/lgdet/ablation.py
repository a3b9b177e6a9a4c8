"""Component ablations on the toy set. Results are reported, never asserted."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .config import RunConfig
from .data import Scene
from .train import train

VARIANTS: list[tuple[str, dict]] = [
    ("full", {}),
    ("-DPI", {"dpi": "off"}),
    ("-GCA", {"gca": "off"}),
    ("self-attn for DPI", {"dpi": "self_attention"}),
    ("rpl_blocks=0", {"rpl_blocks": 0}),
    ("rpl_blocks=1", {"rpl_blocks": 1}),
    ("rpl_blocks=2", {"rpl_blocks": 2}),
    ("rpl_blocks=3", {"rpl_blocks": 3}),
]


@dataclass
class AblationRow:
    variant: str
    seed: int
    map25: float
    map50: float
    final_loss: float


def run_ablation(cfg: RunConfig, scenes: list[Scene], holdout: list[Scene], seeds: Iterable[int],
                 variants=VARIANTS, log: Callable[[str], None] | None = None) -> list[AblationRow]:
    """Train every variant for every seed. Variants whose resolved config coincides are trained once."""
    rows = []
    cache: dict[tuple[str, int], AblationRow] = {}
    for name, flags in variants:
        vcfg = cfg.with_ablation(**flags)
        for seed in seeds:
            run_cfg = vcfg.model_copy(update={"seed": seed})
            key = (run_cfg.model_dump_json(), seed)
            if key not in cache:
                res = train(run_cfg, scenes, holdout)
                cache[key] = AblationRow(name, seed, res.holdout.map25, res.holdout.map50,
                                         res.history[-1]["total"])
            row = cache[key]
            rows.append(AblationRow(name, seed, row.map25, row.map50, row.final_loss))
            if log:
                log(f"{name:18s} seed {seed}: mAP@0.25 {row.map25:.4f}  mAP@0.5 {row.map50:.4f}")
    return rows


def format_table(rows: list[AblationRow]) -> str:
    names = list(dict.fromkeys(r.variant for r in rows))
    head = f"{'variant':18s} | {'mAP@0.25':>16s} | {'mAP@0.5':>16s} | {'final loss':>10s} | seeds"
    lines = [head, "-" * len(head)]
    for n in names:
        sel = [r for r in rows if r.variant == n]
        a25 = np.array([r.map25 for r in sel]) * 100
        a50 = np.array([r.map50 for r in sel]) * 100
        loss = np.mean([r.final_loss for r in sel])
        lines.append(f"{n:18s} | {a25.mean():7.1f} ± {a25.std():5.1f} | {a50.mean():7.1f} ± {a50.std():5.1f} | "
                     f"{loss:10.4f} | {len(sel)}")
    return "\n".join(lines)
