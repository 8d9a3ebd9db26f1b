"""Stage 2: turn localization heatmaps and cluster scores into box annotations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .boxes import Box
from .model import TwoStreamModel
from .numerics import ShapeMismatch


@dataclass
class PseudoAnnotation:
    scene_id: int
    box: Box
    label: int
    confidence: float
    beta: float

    def to_json(self) -> dict:
        d = asdict(self)
        d["box"] = self.box.as_list()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PseudoAnnotation":
        return cls(int(d["scene_id"]), Box.from_seq(d["box"]), int(d["label"]),
                   float(d["confidence"]), float(d["beta"]))


def threshold(h, beta: float) -> float:
    """Convex combination of the heatmap's maximum and mean."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta {beta} outside [0, 1]")
    h = np.asarray(h, dtype=np.float64)
    top = h.max()
    # mean <= max exactly, but the summed mean can round above a flat maximum
    return float(min(beta * top + (1.0 - beta) * h.mean(), top))


_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def connected_components(mask) -> list[np.ndarray]:
    """4-connected components, largest first; ties go to the one starting earliest in row-major order."""
    labelled, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_FOUR_CONNECTED)
    if n == 0:
        return []
    sizes = np.bincount(labelled.ravel())[1:]
    # ndimage numbers components in raster order of their first cell, so a
    # stable sort on size keeps the row-major tie-break
    order = np.argsort(-sizes, kind="stable")
    return [labelled == (k + 1) for k in order]


def largest_component(mask) -> np.ndarray:
    """Boolean mask of the largest component (all-false for an empty mask)."""
    comps = connected_components(mask)
    return comps[0] if comps else np.zeros(np.shape(mask), dtype=bool)


def component_box(component: np.ndarray, image_dims: tuple[int, int]) -> Box | None:
    """Tight cell box scaled to pixels; cell (i, j) covers x in [j*s, (j+1)*s), y in [i*s, (i+1)*s)."""
    if not component.any():
        return None
    H, W = image_dims
    gh, gw = component.shape
    sy, sx = H / gh, W / gw
    rows = np.flatnonzero(component.any(axis=1))
    cols = np.flatnonzero(component.any(axis=0))
    return Box(cols[0] * sx, rows[0] * sy, (cols[-1] + 1) * sx, (rows[-1] + 1) * sy)


def extract_box(h, beta: float, image_dims: tuple[int, int]) -> Box | None:
    h = np.asarray(h, dtype=np.float64)
    return component_box(largest_component(h >= threshold(h, beta)), image_dims)


def class_label(g_v_logits, g_a_logits) -> int:
    gv = np.asarray(g_v_logits, dtype=np.float64)
    ga = np.asarray(g_a_logits, dtype=np.float64)
    if gv.shape != ga.shape:
        raise ShapeMismatch(f"{gv.shape} vs {ga.shape}")
    return int(np.argmax(gv + ga))


def beta_for_scene(beta_range: Sequence[float], seed: int, scene_id: int) -> float:
    lo, hi = float(beta_range[0]), float(beta_range[1])
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError(f"invalid beta range {beta_range}")
    if lo == hi:
        return lo
    rng = np.random.default_rng(np.random.SeedSequence([seed, scene_id, 5]))
    return float(rng.uniform(lo, hi))


def scene_outputs(model: TwoStreamModel, scenes: Sequence, chunk: int = 256):
    """Matched-pair heatmaps, scores and summed cluster logits for each scene."""
    heat, logits = [], []
    for i in range(0, len(scenes), chunk):
        part = scenes[i:i + chunk]
        fp = model.forward(np.stack([s.image for s in part]), np.stack([s.audio for s in part]))
        heat.append(model.heatmaps(fp))
        logits.append((fp.logits_v, fp.logits_a))
    hm = np.concatenate(heat) if heat else np.zeros((0, 1, 1))
    lv = np.concatenate([l[0] for l in logits]) if logits else np.zeros((0, 1))
    la = np.concatenate([l[1] for l in logits]) if logits else np.zeros((0, 1))
    return hm, lv, la


def extract_annotations(
    scenes: Sequence,
    model: TwoStreamModel,
    beta_range: Sequence[float] = (0.7, 0.9),
    min_confidence: float = 0.0,
    multi: bool = False,
    seed: int = 0,
) -> list[PseudoAnnotation]:
    """One box per scene from its own audio-visual heatmap (all components if ``multi``)."""
    if not scenes:
        return []
    H, W = scenes[0].image.shape[:2]
    hm, lv, la = scene_outputs(model, scenes)
    out = []
    for scene, h, gv, ga in zip(scenes, hm, lv, la):
        conf = float(h.max())
        if conf < min_confidence:
            continue
        beta = beta_for_scene(beta_range, seed, scene.scene_id)
        label = class_label(gv, ga)
        mask = h >= threshold(h, beta)
        comps = connected_components(mask) if multi else [largest_component(mask)]
        for comp in comps:
            box = component_box(comp, (H, W))
            if box is not None:
                out.append(PseudoAnnotation(scene.scene_id, box, label, conf, beta))
    return out


def write_annotations(annotations: Sequence[PseudoAnnotation], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(a.to_json()) + "\n" for a in annotations))
    return path


def read_annotations(path: str | Path) -> list[PseudoAnnotation]:
    lines = Path(path).read_text().splitlines()
    return [PseudoAnnotation.from_json(json.loads(l)) for l in lines if l.strip()]
