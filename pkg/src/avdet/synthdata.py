"""Synthetic audio-visual scenes with ground-truth boxes.

Each class owns a colour, a shape and an audio prototype. A scene shows one
sounding object and, with probability ``p_multi``, a few silent objects of
other classes. The audio is the sounding class's prototype plus noise.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .boxes import Box, iou
from .numerics import l2_normalize

log = logging.getLogger(__name__)

SHAPES = ("rectangle", "disk", "triangle")
BACKGROUND = np.array([0.15, 0.15, 0.15])
MAX_REJECTION_ROUNDS = 10_000
MAX_PAIR_IOU = 0.3
MIN_VISIBLE = 0.8
MAX_AUDIO_COSINE = 0.5
MIN_COLOR_DISTANCE = 0.3


class PrototypeRejectionExhausted(RuntimeError):
    pass


class DatasetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    K_true: int = Field(4, ge=1)
    n_train: int = Field(4000, ge=0)
    n_test: int = Field(500, ge=0)
    H: int = Field(32, gt=0)
    W: int = Field(32, gt=0)
    D_a: int = Field(16, gt=0)
    sigma_a: float = Field(0.1, ge=0)
    sigma_v: float = Field(0.02, ge=0)
    p_multi: float = Field(0.6, ge=0, le=1)
    max_objects: int = Field(3, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _fits(self):
        if min(self.H, self.W) < 16:
            raise ValueError("images must be at least 16x16 to hold objects")
        return self


@dataclass
class ClassPrototype:
    class_id: int
    color: np.ndarray
    shape: str
    audio: np.ndarray

    def to_json(self) -> dict:
        return {
            "class_id": self.class_id,
            "color": self.color.tolist(),
            "shape": self.shape,
            "audio": self.audio.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ClassPrototype":
        return cls(int(d["class_id"]), np.asarray(d["color"], dtype=np.float64), d["shape"],
                   np.asarray(d["audio"], dtype=np.float64))


@dataclass
class SceneObject:
    class_id: int
    box: Box
    sounding: bool


@dataclass
class Scene:
    scene_id: int
    image: np.ndarray
    objects: list[SceneObject]
    audio: np.ndarray
    split: str = "train"

    @property
    def sounding(self) -> SceneObject:
        return next(o for o in self.objects if o.sounding)


@dataclass
class Dataset:
    config: DatasetConfig
    prototypes: list[ClassPrototype]
    train: list[Scene]
    test: list[Scene]
    checks: dict = field(default_factory=dict)


def scene_rng(seed: int, scene_id: int) -> np.random.Generator:
    """Counter-based stream keyed by ``(seed, scene_id)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, scene_id])))


def object_size_range(config: DatasetConfig) -> tuple[int, int]:
    side = min(config.H, config.W)
    return side // 4, (7 * side) // 16


def make_prototypes(config: DatasetConfig, rng: np.random.Generator) -> list[ClassPrototype]:
    if config.K_true < 2:
        raise ValueError("K_true must be at least 2")
    rounds = 0
    audio: list[np.ndarray] = []
    while len(audio) < config.K_true:
        rounds += 1
        if rounds > MAX_REJECTION_ROUNDS:
            raise PrototypeRejectionExhausted(
                f"could not place {config.K_true} audio prototypes in {config.D_a} dims")
        cand = l2_normalize(rng.standard_normal(config.D_a))
        if all(float(cand @ a) <= MAX_AUDIO_COSINE for a in audio):
            audio.append(cand)

    rounds = 0
    colors: list[np.ndarray] = []
    while len(colors) < config.K_true:
        rounds += 1
        if rounds > MAX_REJECTION_ROUNDS:
            raise PrototypeRejectionExhausted(f"could not place {config.K_true} distinct colours")
        cand = rng.uniform(0.0, 1.0, size=3)
        if np.max(np.abs(cand - BACKGROUND)) < MIN_COLOR_DISTANCE:
            continue
        if all(np.max(np.abs(cand - c)) >= MIN_COLOR_DISTANCE for c in colors):
            colors.append(cand)

    return [
        ClassPrototype(k, colors[k], SHAPES[k % len(SHAPES)], audio[k])
        for k in range(config.K_true)
    ]


def shape_mask(shape: str, box: Box, H: int, W: int) -> np.ndarray:
    """Pixels whose centres fall inside the shape inscribed in ``box``."""
    ys = np.arange(H)[:, None] + 0.5
    xs = np.arange(W)[None, :] + 0.5
    inside = (xs >= box.x1) & (xs <= box.x2) & (ys >= box.y1) & (ys <= box.y2)
    if shape == "rectangle":
        return inside
    cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
    hw, hh = (box.x2 - box.x1) / 2, (box.y2 - box.y1) / 2
    if shape == "disk":
        return ((xs - cx) / hw) ** 2 + ((ys - cy) / hh) ** 2 <= 1.0
    if shape == "triangle":
        return inside & (np.abs(xs - cx) <= hw * (ys - box.y1) / (2 * hh))
    raise ValueError(f"unknown shape {shape!r}")


def _random_box(rng, config: DatasetConfig) -> Box:
    lo, hi = object_size_range(config)
    w, h = rng.integers(lo, hi + 1, size=2)
    x1 = rng.integers(0, config.W - w + 1)
    y1 = rng.integers(0, config.H - h + 1)
    return Box(float(x1), float(y1), float(x1 + w), float(y1 + h))


def _visible_ok(masks: list[np.ndarray], order: list[int]) -> bool:
    owner = np.full(masks[0].shape, -1)
    for i in order:
        owner[masks[i]] = i
    return all(np.sum(owner == i) >= MIN_VISIBLE * np.sum(m) for i, m in enumerate(masks))


def generate_scene(prototypes: list[ClassPrototype], config: DatasetConfig,
                   rng: np.random.Generator, scene_id: int = 0, split: str = "train") -> Scene:
    if not prototypes:
        raise ValueError("no prototypes")
    K = len(prototypes)
    H, W = config.H, config.W
    sound_cls = int(rng.integers(K))
    n_extra = 0
    if config.max_objects > 1 and rng.random() < config.p_multi:
        n_extra = int(rng.integers(1, config.max_objects))
    n_extra = min(n_extra, K - 1)
    others = [k for k in range(K) if k != sound_cls]
    extra_cls = [int(k) for k in rng.permutation(others)[:n_extra]]

    classes = [sound_cls] + extra_cls
    boxes = [_random_box(rng, config)]
    # Retry placement of the silent objects; drop them one by one if they don't fit.
    while len(classes) > 1:
        placed = None
        for _ in range(200):
            cand = [boxes[0]]
            for _k in classes[1:]:
                for _try in range(50):
                    b = _random_box(rng, config)
                    if all(iou(b, c) <= MAX_PAIR_IOU for c in cand):
                        cand.append(b)
                        break
                else:
                    break
            if len(cand) != len(classes):
                continue
            order = [int(i) for i in rng.permutation(len(classes))]
            masks = [shape_mask(prototypes[k].shape, b, H, W) for k, b in zip(classes, cand)]
            if _visible_ok(masks, order):
                placed = (cand, order)
                break
        if placed is not None:
            boxes, order = placed
            break
        classes = classes[:-1]
    else:
        order = [0]

    image = np.broadcast_to(BACKGROUND, (H, W, 3)).copy()
    for i in order:
        mask = shape_mask(prototypes[classes[i]].shape, boxes[i], H, W)
        image[mask] = prototypes[classes[i]].color
    image += config.sigma_v * rng.standard_normal(image.shape)
    np.clip(image, 0.0, 1.0, out=image)

    audio = prototypes[sound_cls].audio + config.sigma_a * rng.standard_normal(config.D_a)
    objects = [SceneObject(k, b, i == 0) for i, (k, b) in enumerate(zip(classes, boxes))]
    return Scene(scene_id, image, objects, l2_normalize(audio), split)


def dataset_checks(ds: Dataset) -> dict:
    K = ds.config.K_true
    counts = np.bincount([s.sounding.class_id for s in ds.train], minlength=K)
    n_obj = sum(len(s.objects) for s in ds.test)
    n_silent = sum(not o.sounding for s in ds.test for o in s.objects)
    return {
        "train_sounding_counts": counts.tolist(),
        "train_class_balance": float(np.max(np.abs(counts / max(len(ds.train), 1) * K - 1.0)))
        if ds.train else 0.0,
        "test_silent_fraction": n_silent / n_obj if n_obj else 0.0,
    }


def generate_dataset(config: DatasetConfig, workers: int = 1) -> Dataset:
    protos = make_prototypes(config, np.random.default_rng(np.random.SeedSequence([config.seed, 2**32])))

    def make(item):
        sid, split = item
        return generate_scene(protos, config, scene_rng(config.seed, sid), sid, split)

    items = [(i, "train") for i in range(config.n_train)]
    items += [(config.n_train + i, "test") for i in range(config.n_test)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scenes = list(pool.map(make, items))
    else:
        scenes = [make(it) for it in items]
    ds = Dataset(config, protos, scenes[: config.n_train], scenes[config.n_train:])
    ds.checks = dataset_checks(ds)
    log.info("generated %d train / %d test scenes: %s", config.n_train, config.n_test, ds.checks)
    return ds


# ---------------------------------------------------------------------------
# on-disk layout:
#   meta.json            config, prototypes, split ids, generation checks
#   scenes/{id}.json     objects, audio, split
#   scenes/{id}.raw      image, little-endian float64, row-major, (H, W, 3)

IMAGE_DTYPE = np.dtype("<f8")


def scene_to_json(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "split": scene.split,
        "objects": [
            {"class_id": o.class_id, "box": o.box.as_list(), "sounding": o.sounding}
            for o in scene.objects
        ],
        "audio": scene.audio.tolist(),
    }


def write_dataset(ds: Dataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    meta = {
        "config": ds.config.model_dump(),
        "prototypes": [p.to_json() for p in ds.prototypes],
        "train": [s.scene_id for s in ds.train],
        "test": [s.scene_id for s in ds.test],
        "checks": ds.checks,
    }
    for s in ds.train + ds.test:
        (root / "scenes" / f"{s.scene_id}.json").write_text(json.dumps(scene_to_json(s)))
        (root / "scenes" / f"{s.scene_id}.raw").write_bytes(
            np.ascontiguousarray(s.image, dtype=IMAGE_DTYPE).tobytes())
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    return root


def read_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    config = DatasetConfig(**meta["config"])
    protos = [ClassPrototype.from_json(p) for p in meta["prototypes"]]

    def load(sid: int) -> Scene:
        d = json.loads((root / "scenes" / f"{sid}.json").read_text())
        raw = (root / "scenes" / f"{sid}.raw").read_bytes()
        image = np.frombuffer(raw, dtype=IMAGE_DTYPE).reshape(config.H, config.W, 3).astype(np.float64)
        objects = [SceneObject(int(o["class_id"]), Box.from_seq(o["box"]), bool(o["sounding"]))
                   for o in d["objects"]]
        return Scene(int(d["scene_id"]), image, objects, np.asarray(d["audio"], dtype=np.float64),
                     d["split"])

    return Dataset(config, protos, [load(i) for i in meta["train"]], [load(i) for i in meta["test"]],
                   meta.get("checks", {}))
