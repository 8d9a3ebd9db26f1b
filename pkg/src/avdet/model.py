"""Two-stream audio-visual network.

Shared backbones (visual patch encoder, audio encoder) feed two kinds of
heads per modality: a localization head producing unit-norm embeddings and
a classifier head producing cluster logits. A single learnable temperature
scales the audio-visual cosine heatmap.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .numerics import (
    MLP,
    Parameter,
    ShapeMismatch,
    Tensor,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    patch: int = Field(4, gt=0)
    channels: int = 3
    backbone_dim: int = 32
    hidden: int = 64
    embed_dim: int = 32
    audio_dim: int = 16
    n_clusters: int = Field(4, ge=1)
    inv_temperature_init: float = Field(10.0, gt=0)


def patchify(images: Tensor, s: int) -> Tensor:
    """(B, H, W, C) -> (B, H/s, W/s, s*s*C) non-overlapping patches."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    B, H, W, C = images.shape
    if H % s or W % s:
        raise ShapeMismatch(f"image {H}x{W} not divisible by patch size {s}")
    x = images.reshape(B, H // s, s, W // s, s, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H // s, W // s, s * s * C)


def localize(grid_embeddings: Tensor, audio_embedding: Tensor, rho: float) -> Tensor:
    """Heatmap of cosine similarities divided by the temperature."""
    return np.asarray(grid_embeddings) @ np.asarray(audio_embedding) / rho


def score(heatmap: Tensor) -> float:
    h = np.asarray(heatmap)
    if h.size == 0:
        raise ValueError("empty heatmap")
    return float(np.max(h))


def score_backward(heatmap: Tensor, grad_score: float) -> Tensor:
    """Route the gradient of the max to the first maximal cell (row-major)."""
    g = np.zeros_like(np.asarray(heatmap, dtype=np.float64))
    g.flat[int(np.argmax(heatmap))] = grad_score
    return g


@dataclass
class ForwardPass:
    grid_shape: tuple[int, int]
    patches: Tensor
    vb_cache: tuple
    grid: Tensor          # (B, U, C_b) backbone features per cell
    pooled: Tensor        # (B, C_b)
    lv_cache: tuple
    ev: Tensor            # (B, U, E) unit visual embeddings
    ev_norm: Tensor
    cv_cache: tuple
    logits_v: Tensor      # (B, K)
    ab_cache: tuple
    qa: Tensor            # (B, C_b)
    la_cache: tuple
    ea: Tensor            # (B, E) unit audio embeddings
    ea_norm: Tensor
    ca_cache: tuple
    logits_a: Tensor      # (B, K)


class TwoStreamModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        self.visual_backbone = MLP(rng, patch_dim, cfg.backbone_dim, cfg.backbone_dim, relu_out=True)
        self.audio_backbone = MLP(rng, cfg.audio_dim, cfg.backbone_dim, cfg.backbone_dim, relu_out=True)
        self.loc_v = MLP(rng, cfg.backbone_dim, cfg.hidden, cfg.embed_dim)
        self.loc_a = MLP(rng, cfg.backbone_dim, cfg.hidden, cfg.embed_dim)
        self.cls_v = MLP(rng, cfg.backbone_dim, cfg.hidden, cfg.n_clusters)
        self.cls_a = MLP(rng, cfg.backbone_dim, cfg.hidden, cfg.n_clusters)
        self.log_rho = Parameter(np.array([-math.log(cfg.inv_temperature_init)]))

    def modules(self) -> dict[str, MLP]:
        return {
            "visual_backbone": self.visual_backbone,
            "audio_backbone": self.audio_backbone,
            "loc_v": self.loc_v,
            "loc_a": self.loc_a,
            "cls_v": self.cls_v,
            "cls_a": self.cls_a,
        }

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for mname, m in self.modules().items():
            for pname, p in m.parameters().items():
                out[f"{mname}.{pname}"] = p
        out["log_rho"] = self.log_rho
        return out

    @property
    def rho(self) -> float:
        return float(np.exp(self.log_rho.value[0]))

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    # -- forward ----------------------------------------------------------

    def forward_visual(self, image: Tensor) -> tuple[Tensor, Tensor]:
        """Backbone grid features ``(h, w, C_b)`` and their spatial mean."""
        grid, pooled, _ = self._visual(np.asarray(image)[None])
        h, w = patchify(np.asarray(image)[None], self.config.patch).shape[1:3]
        return grid[0].reshape(h, w, -1), pooled[0]

    def _visual(self, images: Tensor):
        patches = patchify(images, self.config.patch)
        B, h, w, P = patches.shape
        flat = patches.reshape(B, h * w, P)
        grid, cache = self.visual_backbone.forward(flat)
        return grid, grid.mean(axis=1), (patches, cache)

    def forward(self, images: Tensor, audio: Tensor) -> ForwardPass:
        grid, pooled, (patches, vb_cache) = self._visual(images)
        ev_raw, lv_cache = self.loc_v.forward(grid)
        ev, ev_norm = l2_normalize_rows(ev_raw)
        logits_v, cv_cache = self.cls_v.forward(pooled)
        qa, ab_cache = self.audio_backbone.forward(np.asarray(audio, dtype=np.float64))
        ea_raw, la_cache = self.loc_a.forward(qa)
        ea, ea_norm = l2_normalize_rows(ea_raw)
        logits_a, ca_cache = self.cls_a.forward(qa)
        return ForwardPass(patches.shape[1:3], patches, vb_cache, grid, pooled, lv_cache, ev,
                           ev_norm, cv_cache, logits_v, ab_cache, qa, la_cache, ea, ea_norm,
                           ca_cache, logits_a)

    def heatmaps(self, fp: ForwardPass) -> Tensor:
        """Matched-pair heatmaps ``(B, h, w)`` (item i's frame vs item i's audio)."""
        h = np.einsum("bue,be->bu", fp.ev, fp.ea) / self.rho
        return h.reshape(-1, *fp.grid_shape)

    # -- backward ---------------------------------------------------------

    def backward(self, fp: ForwardPass, d_ev=None, d_ea=None, d_logits_v=None, d_logits_a=None):
        d_grid = np.zeros_like(fp.grid)
        if d_ev is not None:
            d_raw = l2_normalize_rows_backward(fp.ev, fp.ev_norm, d_ev)
            d_grid += self.loc_v.backward(fp.lv_cache, d_raw)
        if d_logits_v is not None:
            d_pooled = self.cls_v.backward(fp.cv_cache, d_logits_v)
            d_grid += d_pooled[:, None, :] / fp.grid.shape[1]
        if d_ev is not None or d_logits_v is not None:
            self.visual_backbone.backward(fp.vb_cache, d_grid)

        d_qa = np.zeros_like(fp.qa)
        if d_ea is not None:
            d_raw = l2_normalize_rows_backward(fp.ea, fp.ea_norm, d_ea)
            d_qa += self.loc_a.backward(fp.la_cache, d_raw)
        if d_logits_a is not None:
            d_qa += self.cls_a.backward(fp.ca_cache, d_logits_a)
        if d_ea is not None or d_logits_a is not None:
            self.audio_backbone.backward(fp.ab_cache, d_qa)


# ---------------------------------------------------------------------------
# checkpoints
#
# Binary layout (all integers little-endian):
#   b"AVDT" | u32 version | u32 n_entries
#   per entry: u16 name_len | name (utf-8) | u8 ndim | u32 dims[ndim] | f64 values (row-major)
# The hyperparameter manifest lives next to it as ``<file>.json``.

MAGIC = b"AVDT"
VERSION = 1


def save_params(path: str | Path, params: dict[str, Parameter], manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", p.value.ndim) + struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    manifest = json.loads(Path(str(path) + ".json").read_text())
    return out, manifest


def assign_params(params: dict[str, Parameter], values: dict[str, np.ndarray]):
    missing = set(params) ^ set(values)
    if missing:
        raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
    for name, p in params.items():
        if values[name].shape != p.value.shape:
            raise ShapeMismatch(f"{name}: {values[name].shape} vs {p.value.shape}")
        p.value[...] = values[name]


def save_model(model: TwoStreamModel, path: str | Path, extra: dict | None = None) -> Path:
    manifest = {"kind": "two_stream", "model": model.config.model_dump(), **(extra or {})}
    return save_params(path, model.parameters(), manifest)


def load_model(path: str | Path) -> tuple[TwoStreamModel, dict]:
    values, manifest = load_params(path)
    model = TwoStreamModel(ModelConfig(**manifest["model"]))
    assign_params(model.parameters(), values)
    return model, manifest
