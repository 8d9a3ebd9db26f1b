"""Stage 3: a small single-scale two-stage detector trained on pseudo-annotations.

Anchors sit on the backbone grid. An RPN scores every anchor for objectness
and regresses a proposal box from it; the top proposals are then classified
over ``K + 1`` classes (the last one is background) and refined. Region
features are overlap-weighted averages of backbone cell features over a
``pool_bins x pool_bins`` grid of bins covering the region. Boxes are
regressed as absolute corner coordinates normalized by the image size. No audio is used anywhere here.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .boxes import Box, iou, iou_matrix
from .model import assign_params, load_params, patchify, save_params
from .numerics import (
    MLP,
    SGD,
    Parameter,
    binary_cross_entropy_with_logits,
    log_softmax,
    logsumexp,
)

log = logging.getLogger(__name__)

class EmptyTrainingSet(ValueError):
    pass


class MatchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau_pos: float = Field(0.7, ge=0, le=1)
    tau_bkg: float = Field(0.3, ge=0, le=1)

    @model_validator(mode="after")
    def _ordered(self):
        if self.tau_bkg > self.tau_pos:
            raise ValueError("tau_bkg must not exceed tau_pos")
        return self


class DetectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    K: int = Field(4, ge=1)
    epochs: int = Field(30, ge=0)
    warmup_frac: float = Field(0.2, ge=0, le=1)
    lr: float = Field(0.005, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch: int = Field(32, ge=1)
    clip_norm: float = Field(10.0, gt=0)
    nms: float = Field(0.5, ge=0, le=1)
    score_thresh: float = Field(0.25, ge=0, le=1)
    n_proposals: int = Field(64, ge=1)
    base_size: float = Field(8.0, gt=0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 1.5)
    tau_pos: float = Field(0.7, ge=0, le=1)
    tau_bkg: float = Field(0.3, ge=0, le=1)
    patch: int = 4
    backbone_dim: int = 32
    hidden: int = 64
    pool_bins: int = Field(3, ge=1)

    @property
    def match(self) -> MatchConfig:
        return MatchConfig(tau_pos=self.tau_pos, tau_bkg=self.tau_bkg)


@dataclass(frozen=True)
class Anchor:
    cx: float
    cy: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError("anchor extents must be positive")

    @property
    def box(self) -> Box:
        return Box(self.cx - self.width / 2, self.cy - self.height / 2,
                   self.cx + self.width / 2, self.cy + self.height / 2)


@dataclass
class Detection:
    box: Box
    label: int
    score: float


def generate_anchors(grid_dims: tuple[int, int], base_size: float, aspect_ratios=(0.5, 1.0, 1.5),
                     stride: tuple[float, float] | float | None = None) -> list[Anchor]:
    """Anchors centred on grid cells; ratio r gives width base*sqrt(r), height base/sqrt(r)."""
    gh, gw = grid_dims
    if gh <= 0 or gw <= 0:
        raise ValueError("grid dims must be positive")
    if stride is None:
        stride = base_size / 2
    sy, sx = (stride, stride) if np.isscalar(stride) else stride
    out = []
    for i in range(gh):
        for j in range(gw):
            for r in aspect_ratios:
                out.append(Anchor((j + 0.5) * sx, (i + 0.5) * sy, base_size * math.sqrt(r),
                                  base_size / math.sqrt(r)))
    return out


def anchor_array(anchors: Sequence[Anchor]) -> np.ndarray:
    return np.array([a.box.as_tuple() for a in anchors], dtype=np.float64)


# ---------------------------------------------------------------------------
# losses


def _l1(pred, target) -> tuple[float, np.ndarray]:
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.abs(diff).sum()), np.sign(diff)


def match_roles(boxes: np.ndarray, target: Box, match: MatchConfig):
    """Best match index, positive mask (best + IoU >= tau_pos) and negative mask (IoU < tau_bkg)."""
    ious = iou_matrix(boxes, np.array([target.as_tuple()]))[:, 0]
    best = int(np.argmax(ious))
    pos = ious >= match.tau_pos
    pos[best] = True
    neg = ious < match.tau_bkg
    neg[best] = False
    return best, pos, neg, ious


def assign_targets(boxes: np.ndarray, targets: np.ndarray, match: MatchConfig) -> np.ndarray:
    """Target index per box for several targets; -1 ignored, -2 background.

    Each target claims its best box; boxes with IoU >= tau_pos take their
    highest-IoU target; boxes below tau_bkg against every target are
    background. With one target this reproduces ``match_roles``.
    """
    ious = iou_matrix(np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                      np.asarray(targets, dtype=np.float64).reshape(-1, 4))
    top = ious.max(axis=1)
    out = np.full(len(ious), -1, dtype=np.intp)
    out[top < match.tau_bkg] = -2
    strong = top >= match.tau_pos
    out[strong] = np.argmax(ious[strong], axis=1)
    for k in range(ious.shape[1]):
        out[int(np.argmax(ious[:, k]))] = k
    return out


def _as_targets(t_star) -> np.ndarray:
    if isinstance(t_star, Box):
        return np.array([t_star.as_tuple()])
    return np.array([b.as_tuple() for b in t_star], dtype=np.float64).reshape(-1, 4)


def rpn_losses(anchors, objectness, proposals, t_star, match: MatchConfig | None = None,
               return_grads: bool = False):
    """RPN loss for one image.

    ``anchors`` and ``proposals`` are (A, 4) arrays in the same units as
    ``t_star`` (a Box, or a sequence of Boxes for several objects);
    ``objectness`` holds logits. Positives (each target's best anchor plus
    any with IoU >= tau_pos) get an L1 corner loss on their proposal and
    objectness target 1; anchors with IoU < tau_bkg get objectness target 0.
    """
    match = match or MatchConfig()
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    t = _as_targets(t_star)
    role = assign_targets(anchors, t, match)
    pos, neg = role >= 0, role == -2

    g_obj = np.zeros_like(objectness)
    g_prop = np.zeros_like(proposals)
    reg, sgn = _l1(proposals[pos], t[role[pos]])
    g_prop[pos] = sgn
    bce_pos, gp = binary_cross_entropy_with_logits(objectness[pos], 1.0)
    bce_neg, gn = binary_cross_entropy_with_logits(objectness[neg], 0.0)
    g_obj[pos] = gp
    g_obj[neg] = gn
    loss = reg + float(bce_pos.sum()) + float(bce_neg.sum())
    return (loss, g_obj, g_prop) if return_grads else loss


def _ce_rows(logits: np.ndarray, targets: np.ndarray, agnostic: bool):
    """Per-row cross-entropy; with ``agnostic`` all foreground classes pool into one."""
    logp = log_softmax(logits, axis=-1)
    p = np.exp(logp)
    n = len(targets)
    bkg = logits.shape[-1] - 1
    if not agnostic:
        rows = np.arange(n)
        loss = -logp[rows, targets]
        grad = p.copy()
        grad[rows, targets] -= 1.0
        return loss, grad
    is_fg = targets != bkg
    lse_all = logsumexp(logits, axis=-1)
    lse_fg = logsumexp(logits[:, :bkg], axis=-1)
    loss = np.where(is_fg, lse_all - lse_fg, lse_all - logits[:, bkg])
    grad = p.copy()
    fg_post = np.exp(logits[:, :bkg] - lse_fg[:, None])
    grad[is_fg, :bkg] -= fg_post[is_fg]
    grad[~is_fg, bkg] -= 1.0
    return loss, grad


def det_losses(proposals, class_logits, refined_boxes, t_star, y_star,
               match: MatchConfig | None = None, agnostic: bool = False, return_grads: bool = False):
    """Detection-head loss for one image.

    The best-matching proposal (and any with IoU >= tau_pos) must predict
    ``y_star`` and regress to ``t_star``; proposals with IoU < tau_bkg,
    never including the best one, must predict background (last logit).
    ``t_star`` / ``y_star`` may also be parallel sequences for several objects.
    """
    match = match or MatchConfig()
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    logits = np.asarray(class_logits, dtype=np.float64)
    refined = np.asarray(refined_boxes, dtype=np.float64).reshape(-1, 4)
    bkg = logits.shape[-1] - 1
    t = _as_targets(t_star)
    y = np.atleast_1d(np.asarray(y_star, dtype=np.intp))
    if len(y) != len(t):
        raise ValueError("one label per target box is required")
    if np.any((y < 0) | (y >= bkg)):
        raise ValueError(f"labels {y.tolist()} outside [0, {bkg})")
    role = assign_targets(proposals, t, match)
    pos, neg = role >= 0, role == -2

    g_logits = np.zeros_like(logits)
    g_ref = np.zeros_like(refined)
    reg, sgn = _l1(refined[pos], t[role[pos]])
    g_ref[pos] = sgn
    use = pos | neg
    targets = np.where(pos, y[np.maximum(role, 0)], bkg)[use]
    ce, g = _ce_rows(logits[use], targets, agnostic)
    g_logits[use] = g
    loss = reg + float(ce.sum())
    return (loss, g_logits, g_ref) if return_grads else loss


# ---------------------------------------------------------------------------
# region pooling


def bin_weights(boxes: np.ndarray, grid: tuple[int, int], cell: tuple[float, float],
                bins: int = 3) -> np.ndarray:
    """Overlap-area averaging weights of each box bin over grid cells.

    Each box is split into ``bins x bins`` equal bins (row-major). boxes (..., 4) in pixels ->
    weights (..., bins * bins, gh * gw); rows sum to 1 unless the bin misses
    the image entirely.
    """
    gh, gw = grid
    sy, sx = cell
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy = (b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2
    hw, hh = (b[..., 2] - b[..., 0]) / 2, (b[..., 3] - b[..., 1]) / 2
    edges = np.linspace(-1.0, 1.0, bins + 1)
    xe = cx[..., None] + hw[..., None] * edges                 # (..., bins + 1)
    ye = cy[..., None] + hh[..., None] * edges
    cols = np.arange(gw) * sx
    rows = np.arange(gh) * sy
    ox = np.clip(np.minimum(xe[..., 1:, None], cols + sx) - np.maximum(xe[..., :-1, None], cols), 0, None)
    oy = np.clip(np.minimum(ye[..., 1:, None], rows + sy) - np.maximum(ye[..., :-1, None], rows), 0, None)
    # (..., by, bx, gh, gw)
    w = oy[..., :, None, :, None] * ox[..., None, :, None, :]
    w = w.reshape(*b.shape[:-1], bins * bins, gh * gw)
    total = w.sum(axis=-1, keepdims=True)
    return np.divide(w, total, out=np.zeros_like(w), where=total > 0)


# ---------------------------------------------------------------------------
# model


@dataclass
class DetForward:
    patches_cache: tuple
    feats: np.ndarray           # (B, U, C)
    anchor_feats: np.ndarray    # (B, A, R*C)
    rpn_cache: tuple
    objectness: np.ndarray      # (B, A)
    proposals: np.ndarray       # (B, A, 4) normalized
    top: np.ndarray             # (B, P) anchor indices
    prop_boxes: np.ndarray      # (B, P, 4) normalized, clipped, fixed
    prop_weights: np.ndarray    # (B, P, R, U)
    det_cache: tuple
    class_logits: np.ndarray    # (B, P, K+1)
    refined: np.ndarray         # (B, P, 4) normalized


class DetectorModel:
    def __init__(self, config: DetectorConfig | None = None, image_dims=(32, 32), seed: int = 0):
        self.config = cfg = config or DetectorConfig()
        self.H, self.W = image_dims
        if self.H % cfg.patch or self.W % cfg.patch:
            raise ValueError("image dims must be divisible by the patch size")
        self.grid = (self.H // cfg.patch, self.W // cfg.patch)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
        C = cfg.backbone_dim
        self.backbone = MLP(rng, cfg.patch * cfg.patch * 3, C, C, relu_out=True)
        n_in = cfg.pool_bins ** 2 * C
        self.rpn_head = MLP(rng, n_in, cfg.hidden, 5, out_gain=0.1)
        self.det_head = MLP(rng, n_in, cfg.hidden, cfg.K + 1 + 4, out_gain=0.1)
        self.anchors = generate_anchors(self.grid, cfg.base_size, cfg.aspect_ratios,
                                        stride=(cfg.patch, cfg.patch))
        self.anchor_boxes = anchor_array(self.anchors)                      # pixels
        self.scale = np.array([self.W, self.H, self.W, self.H], dtype=np.float64)
        self.anchor_norm = self.anchor_boxes / self.scale
        self.anchor_weights = self._weights(self.anchor_boxes)                # (A, bins^2, U)

    def modules(self) -> dict[str, MLP]:
        return {"backbone": self.backbone, "rpn_head": self.rpn_head, "det_head": self.det_head}

    def parameters(self) -> dict[str, Parameter]:
        return {f"{m}.{k}": p for m, mod in self.modules().items() for k, p in mod.parameters().items()}

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def _weights(self, boxes_px):
        cfg = self.config
        return bin_weights(boxes_px, self.grid, (cfg.patch, cfg.patch), cfg.pool_bins)

    def _pool(self, weights, feats):
        # weights (B, N, R, U) or shared (N, R, U); feats (B, U, C) -> (B, N, R*C)
        N, R, U = weights.shape[-3:]
        pooled = np.matmul(weights.reshape(*weights.shape[:-3], N * R, U), feats)
        return pooled.reshape(feats.shape[0], N, -1)

    def _unpool(self, weights, grad_pooled, C):
        N, R, U = weights.shape[-3:]
        w = weights.reshape(*weights.shape[:-3], N * R, U)
        g = grad_pooled.reshape(grad_pooled.shape[0], N * R, C)
        return np.matmul(np.swapaxes(w, -1, -2), g)

    def forward(self, images, n_proposals: int | None = None, proposals=None) -> DetForward:
        """Full pass. ``proposals`` (B, P, 4), normalized, replaces the RPN's top-P selection.

        Proposal boxes are treated as constants by the detection branch, as
        in the usual two-stage recipe; fixing them makes that explicit.
        """
        cfg = self.config
        P = min(n_proposals or cfg.n_proposals, len(self.anchors))
        patches = patchify(images, cfg.patch)
        B = patches.shape[0]
        flat = patches.reshape(B, -1, patches.shape[-1])
        feats, bb_cache = self.backbone.forward(flat)

        anchor_feats = self._pool(self.anchor_weights, feats)
        rpn_out, rpn_cache = self.rpn_head.forward(anchor_feats)
        objectness = rpn_out[..., 0]
        rpn_boxes = self.anchor_norm[None] + rpn_out[..., 1:]

        top = np.argsort(-objectness, axis=1, kind="stable")[:, :P]
        if proposals is None:
            prop = self._sanitize(np.take_along_axis(rpn_boxes, top[..., None], axis=1))
        else:
            prop = self._sanitize(np.asarray(proposals, dtype=np.float64).reshape(B, -1, 4))
        weights = self._weights(prop * self.scale)
        det_in = self._pool(weights, feats)
        det_out, det_cache = self.det_head.forward(det_in)
        logits = det_out[..., : cfg.K + 1]
        refined = prop + det_out[..., cfg.K + 1:]
        return DetForward((flat, bb_cache), feats, anchor_feats, rpn_cache, objectness, rpn_boxes,
                          top, prop, weights, det_cache, logits, refined)

    def _sanitize(self, boxes_norm: np.ndarray) -> np.ndarray:
        """Clip to the image and enforce at least one pixel of extent."""
        b = np.clip(boxes_norm, 0.0, 1.0)
        min_w, min_h = 1.0 / self.W, 1.0 / self.H
        x1 = np.minimum(b[..., 0], b[..., 2])
        x2 = np.maximum(b[..., 0], b[..., 2])
        y1 = np.minimum(b[..., 1], b[..., 3])
        y2 = np.maximum(b[..., 1], b[..., 3])
        x2 = np.maximum(x2, x1 + min_w)
        x1 = np.minimum(x1, x2 - min_w)
        y2 = np.maximum(y2, y1 + min_h)
        y1 = np.minimum(y1, y2 - min_h)
        b = np.stack([x1, y1, x2, y2], axis=-1)
        return np.clip(b, 0.0, 1.0)

    def backward(self, fw: DetForward, g_objectness, g_proposals, g_logits, g_refined):
        C = self.config.backbone_dim
        g_feats = np.zeros_like(fw.feats)
        if g_logits is not None or g_refined is not None:
            g_det = np.concatenate([
                g_logits if g_logits is not None else np.zeros_like(fw.class_logits),
                g_refined if g_refined is not None else np.zeros_like(fw.refined),
            ], axis=-1)
            g_in = self.det_head.backward(fw.det_cache, g_det)
            g_feats += self._unpool(fw.prop_weights, g_in, C)
        if g_objectness is not None or g_proposals is not None:
            g_rpn = np.concatenate([
                (g_objectness if g_objectness is not None else np.zeros_like(fw.objectness))[..., None],
                g_proposals if g_proposals is not None else np.zeros_like(fw.proposals),
            ], axis=-1)
            g_in = self.rpn_head.backward(fw.rpn_cache, g_rpn)
            g_feats += self._unpool(self.anchor_weights, g_in, C)
        flat, bb_cache = fw.patches_cache
        self.backbone.backward(bb_cache, g_feats)


def detector_loss_backward(model: DetectorModel, images, targets: Sequence, agnostic: bool = False,
                           proposals=None) -> float:
    """Mean over images of ``L_rpn + L_det``; gradients accumulate into the model.

    ``targets[b]`` is a ``(Box, label)`` pair or a list of them for image b.
    Boxes are in pixels; losses are computed on corners normalized by the
    image size.
    """
    fw = model.forward(images, proposals=proposals)
    B = len(targets)
    match = model.config.match
    g_obj = np.zeros_like(fw.objectness)
    g_prop = np.zeros_like(fw.proposals)
    g_log = np.zeros_like(fw.class_logits)
    g_ref = np.zeros_like(fw.refined)
    total = 0.0
    for b, objs in enumerate(targets):
        if isinstance(objs, tuple) and isinstance(objs[0], Box):
            objs = [objs]
        t = [Box(*(np.array(box.as_tuple()) / model.scale)) for box, _ in objs]
        y = [label for _, label in objs]
        l_rpn, go, gp = rpn_losses(model.anchor_norm, fw.objectness[b], fw.proposals[b], t, match,
                                   return_grads=True)
        l_det, gl, gr = det_losses(fw.prop_boxes[b], fw.class_logits[b], fw.refined[b], t, y,
                                   match, agnostic=agnostic, return_grads=True)
        total += l_rpn + l_det
        g_obj[b], g_prop[b], g_log[b], g_ref[b] = go / B, gp / B, gl / B, gr / B
    model.backward(fw, g_obj, g_prop, g_log, g_ref)
    return total / B


def _clip_grad_norm(params, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def train_detector(annotations: Sequence, scenes: Sequence, config: DetectorConfig | None = None,
                   seed: int = 0, on_epoch=None) -> DetectorModel:
    """Class-agnostic warm-up for ``warmup_frac`` of the epochs, then class-aware training."""
    config = config or DetectorConfig()
    if not annotations:
        raise EmptyTrainingSet("no annotations to train on")
    by_id = {s.scene_id: s for s in scenes}
    missing = [a.scene_id for a in annotations if a.scene_id not in by_id]
    if missing:
        raise KeyError(f"annotations reference unknown scenes: {missing[:5]}")
    grouped: dict[int, list] = {}
    for a in annotations:
        grouped.setdefault(a.scene_id, []).append((a.box, a.label))
    images = np.stack([by_id[sid].image for sid in grouped])
    targets = list(grouped.values())
    model = DetectorModel(config, images.shape[1:3], seed)
    params = list(model.parameters().values())
    opt = SGD(params, config.lr, config.momentum)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    n_warm = int(round(config.warmup_frac * config.epochs))
    n = len(images)
    for epoch in range(config.epochs):
        agnostic = epoch < n_warm
        order = rng.permutation(n)
        total, n_batches = 0.0, 0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            opt.zero_grad()
            total += detector_loss_backward(model, images[idx], [targets[i] for i in idx], agnostic)
            _clip_grad_norm(params, config.clip_norm)
            opt.step()
            n_batches += 1
        rec = {"epoch": epoch, "phase": "agnostic" if agnostic else "full", "loss": total / n_batches}
        log.info("detector epoch %d: %s", epoch, rec)
        if on_epoch:
            on_epoch(rec)
    return model


# ---------------------------------------------------------------------------
# inference


def nms(detections: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy per-class suppression; order by score desc, then smaller area, then input order."""
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in [0, 1]")
    dets = list(detections)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box.area, i))
    kept: list[int] = []
    for i in order:
        if all(dets[j].label != dets[i].label or iou(dets[i].box, dets[j].box) < iou_thresh
               for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def _decode(model: DetectorModel, fw: DetForward, b: int, score_thresh: float, nms_thresh: float):
    K = model.config.K
    probs = np.exp(log_softmax(fw.class_logits[b], axis=-1))
    fg = probs[:, :K]
    labels = np.argmax(fg, axis=1)
    scores = fg[np.arange(len(labels)), labels]
    boxes = np.clip(fw.refined[b], 0.0, 1.0) * model.scale
    dets = []
    for box, lab, sc in zip(boxes, labels, scores):
        if sc < score_thresh or not (box[0] < box[2] and box[1] < box[3]):
            continue
        dets.append(Detection(Box(*box), int(lab), float(sc)))
    return nms(dets, nms_thresh)


def infer_batch(images, model: DetectorModel, score_thresh: float | None = None,
                nms_thresh: float | None = None, chunk: int = 128) -> list[list[Detection]]:
    st = model.config.score_thresh if score_thresh is None else score_thresh
    nt = model.config.nms if nms_thresh is None else nms_thresh
    images = np.asarray(images, dtype=np.float64)
    out = []
    for i in range(0, len(images), chunk):
        fw = model.forward(images[i:i + chunk])
        out.extend(_decode(model, fw, b, st, nt) for b in range(fw.feats.shape[0]))
    return out


def infer(image, model: DetectorModel, score_thresh: float | None = None,
          nms_thresh: float | None = None) -> list[Detection]:
    """Detections for a single image (vision only)."""
    return infer_batch(np.asarray(image)[None], model, score_thresh, nms_thresh)[0]


def save_detector(model: DetectorModel, path, extra: dict | None = None):
    manifest = {"kind": "detector", "detector": model.config.model_dump(mode="json"),
                "image_dims": [model.H, model.W], **(extra or {})}
    return save_params(path, model.parameters(), manifest)


def load_detector(path) -> tuple[DetectorModel, dict]:
    values, manifest = load_params(path)
    model = DetectorModel(DetectorConfig(**manifest["detector"]), tuple(manifest["image_dims"]))
    assign_params(model.parameters(), values)
    return model, manifest
