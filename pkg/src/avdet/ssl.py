"""Stage 1: contrastive localization plus shared-label clustering.

The network is trained by alternating between two steps:

* re-estimating hard cluster labels for the whole dataset with Sinkhorn-Knopp
  under a fixed column marginal (equipartition by default), and
* SGD on ``lam * loss_nc + (1 - lam) * loss_clust`` over shuffled batches.

Warm-up epochs use the contrastive term only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .model import ForwardPass, ModelConfig, TwoStreamModel
from .numerics import SGD, log_softmax, logsumexp, softmax_cross_entropy_batch

log = logging.getLogger(__name__)


class NonConvergence(RuntimeError):
    pass


class SSLConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    K: int = Field(4, ge=1)
    lam: float = Field(0.5, ge=0, le=1)
    epochs: int = Field(30, ge=0)
    warmup: int = Field(10, ge=0)
    relabel_period: int = Field(5, ge=1)
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch: int = Field(32, ge=1)
    sk_epsilon: float = Field(0.05, gt=0)
    # Confident classifiers on a slightly unbalanced dataset make the balanced
    # problem stiff at epsilon=0.05; the solve stops as soon as tol is met.
    sk_iters: int = Field(20_000, ge=1)
    sk_tol: float = Field(1e-3, gt=0)

    @model_validator(mode="after")
    def _warmup_fits(self):
        if self.warmup > self.epochs:
            raise ValueError("warmup exceeds total epochs")
        return self


# ---------------------------------------------------------------------------
# contrastive term


def pair_scores(ev: np.ndarray, ea: np.ndarray, inv_rho: float):
    """Scores ``S[i, j]`` of frame i against audio j and the argmax cell of each pair."""
    cos = np.einsum("iue,je->iju", ev, ea)
    idx = np.argmax(cos, axis=2)
    cmax = np.take_along_axis(cos, idx[..., None], axis=2)[..., 0]
    return cmax * inv_rho, cmax, idx


def nc_from_scores(S: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric InfoNCE over a B x B score grid; returns loss and dL/dS."""
    B = S.shape[0]
    targets = np.arange(B)
    l_av, g_av = softmax_cross_entropy_batch(S, targets)      # frame -> its audio
    l_va, g_va = softmax_cross_entropy_batch(S.T, targets)    # audio -> its frame
    return 0.5 * (l_av + l_va), 0.5 * (g_av + g_va.T)


def _nc_backward(model: TwoStreamModel, fp: ForwardPass, S, cmax, idx, dS, scale: float):
    inv_rho = 1.0 / model.rho
    dS = dS * scale
    model.log_rho.grad[0] += -float(np.sum(dS * S))
    dc = dS * inv_rho
    B = S.shape[0]
    rows = np.broadcast_to(np.arange(B)[:, None], idx.shape)
    d_ev = np.zeros_like(fp.ev)
    np.add.at(d_ev, (rows, idx), dc[..., None] * fp.ea[None, :, :])
    ev_at = fp.ev[rows, idx]                      # (B, B, E)
    d_ea = np.einsum("ij,ije->je", dc, ev_at)
    return d_ev, d_ea


# ---------------------------------------------------------------------------
# losses on a batch


def loss_nc(model: TwoStreamModel, images, audio) -> float:
    fp = model.forward(images, audio)
    S, _, _ = pair_scores(fp.ev, fp.ea, 1.0 / model.rho)
    return nc_from_scores(S)[0]


def clust_from_logits(logits_v, logits_a, labels):
    lv, gv = softmax_cross_entropy_batch(logits_v, labels)
    la, ga = softmax_cross_entropy_batch(logits_a, labels)
    return 0.5 * (lv + la), 0.5 * gv, 0.5 * ga


def loss_clust(model: TwoStreamModel, images, audio, labels) -> float:
    fp = model.forward(images, audio)
    return clust_from_logits(fp.logits_v, fp.logits_a, np.asarray(labels))[0]


def joint_from_parts(nc: float, clust: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    return lam * nc + (1.0 - lam) * clust


def loss_joint(model: TwoStreamModel, images, audio, labels, lam: float) -> float:
    fp = model.forward(images, audio)
    S, _, _ = pair_scores(fp.ev, fp.ea, 1.0 / model.rho)
    nc = nc_from_scores(S)[0]
    clust = clust_from_logits(fp.logits_v, fp.logits_a, np.asarray(labels))[0]
    return joint_from_parts(nc, clust, lam)


def joint_backward(model: TwoStreamModel, images, audio, labels, lam: float) -> dict:
    """Evaluate the joint loss and accumulate its gradient into the model."""
    fp = model.forward(images, audio)
    S, cmax, idx = pair_scores(fp.ev, fp.ea, 1.0 / model.rho)
    nc, dS = nc_from_scores(S)
    d_ev = d_ea = d_lv = d_la = None
    if lam > 0:
        d_ev, d_ea = _nc_backward(model, fp, S, cmax, idx, dS, lam)
    clust = float("nan")
    if labels is not None:
        clust, gv, ga = clust_from_logits(fp.logits_v, fp.logits_a, np.asarray(labels))
        if lam < 1:
            d_lv, d_la = (1.0 - lam) * gv, (1.0 - lam) * ga
    model.backward(fp, d_ev, d_ea, d_lv, d_la)
    joint = nc if labels is None else joint_from_parts(nc, clust, lam)
    return {"loss_nc": nc, "loss_clust": clust, "loss_joint": joint}


# ---------------------------------------------------------------------------
# Sinkhorn-Knopp label assignment


@dataclass
class Assignment:
    Q: np.ndarray
    labels: np.ndarray
    marginal_error: float
    iterations: int


def _marginal_error(logQ, r, c) -> float:
    rows = np.exp(logsumexp(logQ, axis=1))
    cols = np.exp(logsumexp(logQ, axis=0))
    return float(max(np.max(np.abs(rows / r - 1.0)), np.max(np.abs(cols / c - 1.0))))


def sinkhorn_labels(log_posteriors, column_marginals=None, n_iters: int = 100, tol: float = 1e-3,
                    epsilon: float = 0.05) -> Assignment:
    """Balanced soft assignment of n items to K clusters.

    Solves ``max <Q, L> + epsilon * H(Q)`` with row sums ``1/n`` and column
    sums ``column_marginals`` by alternating log-domain scaling. ``L`` is the
    row-normalized ``log_posteriors``. Marginal error is relative:
    ``max |sum / target - 1|`` over rows and columns.
    """
    L = log_softmax(np.asarray(log_posteriors, dtype=np.float64), axis=1)
    n, K = L.shape
    if n < K:
        raise ValueError(f"need at least as many items ({n}) as clusters ({K})")
    c = np.full(K, 1.0 / K) if column_marginals is None else np.asarray(column_marginals, dtype=np.float64)
    if c.shape != (K,) or np.any(c <= 0) or abs(c.sum() - 1.0) > 1e-9:
        raise ValueError("column marginals must be positive and sum to 1")
    r = np.full(n, 1.0 / n)
    logk = L / epsilon
    u = np.zeros(n)
    v = np.zeros(K)
    err = np.inf
    log_r, log_c = np.log(r), np.log(c)
    for it in range(1, n_iters + 1):
        v = log_c - logsumexp(logk + u[:, None], axis=0)
        u = log_r - logsumexp(logk + v[None, :], axis=1)
        # rows are exact after the u-update; checking columns every step is the
        # dominant cost, so only check periodically and on the last iteration
        if it % 10 and it != n_iters and it > 10:
            continue
        logQ = logk + u[:, None] + v[None, :]
        err = _marginal_error(logQ, r, c)
        if err <= tol:
            break
    else:
        raise NonConvergence(f"marginal error {err:.3g} > {tol} after {n_iters} iterations")
    Q = np.exp(logQ)
    return Assignment(Q, np.argmax(logQ, axis=1), err, it)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: TwoStreamModel
    labels: np.ndarray
    assignment: Assignment | None
    history: list[dict] = field(default_factory=list)


def _stack(scenes) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in scenes]), np.stack([s.audio for s in scenes])


def predict_logits(model: TwoStreamModel, images, audio, chunk: int = 256):
    lv, la = [], []
    for i in range(0, len(images), chunk):
        fp = model.forward(images[i:i + chunk], audio[i:i + chunk])
        lv.append(fp.logits_v)
        la.append(fp.logits_a)
    return np.concatenate(lv), np.concatenate(la)


def relabel(model: TwoStreamModel, images, audio, config: SSLConfig, column_marginals=None) -> Assignment:
    lv, la = predict_logits(model, images, audio)
    logpost = log_softmax(lv, axis=1) + log_softmax(la, axis=1)
    return sinkhorn_labels(logpost, column_marginals, config.sk_iters, config.sk_tol, config.sk_epsilon)


def label_entropy(labels: np.ndarray, K: int) -> float:
    p = np.bincount(labels, minlength=K) / max(len(labels), 1)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def build_model(config: SSLConfig, audio_dim: int, seed: int) -> TwoStreamModel:
    return TwoStreamModel(ModelConfig(n_clusters=config.K, audio_dim=audio_dim), seed=seed)


def train(scenes: Sequence, config: SSLConfig, seed: int = 0, model: TwoStreamModel | None = None,
          on_epoch: Callable[[dict], None] | None = None, column_marginals=None) -> TrainResult:
    if not scenes:
        raise ValueError("empty training set")
    images, audio = _stack(scenes)
    if model is None:
        model = build_model(config, audio.shape[1], seed)
    n = len(images)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    opt = SGD(model.parameters().values(), config.lr, config.momentum)
    labels = None
    assignment = None
    history = []

    for epoch in range(config.epochs):
        warm = epoch < config.warmup
        lam = 1.0 if warm else config.lam
        if not warm and (epoch - config.warmup) % config.relabel_period == 0:
            assignment = relabel(model, images, audio, config, column_marginals)
            labels = assignment.labels
        order = rng.permutation(n)
        sums = {"loss_nc": 0.0, "loss_clust": 0.0, "loss_joint": 0.0}
        n_batches = 0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            opt.zero_grad()
            parts = joint_backward(model, images[idx], audio[idx],
                                   None if warm else labels[idx], lam)
            opt.step()
            for k in sums:
                sums[k] += parts[k] if not np.isnan(parts[k]) else 0.0
            n_batches += 1
        rec = {k: v / n_batches for k, v in sums.items()}
        if warm:
            rec["loss_clust"] = None
        rec.update(
            epoch=epoch,
            phase="warmup" if warm else "joint",
            inv_temperature=1.0 / model.rho,
            label_entropy=None if labels is None else label_entropy(labels, config.K),
            marginal_error=None if assignment is None else assignment.marginal_error,
        )
        history.append(rec)
        log.info("ssl epoch %d: %s", epoch, rec)
        if on_epoch:
            on_epoch(rec)

    assignment = relabel(model, images, audio, config, column_marginals)
    return TrainResult(model, assignment.labels, assignment, history)
