"""Objectives for online replay: cross-entropy, supervised contrastive,
the two coupled baselines, the count-weighted proxy contrastive loss and
its gated / temperature-decoupled / distilled extensions.

Every loss has a head-level form that works on a forward pass
(logits ``O`` of shape (N, C) and unit embeddings ``Z`` of shape (N, e))
and returns a :class:`LossValue` holding the scalar together with
dL/dO and dL/dZ; ``model.backward`` turns those into parameter
gradients. The ``loss_*`` wrappers run forward, head and backward in one
call and return ``(value, Grads)``.

All losses are means over anchors. Log-sum-exp terms are max-shifted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datastream import LabeledSample
from .errors import ConfigError, DomainError
from .model import BatchForward, Grads, ModelParams, backward, forward_batch

NEG_INF = -np.inf


@dataclass(frozen=True)
class TemperatureSchedule:
    tau_max: float = 0.16
    tau_min: float = 0.05
    cycle: int = 500
    tau: float = 0.09

    def validate(self) -> None:
        if self.cycle <= 0:
            raise ConfigError("schedule.cycle must be positive", "cycle")
        if not (self.tau_max > self.tau_min > 0):
            raise ConfigError("schedule needs tau_max > tau_min > 0", "tau_max")
        if self.tau <= 0:
            raise ConfigError("schedule.tau must be positive", "tau")

    def __call__(self, s: int) -> float:
        return temperature(self, s)


def temperature(schedule: TemperatureSchedule, s: int) -> float:
    """Cosine-cycled temperature: tau_max at s=0, tau_min at half a cycle."""
    if schedule.cycle <= 0:
        raise ConfigError("schedule.cycle must be positive", "cycle")
    if s < 0:
        raise DomainError("step index must be non-negative")
    # reduce the phase first so tau(s + S) == tau(s) holds exactly for integer steps
    phase = (s % schedule.cycle) / schedule.cycle
    span = schedule.tau_max - schedule.tau_min
    return span * (1.0 + math.cos(2.0 * math.pi * phase)) / 2.0 + schedule.tau_min


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 1.0
    beta: float = 1.0
    n_min: int = 60
    lr: float = 0.1
    buffer_size: int = 200
    batch_size: int = 10
    replay_batch_size: int = 10

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative", "alpha")
        if self.n_min < 1:
            raise ConfigError("n_min must be >= 1", "n_min")
        if self.lr <= 0:
            raise ConfigError("lr must be positive", "lr")
        if self.buffer_size < 0:
            raise ConfigError("buffer_size must be >= 0", "buffer_size")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.replay_batch_size < 0:
            raise ConfigError("replay_batch_size must be >= 0", "replay_batch_size")


@dataclass
class BatchClassCounts:
    k: dict[int, int]
    n: int

    def get(self, c: int) -> int:
        return self.k.get(c, 0)


def class_counts(labels) -> BatchClassCounts:
    labels = [int(y) for y in labels]
    k: dict[int, int] = {}
    for y in labels:
        k[y] = k.get(y, 0) + 1
    return BatchClassCounts(k, len(labels))


def step_gate(n: int, n_min: int) -> int:
    return 0 if n < n_min else 1


@dataclass
class JointBatch:
    """Current samples followed by replayed ones.

    Replay rows carry the logits and embedding stored with them; stored
    logits may be shorter than the current class count.
    """

    x: np.ndarray
    labels: np.ndarray
    n_current: int
    stored_logits: list[np.ndarray] = field(default_factory=list)
    stored_emb: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def n_replay(self) -> int:
        return self.size - self.n_current

    @classmethod
    def build(cls, current: Sequence[LabeledSample], replay: Sequence = ()) -> "JointBatch":
        samples = list(current) + [e.sample for e in replay]
        if not samples:
            raise DomainError("empty batch")
        x = np.stack([s.features for s in samples]).astype(float)
        y = np.array([s.label for s in samples], dtype=int)
        stored = [np.asarray(e.stored_logits, dtype=float) for e in replay]
        emb = np.stack([e.stored_embedding for e in replay]) if len(replay) else None
        return cls(x, y, len(current), stored, emb)

    def current_only(self) -> "JointBatch":
        return JointBatch(self.x[: self.n_current], self.labels[: self.n_current], self.n_current)


@dataclass
class LossValue:
    value: float
    d_logits: np.ndarray
    d_emb: np.ndarray

    def __add__(self, other: "LossValue") -> "LossValue":
        return LossValue(self.value + other.value, self.d_logits + other.d_logits, self.d_emb + other.d_emb)

    def scale(self, s: float) -> "LossValue":
        return LossValue(s * self.value, s * self.d_logits, s * self.d_emb)


def _zeros(fwd: BatchForward) -> LossValue:
    return LossValue(0.0, np.zeros_like(fwd.logits), np.zeros_like(fwd.emb))


def _label_columns(params: ModelParams, labels) -> np.ndarray:
    return params.columns(labels)


def _column_counts(cols: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(cols, minlength=num_classes).astype(float)


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _similarity_to_emb_grad(d_sim: np.ndarray, emb: np.ndarray, tau: float) -> np.ndarray:
    # S = Z Z^T / tau, so dZ = (dS + dS^T) Z / tau
    return (d_sim + d_sim.T) @ emb / tau


# ---------------------------------------------------------------------------
# head-level losses
# ---------------------------------------------------------------------------


def cross_entropy_head(fwd: BatchForward, cols: np.ndarray) -> LossValue:
    """Mean softmax cross-entropy over all registered classes."""
    o = fwd.logits
    n = o.shape[0]
    lse = _logsumexp(o, axis=1)
    value = float(np.mean(lse - o[np.arange(n), cols]))
    p = np.exp(o - lse[:, None])
    p[np.arange(n), cols] -= 1.0
    return LossValue(value, p / n, np.zeros_like(fwd.emb))


def pcr_head(fwd: BatchForward, cols: np.ndarray) -> LossValue:
    """Proxy contrastive loss: softmax restricted to the batch's classes,
    each proxy weighted by its in-batch count k_c."""
    o = fwd.logits
    n, c = o.shape
    k = _column_counts(cols, c)
    with np.errstate(divide="ignore"):
        logk = np.log(k)
    weighted = o + logk[None, :]
    lse = _logsumexp(weighted, axis=1)
    value = float(np.mean(lse - o[np.arange(n), cols]))
    # k_c p*_c, exactly 0 for absent classes
    kp = np.exp(weighted - lse[:, None])
    kp[np.arange(n), cols] -= 1.0
    return LossValue(value, kp / n, np.zeros_like(fwd.emb))


def _positive_mask(cols: np.ndarray) -> np.ndarray:
    same = cols[:, None] == cols[None, :]
    np.fill_diagonal(same, False)
    return same


def _pair_logits(fwd: BatchForward) -> np.ndarray:
    s = fwd.emb @ fwd.emb.T / fwd.tau
    np.fill_diagonal(s, NEG_INF)
    return s


def scr_head(fwd: BatchForward, cols: np.ndarray) -> LossValue:
    """Supervised contrastive loss over anchor-to-sample pairs; anchors
    without positives contribute zero."""
    n = len(cols)
    if n < 2:
        raise DomainError("contrastive loss needs at least two samples")
    s = _pair_logits(fwd)
    pos = _positive_mask(cols)
    n_pos = pos.sum(axis=1)
    has = n_pos > 0
    lse = _logsumexp(s, axis=1)
    s_fin = np.where(np.isfinite(s), s, 0.0)
    per_anchor = np.where(has, lse - (s_fin * pos).sum(axis=1) / np.maximum(n_pos, 1), 0.0)
    value = float(per_anchor.sum() / n)

    soft = np.exp(s - lse[:, None])
    d_s = soft - pos / np.maximum(n_pos, 1)[:, None]
    d_s[~has] = 0.0
    d_s /= n
    d_emb = _similarity_to_emb_grad(d_s, fwd.emb, fwd.tau)
    return LossValue(value, np.zeros_like(fwd.logits), d_emb)


def couple_mixed_head(fwd: BatchForward, cols: np.ndarray) -> LossValue:
    """Cross-entropy whose partition function also sums all anchor-to-sample
    similarities of the batch."""
    o = fwd.logits
    n = o.shape[0]
    s = _pair_logits(fwd)
    both = np.concatenate([o, s], axis=1)
    lse = _logsumexp(both, axis=1)
    value = float(np.mean(lse - o[np.arange(n), cols]))
    soft = np.exp(both - lse[:, None])
    d_o = soft[:, : o.shape[1]].copy()
    d_o[np.arange(n), cols] -= 1.0
    d_s = soft[:, o.shape[1]:] / n
    return LossValue(value, d_o / n, _similarity_to_emb_grad(d_s, fwd.emb, fwd.tau))


def pcr_c_head(fwd: BatchForward, cols: np.ndarray, n_min: int) -> LossValue:
    """Proxy contrastive loss with gated anchor-to-sample pairs.

    Below ``n_min`` samples the gate is closed and this is exactly
    :func:`pcr_head`. With the gate open, each positive p contributes
    -log[(e^{o_y} + e^{S_ap}) / (sum_c k_c e^{o_c} + sum_j e^{S_aj})];
    anchors without positives keep the proxy-only term.
    """
    n = len(cols)
    if step_gate(n, n_min) == 0 or n < 2:
        return pcr_head(fwd, cols)
    o = fwd.logits
    c = o.shape[1]
    rows = np.arange(n)
    k = _column_counts(cols, c)
    with np.errstate(divide="ignore"):
        logk = np.log(k)
    weighted = o + logk[None, :]
    s = _pair_logits(fwd)
    pos = _positive_mask(cols)
    n_pos = pos.sum(axis=1)
    has = n_pos > 0

    log_den = _logsumexp(np.concatenate([weighted, s], axis=1), axis=1)
    o_y = o[rows, cols]
    # numerator per (anchor, positive): log(e^{o_y} + e^{S_ap})
    log_num = np.logaddexp(o_y[:, None], np.where(pos, s, NEG_INF))
    terms = np.where(pos, log_den[:, None] - log_num, 0.0)
    with_pos = terms.sum(axis=1) / np.maximum(n_pos, 1)
    log_den_proxy = _logsumexp(weighted, axis=1)
    proxy_only = log_den_proxy - o_y
    per_anchor = np.where(has, with_pos, proxy_only)
    value = float(per_anchor.mean())

    # gradients, anchors with positives
    den_soft = np.exp(np.concatenate([weighted, s], axis=1) - log_den[:, None])
    share_proxy = np.where(pos, np.exp(o_y[:, None] - log_num), 0.0)
    share_pair = np.where(pos, 1.0 - share_proxy, 0.0)
    d_o = den_soft[:, :c].copy()
    d_o[rows, cols] -= share_proxy.sum(axis=1) / np.maximum(n_pos, 1)
    d_s = den_soft[:, c:] - share_pair / np.maximum(n_pos, 1)[:, None]

    # anchors without positives: plain proxy term, no pair gradient
    if (~has).any():
        kp = np.exp(weighted - log_den_proxy[:, None])
        kp[rows, cols] -= 1.0
        d_o[~has] = kp[~has]
        d_s[~has] = 0.0
    d_o /= n
    d_s /= n
    return LossValue(value, d_o, _similarity_to_emb_grad(d_s, fwd.emb, fwd.tau))


def pcr_ct_head(fwd: BatchForward, cols: np.ndarray, tau_s: float, n_min: int) -> LossValue:
    """Gated proxy contrastive loss rescaled by tau / tau(s): the static tau
    stays inside every exponential, tau(s) only sets gradient magnitude."""
    if tau_s <= 0:
        raise DomainError("tau(s) must be positive")
    return pcr_c_head(fwd, cols, n_min).scale(fwd.tau / tau_s)


def pcd_head(fwd: BatchForward, batch: JointBatch, cols: np.ndarray) -> LossValue:
    """Count-weighted squared distance between current and stored logits of
    the replayed rows, over classes present both in the stored logits and in
    the joint batch. Stored logits are constants."""
    out = _zeros(fwd)
    n_rep = batch.n_replay
    if n_rep == 0:
        return out
    if len(batch.stored_logits) != n_rep:
        raise DomainError("every replayed entry needs stored logits")
    k = _column_counts(cols, fwd.logits.shape[1])
    total = 0.0
    for r, stored in enumerate(batch.stored_logits):
        if stored is None:
            raise DomainError("replayed entry without stored logits")
        row = batch.n_current + r
        m = min(len(stored), fwd.logits.shape[1])
        diff = fwd.logits[row, :m] - stored[:m]
        w = k[:m]
        total += float(np.sum(w * diff * diff))
        out.d_logits[row, :m] = 2.0 * w * diff / n_rep
    out.value = total / n_rep
    return out


def scd_head(fwd: BatchForward, batch: JointBatch) -> LossValue:
    """Relation distillation inside the replay batch: cross-entropy of the
    stored pairwise-similarity distribution under the current one (current
    distribution as weights, stored one inside the log)."""
    out = _zeros(fwd)
    n_rep = batch.n_replay
    if n_rep < 2:
        return out
    if batch.stored_emb is None:
        raise DomainError("replayed entries need stored embeddings")
    tau = fwd.tau
    idx = slice(batch.n_current, batch.size)
    z = fwd.emb[idx]
    s_new = z @ z.T / tau
    zs = batch.stored_emb
    s_old = zs @ zs.T / tau
    np.fill_diagonal(s_new, NEG_INF)
    np.fill_diagonal(s_old, NEG_INF)
    q_new = np.exp(s_new - _logsumexp(s_new, axis=1)[:, None])
    log_q_old = s_old - _logsumexp(s_old, axis=1)[:, None]
    log_q_old = np.where(np.isfinite(log_q_old), log_q_old, 0.0)
    per_anchor = -(q_new * log_q_old).sum(axis=1)
    out.value = float(per_anchor.mean())
    expect = (q_new * log_q_old).sum(axis=1, keepdims=True)
    d_s = -q_new * (log_q_old - expect) / n_rep
    np.fill_diagonal(d_s, 0.0)
    out.d_emb[idx] = _similarity_to_emb_grad(d_s, z, tau)
    return out


def hpcr_head(
    fwd: BatchForward,
    batch: JointBatch,
    cols: np.ndarray,
    tau_s: float,
    hp: HyperParams,
) -> tuple[LossValue, dict[str, float]]:
    main = pcr_ct_head(fwd, cols, tau_s, hp.n_min)
    pcd = pcd_head(fwd, batch, cols)
    scd = scd_head(fwd, batch)
    total = main + pcd.scale(hp.alpha) + scd.scale(hp.beta)
    return total, {"pcr_ct": main.value, "pcd": pcd.value, "scd": scd.value}


# ---------------------------------------------------------------------------
# probability helpers
# ---------------------------------------------------------------------------


def pcr_prob(o, counts: BatchClassCounts, y: int, classes: Sequence[int] | None = None) -> float:
    """p*_y = exp(o_y) / sum_c k_c exp(o_c).

    ``o`` is indexed by position in ``classes`` (default: class id).
    """
    o = np.asarray(o, dtype=float)
    classes = list(range(len(o))) if classes is None else list(classes)
    if counts.get(y) < 1:
        raise DomainError(f"class {y} is absent from the batch counts")
    k = np.array([counts.get(c) for c in classes], dtype=float)
    present = k > 0
    m = o[present].max()
    den = float(np.sum(k[present] * np.exp(o[present] - m)))
    return float(np.exp(o[classes.index(y)] - m) / den)


# ---------------------------------------------------------------------------
# full-model wrappers: forward -> head -> backward
# ---------------------------------------------------------------------------


def _run(params: ModelParams, x: np.ndarray, head, with_grad: bool = True) -> tuple[float, Grads | None]:
    fwd = forward_batch(params, x)
    lv = head(fwd)
    if not with_grad:
        return lv.value, None
    return lv.value, backward(params, fwd, lv.d_logits, lv.d_emb)


def loss_finetune(batch: JointBatch, params: ModelParams, with_grad: bool = True) -> tuple[float, Grads | None]:
    cur = batch.current_only()
    cols = _label_columns(params, cur.labels)
    return _run(params, cur.x, lambda f: cross_entropy_head(f, cols), with_grad)


def loss_er(batch: JointBatch, params: ModelParams, with_grad: bool = True) -> tuple[float, Grads | None]:
    cols = _label_columns(params, batch.labels)
    return _run(params, batch.x, lambda f: cross_entropy_head(f, cols), with_grad)


def loss_scr(batch: JointBatch, params: ModelParams, with_grad: bool = True) -> tuple[float, Grads | None]:
    cols = _label_columns(params, batch.labels)
    return _run(params, batch.x, lambda f: scr_head(f, cols), with_grad)


def loss_couple_sum(batch: JointBatch, params: ModelParams, with_grad: bool = True) -> tuple[float, Grads | None]:
    cols = _label_columns(params, batch.labels)
    return _run(params, batch.x, lambda f: cross_entropy_head(f, cols) + scr_head(f, cols), with_grad)


def loss_couple_mixed(batch: JointBatch, params: ModelParams, with_grad: bool = True) -> tuple[float, Grads | None]:
    cols = _label_columns(params, batch.labels)
    return _run(params, batch.x, lambda f: couple_mixed_head(f, cols), with_grad)


def loss_pcr(batch: JointBatch, params: ModelParams, with_grad: bool = True) -> tuple[float, Grads | None]:
    cols = _label_columns(params, batch.labels)
    return _run(params, batch.x, lambda f: pcr_head(f, cols), with_grad)


def loss_pcr_c(batch: JointBatch, params: ModelParams, n_min: int = 60, with_grad: bool = True) -> tuple[float, Grads | None]:
    cols = _label_columns(params, batch.labels)
    return _run(params, batch.x, lambda f: pcr_c_head(f, cols, n_min), with_grad)


def loss_pcr_ct(
    batch: JointBatch,
    params: ModelParams,
    schedule: TemperatureSchedule,
    s: int,
    n_min: int = 60,
    with_grad: bool = True,
) -> tuple[float, Grads | None]:
    cols = _label_columns(params, batch.labels)
    tau_s = temperature(schedule, s)
    return _run(params, batch.x, lambda f: pcr_ct_head(f, cols, tau_s, n_min), with_grad)


def loss_pcd(batch: JointBatch, params: ModelParams, with_grad: bool = True) -> tuple[float, Grads | None]:
    cols = _label_columns(params, batch.labels)
    return _run(params, batch.x, lambda f: pcd_head(f, batch, cols), with_grad)


def loss_scd(batch: JointBatch, params: ModelParams, with_grad: bool = True) -> tuple[float, Grads | None]:
    return _run(params, batch.x, lambda f: scd_head(f, batch), with_grad)


def loss_hpcr(
    batch: JointBatch,
    params: ModelParams,
    schedule: TemperatureSchedule,
    s: int,
    hp: HyperParams,
    with_grad: bool = True,
) -> tuple[float, Grads | None]:
    cols = _label_columns(params, batch.labels)
    tau_s = temperature(schedule, s)
    return _run(params, batch.x, lambda f: hpcr_head(f, batch, cols, tau_s, hp)[0], with_grad)
