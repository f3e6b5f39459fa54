"""Closed-form proxy gradients, a central-difference oracle, and the
diagnostics built on them (relative penalty, cumulative gradient audit,
loss-flatness probe, and the full gradcheck suite)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from .errors import DomainError, OracleError
from .memory import BufferEntry
from .datastream import LabeledSample
from .model import ModelParams, embed_batch, flatten, init_params, unflatten_into

FD_STEP = 1e-6
GRADCHECK_TOL = 1e-5


def _class_list(o, classes):
    return list(range(len(o))) if classes is None else list(classes)


def grad_softmax_closed_form(p, y: int, tau: float) -> np.ndarray:
    """dL/d<z, w_c> for softmax cross-entropy: (p_y - 1)/tau at y, p_c/tau elsewhere."""
    g = np.array(p, dtype=float)
    g[y] -= 1.0
    return g / tau


def _weighted_probs(o, counts: L.BatchClassCounts, y: int, classes) -> tuple[np.ndarray, np.ndarray]:
    o = np.asarray(o, dtype=float)
    classes = _class_list(o, classes)
    if counts.get(y) < 1:
        raise DomainError(f"class {y} is absent from the batch counts")
    k = np.array([counts.get(c) for c in classes], dtype=float)
    present = k > 0
    m = o[present].max()
    e = np.where(present, np.exp(o - m), 0.0)
    kp = k * e / np.sum(k * e)
    return kp, np.array(classes)


def grad_pcr_closed_form(o, counts: L.BatchClassCounts, y: int, tau: float, classes=None) -> np.ndarray:
    """(k_y p*_y - 1)/tau at y, k_c p*_c / tau for present c != y, 0 for absent c."""
    kp, cls = _weighted_probs(o, counts, y, classes)
    kp[np.flatnonzero(cls == y)[0]] -= 1.0
    return kp / tau


def grad_pcr_ct_closed_form(o, counts: L.BatchClassCounts, y: int, tau: float, tau_s: float, classes=None) -> np.ndarray:
    """As :func:`grad_pcr_closed_form` with the 1/tau factor replaced by
    1/tau(s); ``o`` is still computed with the static tau."""
    if tau_s <= 0:
        raise DomainError("tau(s) must be positive")
    return grad_pcr_closed_form(o, counts, y, tau, classes) * (tau / tau_s)


def sum_y(o, counts: L.BatchClassCounts, y: int, classes=None) -> float:
    o = np.asarray(o, dtype=float)
    classes = _class_list(o, classes)
    return float(sum(counts.get(c) * np.exp(o[i]) for i, c in enumerate(classes) if c != y))


def relative_penalty(sims, counts: L.BatchClassCounts, c: int, y: int, tau: float, classes=None) -> float:
    """Share of the total negative-proxy penalty that lands on proxy ``c``.

    ``sims`` are raw cosine similarities; logits are ``sims / tau``.
    """
    if c == y:
        raise DomainError("relative penalty is defined for negative classes only")
    sims = np.asarray(sims, dtype=float)
    classes = _class_list(sims, classes)
    o = sims / tau
    neg = [i for i, j in enumerate(classes) if j != y and counts.get(j) > 0]
    if not neg:
        raise DomainError("no negative class present in the batch")
    m = max(o[i] for i in neg)
    den = sum(counts.get(classes[i]) * np.exp(o[i] - m) for i in neg)
    i_c = classes.index(c)
    return float(counts.get(c) * np.exp(o[i_c] - m) / den)


def finite_difference(f: Callable[[np.ndarray], float], x, h: float = FD_STEP, inplace: bool = False) -> np.ndarray:
    """Central differences, one coordinate at a time.

    With ``inplace=True`` the caller's array is perturbed directly (and
    restored), so ``f`` may read it through shared state.
    """
    x = x if inplace else np.array(x, dtype=float)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise OracleError(f"non-finite loss evaluation at coordinate {i}")
        gf[i] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic, numeric) -> float:
    """max |a - n| over max(|a|, |n|, 1e-12), magnitudes taken as max-norms."""
    a = np.ravel(np.asarray(analytic, dtype=float))
    n = np.ravel(np.asarray(numeric, dtype=float))
    if a.size == 0:
        return 0.0
    den = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-12)
    return float(np.max(np.abs(a - n)) / den)


# ---------------------------------------------------------------------------
# cumulative gradient audit
# ---------------------------------------------------------------------------


@dataclass
class ProxyGradientReport:
    pos_old: float = 0.0
    neg_old: float = 0.0
    pos_new: float = 0.0
    neg_new: float = 0.0
    per_task: dict = field(default_factory=dict)
    last_step: np.ndarray | None = None
    last_sum_y: float | None = None

    @property
    def positive(self) -> float:
        return self.pos_old + self.pos_new

    @property
    def negative(self) -> float:
        return self.neg_old + self.neg_new

    @property
    def magnitude(self) -> float:
        return self.positive - self.negative


class GradientAudit:
    """Accumulates dL/d<z, w_c> over a run.

    Each anchor's contribution is bucketed by sign, and each class as old
    (learned in an earlier task) or new (current task).
    """

    def __init__(self):
        self.report = ProxyGradientReport()
        self.rows: list[tuple] = []

    def record(self, step: int, task: int, d_logits: np.ndarray, tau: float, classes: Sequence[int],
               new_classes) -> None:
        d_cos = np.asarray(d_logits, dtype=float) / tau
        if d_cos.size == 0:
            return
        pos = np.clip(d_cos, 0.0, None).sum(axis=0)
        neg = np.clip(d_cos, None, 0.0).sum(axis=0)
        new_classes = set(new_classes)
        task_tot = self.report.per_task.setdefault(task, [0.0, 0.0, 0.0, 0.0])
        r = self.report
        for j, c in enumerate(classes):
            age = "new" if c in new_classes else "old"
            if age == "new":
                r.pos_new += pos[j]
                r.neg_new += neg[j]
                task_tot[2] += pos[j]
                task_tot[3] += neg[j]
            else:
                r.pos_old += pos[j]
                r.neg_old += neg[j]
                task_tot[0] += pos[j]
                task_tot[1] += neg[j]
            if pos[j]:
                self.rows.append((step, task, c, age, float(pos[j]), "pos"))
            if neg[j]:
                self.rows.append((step, task, c, age, float(neg[j]), "neg"))
        r.last_step = d_cos.sum(axis=0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "task", "class", "age", "grad", "sign"])
            for step, task, c, age, g, sign in self.rows:
                w.writerow([step, task, c, age, repr(g), sign])


def cumulative_gradient_audit(audit: GradientAudit | None) -> ProxyGradientReport:
    return ProxyGradientReport() if audit is None else audit.report


def flatness_probe(loss: Callable[[ModelParams], float], params: ModelParams, noise: float = 0.01,
                   repeats: int = 1000, rng: np.random.Generator | None = None) -> float:
    """Mean |L(theta + u) - L(theta)| for u ~ U[-noise, noise] per parameter."""
    rng = rng if rng is not None else np.random.default_rng(0)
    base = loss(params)
    theta = flatten(params.tensors())
    diffs = np.empty(repeats)
    for i in range(repeats):
        moved = unflatten_into(params, theta + rng.uniform(-noise, noise, size=theta.shape))
        diffs[i] = abs(loss(moved) - base)
    return float(diffs.mean())


# ---------------------------------------------------------------------------
# gradcheck suite
# ---------------------------------------------------------------------------

LOSS_NAMES = (
    "finetune", "er", "scr", "couple_sum", "couple_mixed",
    "pcr", "pcr_c", "pcr_ct", "pcd", "scd", "hpcr",
)
CLOSED_FORM_NAMES = ("softmax_closed_form", "pcr_closed_form", "pcr_ct_closed_form")


@dataclass
class Instance:
    params: ModelParams
    batch: L.JointBatch
    schedule: L.TemperatureSchedule
    step: int
    hp: L.HyperParams


def _general_position(params: ModelParams, x: np.ndarray) -> bool:
    """No sample sits within 1e-4 of a ReLU kink or has a fully dead hidden
    layer, and embeddings are pairwise distinct."""
    emb, _, pre, _ = embed_batch(params, x)
    for a in pre[:-1]:
        if np.min(np.abs(a)) < 1e-4 or np.any((a > 0).sum(axis=1) == 0):
            return False
    gaps = np.linalg.norm(emb[:, None, :] - emb[None, :, :], axis=2) + np.eye(len(emb))
    return bool(np.min(gaps) > 1e-3)


def random_instance(rng: np.random.Generator, dim: int = 3, hidden=(4, 4), embed_dim: int = 3) -> Instance:
    """A small random model and joint batch with stored replay data.

    Labels always cover at least two classes, and the model is redrawn
    until the batch is in general position (see ``_general_position``).
    ``n_min`` is drawn on either side of the batch size so both gate
    states are exercised.
    """
    tau = float(rng.uniform(0.2, 1.0))
    n_classes = int(rng.integers(2, 5))
    n_cur = int(rng.integers(1, 5))
    n_rep = int(rng.integers(2, 5))
    labels = rng.integers(0, n_classes, size=n_cur + n_rep)
    while len(set(labels.tolist())) < 2:
        labels = rng.integers(0, n_classes, size=n_cur + n_rep)
    x = rng.standard_normal((n_cur + n_rep, dim))
    while True:
        params = init_params(dim, hidden, embed_dim, tau=tau, rng=rng)
        for b in params.biases:
            b[...] = 0.1 * rng.standard_normal(b.shape)
        if _general_position(params, x):
            break
    params.register(range(n_classes), rng)
    params.proxies = rng.standard_normal(params.proxies.shape)

    current = [LabeledSample(x[i], int(labels[i])) for i in range(n_cur)]
    replay = []
    for i in range(n_cur, n_cur + n_rep):
        m = int(rng.integers(1, n_classes + 1))
        z = rng.standard_normal(embed_dim)
        replay.append(BufferEntry(LabeledSample(x[i], int(labels[i])),
                                  rng.uniform(-1, 1, size=m) / tau, z / np.linalg.norm(z)))
    batch = L.JointBatch.build(current, replay)
    n = batch.size
    n_min = int(rng.integers(max(1, n - 3), n + 4))
    schedule = L.TemperatureSchedule(tau_max=tau * 1.6, tau_min=tau * 0.5, cycle=int(rng.integers(5, 50)), tau=tau)
    hp = L.HyperParams(alpha=float(rng.uniform(0.1, 2.0)), beta=float(rng.uniform(0.1, 2.0)), n_min=n_min)
    return Instance(params, batch, schedule, int(rng.integers(0, 100)), hp)


def loss_fn(name: str, inst: Instance) -> Callable[..., tuple[float, object]]:
    b, sch, s, hp = inst.batch, inst.schedule, inst.step, inst.hp
    return {
        "finetune": lambda p, g=True: L.loss_finetune(b, p, with_grad=g),
        "er": lambda p, g=True: L.loss_er(b, p, with_grad=g),
        "scr": lambda p, g=True: L.loss_scr(b, p, with_grad=g),
        "couple_sum": lambda p, g=True: L.loss_couple_sum(b, p, with_grad=g),
        "couple_mixed": lambda p, g=True: L.loss_couple_mixed(b, p, with_grad=g),
        "pcr": lambda p, g=True: L.loss_pcr(b, p, with_grad=g),
        "pcr_c": lambda p, g=True: L.loss_pcr_c(b, p, hp.n_min, with_grad=g),
        "pcr_ct": lambda p, g=True: L.loss_pcr_ct(b, p, sch, s, hp.n_min, with_grad=g),
        "pcd": lambda p, g=True: L.loss_pcd(b, p, with_grad=g),
        "scd": lambda p, g=True: L.loss_scd(b, p, with_grad=g),
        "hpcr": lambda p, g=True: L.loss_hpcr(b, p, sch, s, hp, with_grad=g),
    }[name]


def check_loss(name: str, inst: Instance, h: float = FD_STEP) -> float:
    """Relative error between backprop and central differences over every
    model parameter."""
    fn = loss_fn(name, inst)
    _, grads = fn(inst.params)
    analytic = flatten(grads.tensors())
    params = inst.params.copy()
    numeric = []
    # perturb the parameters in place; each tensor is restored before moving on
    for t in params.tensors():
        numeric.append(finite_difference(lambda _: fn(params, False)[0], t, h, inplace=True))
    return relative_error(analytic, flatten(numeric))


def _logit_instance(rng: np.random.Generator):
    n_classes = int(rng.integers(2, 7))
    o = rng.uniform(-5, 5, size=n_classes)
    labels = rng.integers(0, n_classes, size=int(rng.integers(1, 12)))
    counts = L.class_counts(labels)
    y = int(labels[0])
    return o, counts, y


def _pcr_value(o, counts: L.BatchClassCounts, y: int):
    # log sum_c k_c e^{o_c - o_y}: no cancellation when the loss is tiny
    k = np.array([counts.get(c) for c in range(len(o))], dtype=np.longdouble)
    present = k > 0
    return np.log(np.sum(k[present] * np.exp(o[present] - o[y])))


def check_closed_form(name: str, rng: np.random.Generator, h: float = FD_STEP) -> float:
    """Closed forms against central differences in the cosine coordinates
    (o = cos / tau).

    The oracle is a separate scalar formula evaluated in extended
    precision, so its roundoff stays well below the tolerance even when
    the loss carries a large constant such as log k_y.
    """
    o, counts, y = _logit_instance(rng)
    tau = float(rng.uniform(0.05, 1.0))
    cos = (o * tau).astype(np.longdouble)
    tau_l = np.longdouble(tau)
    if name == "softmax_closed_form":
        ones = L.class_counts(range(len(o)))
        p = np.exp(o - o.max())
        analytic = grad_softmax_closed_form(p / p.sum(), y, tau)
        numeric = finite_difference(lambda c: _pcr_value(c / tau_l, ones, y), cos, h, inplace=True)
    elif name == "pcr_closed_form":
        analytic = grad_pcr_closed_form(o, counts, y, tau)
        numeric = finite_difference(lambda c: _pcr_value(c / tau_l, counts, y), cos, h, inplace=True)
    elif name == "pcr_ct_closed_form":
        tau_s = float(rng.uniform(0.05, 1.0))
        analytic = grad_pcr_ct_closed_form(o, counts, y, tau, tau_s)
        scale = tau_l / np.longdouble(tau_s)
        numeric = finite_difference(lambda c: scale * _pcr_value(c / tau_l, counts, y), cos, h, inplace=True)
    else:
        raise KeyError(name)
    return relative_error(analytic, numeric.astype(float))


def gradcheck_suite(instances: int = 100, seed: int = 0, names: Sequence[str] = LOSS_NAMES + CLOSED_FORM_NAMES) -> dict[str, float]:
    """Max relative error per loss / closed form over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {n: 0.0 for n in names}
    loss_names = [n for n in names if n in LOSS_NAMES]
    cf_names = [n for n in names if n in CLOSED_FORM_NAMES]
    for _ in range(instances):
        inst = random_instance(rng)
        for n in loss_names:
            worst[n] = max(worst[n], check_loss(n, inst))
        for n in cf_names:
            worst[n] = max(worst[n], check_closed_form(n, rng))
    return worst
