"""Online training loop and evaluation.

One SGD step per incoming mini-batch: retrieve replay samples, run the
method's objective on the joint batch, step, then offer the current
samples (with the logits and embeddings from the pre-update forward
pass) to the reservoir buffer. Every task boundary fills one row of the
accuracy matrix.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .datastream import TaskStream
from .errors import ConfigError, DomainError
from .gradients import GradientAudit, ProxyGradientReport
from .memory import BufferEntry, MemoryBuffer
from .metrics import AccuracyMatrix, metric_A, metric_AAA, metric_F
from .model import (
    ModelParams,
    backward,
    embed,
    forward_batch,
    init_params,
    ncm_fit,
    ncm_predict,
    predict_softmax,
    sgd_step,
)

METHODS = ("finetune", "er", "scr", "couple_sum", "couple_mixed", "pcr", "pcr_c", "pcr_ct", "hpcr")
SCHEDULED = ("pcr_ct", "hpcr")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 32

    def validate(self) -> None:
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("model layer widths must be positive", "hidden")


@dataclass(frozen=True)
class MethodSpec:
    method: str
    hp: L.HyperParams = field(default_factory=L.HyperParams)
    schedule: L.TemperatureSchedule = field(default_factory=L.TemperatureSchedule)
    classifier: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}", "method")
        expected = "ncm" if self.method == "scr" else "softmax"
        if self.classifier is None:
            object.__setattr__(self, "classifier", expected)
        elif self.classifier != expected:
            raise ConfigError(f"method {self.method} uses the {expected} classifier", "classifier")

    @property
    def uses_replay(self) -> bool:
        return self.method != "finetune"

    def validate(self) -> None:
        self.hp.validate()
        self.schedule.validate()


@dataclass
class RunResult:
    accuracy: AccuracyMatrix
    A_T: float
    AAA: float
    F_T: float
    loss_log: list[tuple[int, int, float, float]]
    wall_time: float
    seed: int
    params: ModelParams
    buffer: MemoryBuffer
    audit: ProxyGradientReport | None = None
    audit_log: GradientAudit | None = None
    curve: list[tuple[int, float]] = field(default_factory=list)
    embeddings: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None


def _objective(spec: MethodSpec, fwd, joint: L.JointBatch, cols: np.ndarray, step: int) -> tuple[L.LossValue, float]:
    m = spec.method
    hp = spec.hp
    tau = fwd.tau
    if m in ("finetune", "er"):
        return L.cross_entropy_head(fwd, cols), tau
    if m == "scr":
        if joint.size < 2:
            return L._zeros(fwd), tau
        return L.scr_head(fwd, cols), tau
    if m == "couple_sum":
        lv = L.cross_entropy_head(fwd, cols)
        if joint.size >= 2:
            lv = lv + L.scr_head(fwd, cols)
        return lv, tau
    if m == "couple_mixed":
        return L.couple_mixed_head(fwd, cols), tau
    if m == "pcr":
        return L.pcr_head(fwd, cols), tau
    if m == "pcr_c":
        return L.pcr_c_head(fwd, cols, hp.n_min), tau
    tau_s = L.temperature(spec.schedule, step)
    if m == "pcr_ct":
        return L.pcr_ct_head(fwd, cols, tau_s, hp.n_min), tau_s
    return L.hpcr_head(fwd, joint, cols, tau_s, hp)[0], tau_s


def evaluate(params: ModelParams, spec: MethodSpec, tests, buffer: MemoryBuffer | None = None) -> list[float]:
    """Accuracy on each (features, labels) test set with the method's classifier."""
    if spec.classifier == "ncm":
        if buffer is None or len(buffer) == 0:
            raise DomainError("NCM evaluation needs a non-empty buffer")
        state = ncm_fit(buffer, params)
    accs = []
    for x, y in tests:
        if spec.classifier == "ncm":
            pred = ncm_predict(state, embed(params, x))
        else:
            pred = predict_softmax(forward_batch(params, x).logits, params.classes)
        accs.append(float(np.mean(pred == y)))
    return accs


def run(
    stream: TaskStream,
    spec: MethodSpec,
    seed: int,
    model: ModelConfig = ModelConfig(),
    grad_audit: bool = False,
    eval_every: int | None = None,
    keep_embeddings: bool = False,
) -> RunResult:
    spec.validate()
    model.validate()
    hp = spec.hp
    stream.reset()
    init_ss, buf_ss, proxy_ss = np.random.SeedSequence(seed).spawn(3)
    params = init_params(stream.dim, model.hidden, model.embed_dim, spec.schedule.tau, np.random.default_rng(init_ss))
    proxy_rng = np.random.default_rng(proxy_ss)
    buffer = MemoryBuffer(hp.buffer_size if spec.uses_replay else 0, np.random.default_rng(buf_ss))
    audit = GradientAudit() if grad_audit else None

    acc = AccuracyMatrix()
    loss_log: list[tuple[int, int, float, float]] = []
    curve: list[tuple[int, float]] = []
    started = time.perf_counter()
    step = 0
    for batch in stream.batches(hp.batch_size):
        params.register([s.label for s in batch.samples], proxy_rng)
        replay = buffer.random_retrieval(hp.replay_batch_size) if spec.uses_replay else []
        joint = L.JointBatch.build(batch.samples, replay)
        cols = params.columns(joint.labels)
        fwd = forward_batch(params, joint.x)
        lv, tau_s = _objective(spec, fwd, joint, cols, step)
        grads = backward(params, fwd, lv.d_logits, lv.d_emb)
        if audit is not None:
            task_classes = stream.tasks[batch.task].classes
            audit.record(step, batch.task + 1, lv.d_logits, fwd.tau, params.classes, task_classes)
        # stored logits/embeddings come from this step's pre-update forward pass
        entries = [
            BufferEntry(s, fwd.logits[i].copy(), fwd.emb[i].copy()) for i, s in enumerate(batch.samples)
        ]
        sgd_step(params, grads, hp.lr)
        if spec.uses_replay:
            buffer.reservoir_update(entries)
        loss_log.append((step, batch.task + 1, lv.value, tau_s))
        step += 1

        if eval_every and step % eval_every == 0:
            seen = stream.tasks[: batch.task + 1]
            x = np.concatenate([t.test_features for t in seen])
            y = np.concatenate([t.test_labels for t in seen])
            curve.append((step, evaluate(params, spec, [(x, y)], buffer)[0]))
        if batch.task_end:
            i = batch.task + 1
            tests = [(t.test_features, t.test_labels) for t in stream.tasks[:i]]
            for j, a in enumerate(evaluate(params, spec, tests, buffer), start=1):
                acc.set(i, j, a)
    wall = time.perf_counter() - started

    T = acc.num_tasks
    embeddings = None
    if keep_embeddings:
        x = np.concatenate([t.test_features for t in stream.tasks])
        y = np.concatenate([t.test_labels for t in stream.tasks])
        task = np.concatenate([np.full(len(t.test_labels), t.index + 1) for t in stream.tasks])
        embeddings = (embed(params, x), y, task)
    return RunResult(
        accuracy=acc,
        A_T=metric_A(acc, T),
        AAA=metric_AAA(acc, T),
        F_T=metric_F(acc, T) if T >= 2 else float("nan"),
        loss_log=loss_log,
        wall_time=wall,
        seed=seed,
        params=params,
        buffer=buffer,
        audit=audit.report if audit else None,
        audit_log=audit,
        curve=curve,
        embeddings=embeddings,
    )


def write_run(result: RunResult, out_dir) -> Path:
    """Write the per-run CSV files into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.accuracy.write_csv(out / "accuracy_matrix.csv")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["A_T", "AAA", "F_T"])
        w.writerow([repr(result.A_T), repr(result.AAA), repr(result.F_T)])
    with open(out / "loss_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "task", "loss", "tau_s"])
        for step, task, loss, tau_s in result.loss_log:
            w.writerow([step, task, repr(loss), repr(tau_s)])
    if result.curve:
        with open(out / "curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "accuracy"])
            for step, a in result.curve:
                w.writerow([step, repr(a)])
    if result.audit_log is not None:
        result.audit_log.write_csv(out / "grad_audit.csv")
    if result.embeddings is not None:
        z, y, task = result.embeddings
        with open(out / "embeddings.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"z{i}" for i in range(z.shape[1])] + ["label", "task"])
            for zi, yi, ti in zip(z, y, task):
                w.writerow([repr(float(v)) for v in zi] + [int(yi), int(ti)])
    return out
