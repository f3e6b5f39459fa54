"""Feed-forward feature extractor with a cosine-proxy classifier.

The extractor is a ReLU MLP whose output is L2-normalised into the
embedding ``z``. Every registered class owns a proxy ``w_c``; logits are
``o_c = <z, w_c / |w_c|> / tau``. Gradients are written out by hand.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError

_EPS = 1e-12
PROXY_INIT_STD = 0.01


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    proxies: np.ndarray
    classes: list[int] = field(default_factory=list)
    tau: float = 0.09

    def __post_init__(self):
        if self.tau <= 0:
            raise DomainError("tau must be positive")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def column(self, label: int) -> int:
        try:
            return self._index[label]
        except (AttributeError, KeyError):
            self._index = {c: i for i, c in enumerate(self.classes)}
            if label not in self._index:
                raise DomainError(f"class {label} has no registered proxy") from None
            return self._index[label]

    def columns(self, labels) -> np.ndarray:
        return np.array([self.column(int(y)) for y in labels], dtype=int)

    def register(self, labels, rng: np.random.Generator) -> list[int]:
        """Add a proxy for every unseen class in ``labels`` (first-seen order)."""
        new = []
        for y in labels:
            y = int(y)
            if y not in self.classes and y not in new:
                new.append(y)
        if new:
            init = PROXY_INIT_STD * rng.standard_normal((len(new), self.embed_dim))
            self.proxies = np.vstack([self.proxies, init])
            self.classes = self.classes + new
            self._index = {c: i for i, c in enumerate(self.classes)}
        return new

    def copy(self) -> "ModelParams":
        return ModelParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.proxies.copy(),
            list(self.classes),
            self.tau,
        )

    def tensors(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.proxies]


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    proxies: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.proxies]

    def __add__(self, other: "Grads") -> "Grads":
        return Grads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
            self.proxies + other.proxies,
        )

    def scale(self, s: float) -> "Grads":
        return Grads([s * w for w in self.weights], [s * b for b in self.biases], s * self.proxies)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Grads":
        return cls(
            [np.zeros_like(w) for w in params.weights],
            [np.zeros_like(b) for b in params.biases],
            np.zeros_like(params.proxies),
        )


def init_params(
    input_dim: int,
    hidden: tuple[int, ...] = (64, 64),
    embed_dim: int = 32,
    tau: float = 0.09,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Kaiming (fan-in) initialisation; no proxies registered yet."""
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = [input_dim, *hidden, embed_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases, np.zeros((0, embed_dim)), [], tau)


def _normalize_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), _EPS)
    return a / norms, norms


def _normalize_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    # d/dh of h/|h|: project out the radial component, then rescale
    return (d_unit - unit * np.sum(d_unit * unit, axis=1, keepdims=True)) / norms


@dataclass
class BatchForward:
    """Forward pass over a batch, with the caches needed for backward."""

    x: np.ndarray
    emb: np.ndarray  # (N, e), unit rows
    logits: np.ndarray  # (N, C)
    pre: list[np.ndarray]
    acts: list[np.ndarray]
    emb_norms: np.ndarray
    unit_proxies: np.ndarray
    proxy_norms: np.ndarray
    tau: float

    @property
    def cosines(self) -> np.ndarray:
        return self.logits * self.tau


@dataclass
class ForwardRecord:
    x: np.ndarray
    z: np.ndarray
    o: np.ndarray


def embed_batch(params: ModelParams, x: np.ndarray):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.input_dim:
        raise ShapeError(f"expected inputs of dimension {params.input_dim}, got {x.shape[1]}")
    acts = [x]
    pre = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w.T + b
        pre.append(a)
        h = a if i == last else np.maximum(a, 0.0)
        acts.append(h)
    emb, norms = _normalize_rows(h)
    return emb, norms, pre, acts


def forward_batch(params: ModelParams, x: np.ndarray) -> BatchForward:
    emb, emb_norms, pre, acts = embed_batch(params, x)
    if params.num_classes:
        unit_p, p_norms = _normalize_rows(params.proxies)
    else:
        unit_p, p_norms = np.zeros((0, params.embed_dim)), np.ones((0, 1))
    logits = emb @ unit_p.T / params.tau
    return BatchForward(acts[0], emb, logits, pre, acts, emb_norms, unit_p, p_norms, params.tau)


def forward(params: ModelParams, x: np.ndarray) -> ForwardRecord:
    fwd = forward_batch(params, np.asarray(x, dtype=float).reshape(1, -1))
    return ForwardRecord(fwd.x[0], fwd.emb[0], fwd.logits[0])


def embed(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return embed_batch(params, x)[0]


def backward(params: ModelParams, fwd: BatchForward, d_logits: np.ndarray | None, d_emb: np.ndarray | None) -> Grads:
    """Parameter gradients given dL/d(logits) and dL/d(embedding)."""
    d_z = np.zeros_like(fwd.emb) if d_emb is None else np.array(d_emb, dtype=float)
    d_proxies = np.zeros_like(params.proxies)
    if d_logits is not None and params.num_classes:
        d_cos = d_logits / fwd.tau
        d_z = d_z + d_cos @ fwd.unit_proxies
        d_unit_p = d_cos.T @ fwd.emb
        d_proxies = _normalize_backward(fwd.unit_proxies, fwd.proxy_norms, d_unit_p)
    d_h = _normalize_backward(fwd.emb, fwd.emb_norms, d_z)

    last = len(params.weights) - 1
    d_w = [None] * len(params.weights)
    d_b = [None] * len(params.weights)
    for i in range(last, -1, -1):
        if i != last:
            d_h = d_h * (fwd.pre[i] > 0)
        d_w[i] = d_h.T @ fwd.acts[i]
        d_b[i] = d_h.sum(axis=0)
        if i:
            d_h = d_h @ params.weights[i]
    return Grads(d_w, d_b, d_proxies)


def softmax_prob(o) -> np.ndarray:
    o = np.asarray(o, dtype=float)
    if o.shape[-1] == 0:
        raise DomainError("softmax over an empty class set")
    e = np.exp(o - o.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict_softmax(p, classes=None):
    """Argmax column; ties go to the lowest class id.

    ``p`` may be a vector or a (N, C) matrix. With ``classes`` given the
    result is a class id, otherwise a column index.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if classes is None:
        out = np.argmax(p, axis=1)
    else:
        classes = np.asarray(classes)
        # visit columns in ascending class id so argmax's first-hit rule breaks ties
        order = np.argsort(classes, kind="stable")
        out = classes[order][np.argmax(p[:, order], axis=1)]
    return int(out[0]) if single else out


@dataclass
class NcmState:
    classes: np.ndarray
    means: np.ndarray


def ncm_fit(buf, params: ModelParams) -> NcmState:
    """Class means of current-model embeddings of the buffered samples."""
    if len(buf) == 0:
        raise DomainError("NCM needs a non-empty buffer")
    x = np.stack([e.sample.features for e in buf.entries])
    y = np.array([e.sample.label for e in buf.entries])
    z = embed(params, x)
    classes = np.unique(y)
    means = np.stack([z[y == c].mean(axis=0) for c in classes])
    return NcmState(classes, means)


def ncm_predict(state: NcmState, z):
    if state is None or len(state.classes) == 0:
        raise DomainError("NCM state has no fitted classes")
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    d2 = ((z[:, None, :] - state.means[None, :, :]) ** 2).sum(axis=2)
    # classes from np.unique are sorted, so argmin's first hit is the lowest id
    out = state.classes[np.argmin(d2, axis=1)]
    return int(out[0]) if single else out


def sgd_step(params: ModelParams, grads: Grads, lr: float) -> ModelParams:
    """In-place descent step ``theta -= lr * grad``; returns ``params``."""
    for p, g in zip(params.tensors(), grads.tensors()):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
    for w, g in zip(params.weights, grads.weights):
        w -= lr * g
    for b, g in zip(params.biases, grads.biases):
        b -= lr * g
    params.proxies -= lr * grads.proxies
    return params


def flatten(tensors) -> np.ndarray:
    return np.concatenate([np.ravel(t) for t in tensors]) if tensors else np.zeros(0)


def unflatten_into(params: ModelParams, vec: np.ndarray) -> ModelParams:
    out = params.copy()
    i = 0
    for t in out.tensors():
        t[...] = vec[i:i + t.size].reshape(t.shape)
        i += t.size
    return out


_MAGIC = b"PRCK"


def save_checkpoint(params: ModelParams, path) -> None:
    """Little-endian binary: magic, tau, class ids, then tagged float64 tensors."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<dI", params.tau, len(params.classes)))
        fh.write(struct.pack(f"<{len(params.classes)}q", *params.classes))
        tensors = [(f"W{i}", w) for i, w in enumerate(params.weights)]
        tensors += [(f"b{i}", b) for i, b in enumerate(params.biases)]
        tensors.append(("P", params.proxies))
        fh.write(struct.pack("<I", len(tensors)))
        for tag, t in tensors:
            raw = tag.encode()
            shape = t.shape if t.ndim == 2 else (t.shape[0], 1)
            fh.write(struct.pack("<B", len(raw)) + raw)
            fh.write(struct.pack("<II", *shape))
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError("not a checkpoint file")
    pos = 4
    tau, n_cls = struct.unpack_from("<dI", data, pos)
    pos += 12
    classes = list(struct.unpack_from(f"<{n_cls}q", data, pos))
    pos += 8 * n_cls
    (n_t,) = struct.unpack_from("<I", data, pos)
    pos += 4
    found = {}
    for _ in range(n_t):
        (ln,) = struct.unpack_from("<B", data, pos)
        pos += 1
        tag = data[pos:pos + ln].decode()
        pos += ln
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(float)
        pos += 8 * rows * cols
        found[tag] = arr
    n_layers = sum(1 for k in found if k.startswith("W"))
    weights = [found[f"W{i}"] for i in range(n_layers)]
    biases = [found[f"b{i}"][:, 0] for i in range(n_layers)]
    return ModelParams(weights, biases, found["P"], classes, tau)
