"""Minimal float64 neural-network substrate.

Dense layers, LSTM cells (single step and masked batched sequences), embeddings,
softmax / cross-entropy, hand-written reverse-mode gradients, Fisher-vector
products and a binary parameter checkpoint format.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

MAGIC = b"MDRL"
FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "tanh", "identity")


class ConfigurationError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# parameter storage


@dataclass
class ParamVector:
    """Flat float64 vector with named, contiguous sub-ranges."""

    values: np.ndarray
    layout: list[tuple[str, int, tuple[int, ...]]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        offset = 0
        names = set()
        for name, off, shape in self.layout:
            if off != offset:
                raise ConfigurationError(f"layout entry {name!r} at {off}, expected {offset}")
            if name in names:
                raise ConfigurationError(f"duplicate layout entry {name!r}")
            names.add(name)
            offset += int(np.prod(shape, dtype=np.int64))
        if offset != self.values.size:
            raise ConfigurationError(f"layout covers {offset} values, vector has {self.values.size}")
        self._index = {name: (off, shape) for name, off, shape in self.layout}

    @classmethod
    def zeros(cls, shapes: Iterable[tuple[str, Sequence[int]]]) -> "ParamVector":
        layout = []
        offset = 0
        for name, shape in shapes:
            shape = tuple(int(s) for s in shape)
            layout.append((name, offset, shape))
            offset += int(np.prod(shape, dtype=np.int64))
        return cls(np.zeros(offset), layout)

    def __len__(self) -> int:
        return self.values.size

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> np.ndarray:
        """Writable view of one named tensor."""
        off, shape = self._index[name]
        size = int(np.prod(shape, dtype=np.int64))
        return self.values[off:off + size].reshape(shape)

    def names(self) -> list[str]:
        return [name for name, _, _ in self.layout]

    def span(self, name: str) -> slice:
        off, shape = self._index[name]
        return slice(off, off + int(np.prod(shape, dtype=np.int64)))

    def mask(self, prefix: str) -> np.ndarray:
        """Boolean mask over coordinates whose tensor name starts with `prefix`."""
        m = np.zeros(self.values.size, dtype=bool)
        for name in self.names():
            if name.startswith(prefix):
                m[self.span(name)] = True
        return m

    def like(self, values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ConfigurationError("value vector does not match layout")
        return ParamVector(values, list(self.layout))

    def copy(self) -> "ParamVector":
        return self.like(self.values.copy())

    def zeros_like(self) -> "ParamVector":
        return self.like(np.zeros_like(self.values))

    def checksum(self, prefix: str = "") -> str:
        """Content hash of every tensor whose name starts with `prefix`."""
        h = hashlib.sha256()
        for name in self.names():
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self[name]).astype("<f8").tobytes())
        return h.hexdigest()


def concat_params(*pvs: ParamVector) -> ParamVector:
    shapes = [(name, shape) for pv in pvs for name, _, shape in pv.layout]
    out = ParamVector.zeros(shapes)
    out.values[:] = np.concatenate([pv.values for pv in pvs]) if pvs else np.zeros(0)
    return out


def save_params(path: str | Path, pv: ParamVector) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(pv.layout))]
    for name, off, shape in pv.layout:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<QI", off, len(shape)))
        parts.append(struct.pack(f"<{len(shape)}Q", *shape))
    parts.append(struct.pack("<Q", pv.values.size))
    parts.append(pv.values.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path: str | Path) -> ParamVector:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ConfigurationError(f"{path}: not a parameter checkpoint")
    version, n_entries = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    layout = []
    for _ in range(n_entries):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        off, ndim = struct.unpack_from("<QI", data, pos)
        pos += 12
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        layout.append((name, off, tuple(shape)))
    (size,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    values = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64)
    return ParamVector(values, layout)


# ---------------------------------------------------------------------------
# initialisation


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, scale: float = 1.0) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return scale * rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_dense(pv: ParamVector, name: str, rng: np.random.Generator, scale: float = 1.0) -> None:
    w = pv[name + ".weight"]
    w[...] = glorot_uniform(rng, w.shape[0], w.shape[1], scale)
    pv[name + ".bias"][...] = 0.0


def init_lstm(pv: ParamVector, name: str, rng: np.random.Generator, forget_bias: float = 1.0) -> None:
    w = pv[name + ".weight"]
    h = w.shape[0] // 4
    w[...] = glorot_uniform(rng, w.shape[0], w.shape[1])
    b = pv[name + ".bias"]
    b[...] = 0.0
    b[h:2 * h] = forget_bias


def dense_shapes(name: str, n_in: int, n_out: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(name + ".weight", (n_out, n_in)), (name + ".bias", (n_out,))]


def lstm_shapes(name: str, n_in: int, n_hidden: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(name + ".weight", (4 * n_hidden, n_in + n_hidden)), (name + ".bias", (4 * n_hidden,))]


# ---------------------------------------------------------------------------
# layers


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ConfigurationError("dense weights/bias shapes inconsistent")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def activation_grad(z: np.ndarray, y: np.ndarray, activation: str) -> np.ndarray:
    """d act / d z given pre-activation z and output y."""
    if activation == "relu":
        return (z > 0).astype(np.float64)
    if activation == "tanh":
        return 1.0 - y * y
    return np.ones_like(z)


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.n_in:
        raise ConfigurationError(f"dense input width {x.shape[-1]} != {layer.n_in}")
    return activate(x @ layer.weights.T + layer.bias, layer.activation)


def dense_backward(x: np.ndarray, z: np.ndarray, y: np.ndarray, dy: np.ndarray, layer: DenseLayer):
    """Returns (dx, dW, db) for a batch x of shape (n, in)."""
    dz = dy * activation_grad(z, y, layer.activation)
    return dz @ layer.weights, dz.T @ x, dz.sum(axis=0)


@dataclass
class EmbeddingTable:
    rows: np.ndarray

    @property
    def vocab_size(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    def lookup(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ConfigurationError("embedding index out of range")
        return self.rows[ids]


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LstmCell:
    """Gate order in the stacked weight matrix: input, forget, output, candidate."""

    weight: np.ndarray  # (4h, in + h)
    bias: np.ndarray  # (4h,)

    def __post_init__(self):
        if self.weight.shape[0] % 4 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError("LSTM gate parameters inconsistent")
        if self.weight.shape[1] <= self.n_hidden:
            raise ConfigurationError("LSTM weight narrower than hidden width")

    @property
    def n_hidden(self) -> int:
        return self.weight.shape[0] // 4

    @property
    def n_in(self) -> int:
        return self.weight.shape[1] - self.n_hidden

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


def _gates(cell: LstmCell, x: np.ndarray, h: np.ndarray):
    n = cell.n_hidden
    z = np.concatenate([x, h], axis=-1) @ cell.weight.T + cell.bias
    i = sigmoid(z[..., :n])
    f = sigmoid(z[..., n:2 * n])
    o = sigmoid(z[..., 2 * n:3 * n])
    g = np.tanh(z[..., 3 * n:])
    return i, f, o, g


def lstm_step(x: np.ndarray, h: np.ndarray, c: np.ndarray, cell: LstmCell):
    x, h, c = (np.asarray(a, dtype=np.float64) for a in (x, h, c))
    if x.shape[-1] != cell.n_in or h.shape[-1] != cell.n_hidden or c.shape[-1] != cell.n_hidden:
        raise ConfigurationError("LSTM step widths inconsistent with cell")
    i, f, o, g = _gates(cell, x, h)
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


@dataclass
class SequenceCache:
    xh: list = field(default_factory=list)
    gates: list = field(default_factory=list)
    c_prev: list = field(default_factory=list)
    c_new: list = field(default_factory=list)
    mask: np.ndarray | None = None
    h_drop: np.ndarray | None = None


def lstm_sequence(cell: LstmCell, x: np.ndarray, mask: np.ndarray, h0=None, c0=None, h_drop=None):
    """Run an LSTM over x (T, B, in).

    Where mask[t, b] == 0 the state is carried through unchanged, so with
    left-aligned padding the state at T-1 is the state after the last valid step.
    `h_drop` (T, B, hidden), if given, scales the recurrent input to the gates
    (recurrent dropout); the carried state itself is untouched.
    Returns (H, C, cache) with H, C of shape (T, B, hidden).
    """
    T, B, _ = x.shape
    n = cell.n_hidden
    h = np.zeros((B, n)) if h0 is None else h0
    c = np.zeros((B, n)) if c0 is None else c0
    H = np.empty((T, B, n))
    C = np.empty((T, B, n))
    cache = SequenceCache(mask=mask)
    cache.h_drop = h_drop
    for t in range(T):
        xh = np.concatenate([x[t], h if h_drop is None else h * h_drop[t]], axis=1)
        z = xh @ cell.weight.T + cell.bias
        i = sigmoid(z[:, :n])
        f = sigmoid(z[:, n:2 * n])
        o = sigmoid(z[:, 2 * n:3 * n])
        g = np.tanh(z[:, 3 * n:])
        cn = f * c + i * g
        hn = o * np.tanh(cn)
        m = mask[t][:, None]
        cache.xh.append(xh)
        cache.gates.append((i, f, o, g))
        cache.c_prev.append(c)
        cache.c_new.append(cn)
        h = m * hn + (1.0 - m) * h
        c = m * cn + (1.0 - m) * c
        H[t] = h
        C[t] = c
    return H, C, cache


def lstm_sequence_backward(cell: LstmCell, cache: SequenceCache, dH: np.ndarray, dh_last=None, dc_last=None):
    """Backprop through `lstm_sequence`.

    dH: gradient w.r.t. every returned H[t]. Returns (dx, dW, db, dh0, dc0).
    """
    T = len(cache.xh)
    n = cell.n_hidden
    B = dH.shape[1]
    n_in = cell.n_in
    dW = np.zeros_like(cell.weight)
    db = np.zeros_like(cell.bias)
    dx = np.empty((T, B, n_in))
    dh = np.zeros((B, n)) if dh_last is None else dh_last.copy()
    dc = np.zeros((B, n)) if dc_last is None else dc_last.copy()
    for t in range(T - 1, -1, -1):
        dh = dh + dH[t]
        m = cache.mask[t][:, None]
        i, f, o, g = cache.gates[t]
        cn = cache.c_new[t]
        tc = np.tanh(cn)
        dhn = m * dh
        dcn = m * dc + dhn * o * (1.0 - tc * tc)
        do = dhn * tc
        di = dcn * g
        dg = dcn * i
        df = dcn * cache.c_prev[t]
        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            do * o * (1.0 - o),
            dg * (1.0 - g * g),
        ], axis=1)
        dW += dz.T @ cache.xh[t]
        db += dz.sum(axis=0)
        dxh = dz @ cell.weight
        dx[t] = dxh[:, :n_in]
        dh_in = dxh[:, n_in:] if cache.h_drop is None else dxh[:, n_in:] * cache.h_drop[t]
        dh = dh_in + (1.0 - m) * dh
        dc = dcn * f + (1.0 - m) * dc
    return dx, dW, db, dh, dc


# ---------------------------------------------------------------------------
# softmax family


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, labels]
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    return loss, dlogits


# ---------------------------------------------------------------------------
# gradients


class Loss(Protocol):
    def value_and_grad(self, theta: ParamVector, batch) -> tuple[float, np.ndarray]: ...


class QuadraticLoss:
    """0.5 * ||theta||^2; the gradient is theta itself."""

    def value_and_grad(self, theta: ParamVector, batch=None):
        return 0.5 * float(theta.values @ theta.values), theta.values.copy()


def grad(loss: Loss, theta: ParamVector, batch=None) -> ParamVector:
    value, g = loss.value_and_grad(theta, batch)
    if not np.isfinite(value):
        raise NumericError("non-finite loss value")
    check_finite(theta.like(g))
    return theta.like(g)


def check_finite(pv: ParamVector, what: str = "gradient") -> None:
    if np.all(np.isfinite(pv.values)):
        return
    for name in pv.names():
        if not np.all(np.isfinite(pv[name])):
            raise NumericError(f"non-finite {what} in layer {name}")


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central finite differences of a scalar function at the given coordinates."""
    x = np.array(x, dtype=np.float64)
    coords = range(x.size) if coords is None else coords
    out = np.zeros(x.size)
    for k in coords:
        old = x[k]
        x[k] = old + eps
        fp = f(x)
        x[k] = old - eps
        fm = f(x)
        x[k] = old
        out[k] = (fp - fm) / (2 * eps)
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# ---------------------------------------------------------------------------
# Fisher-vector products for categorical policies


class CategoricalModel(Protocol):
    """A model producing per-state categorical distributions from parameters."""

    def fisher_terms(self, theta: np.ndarray, states) -> list[tuple[np.ndarray, Callable, Callable]]:
        """[(probs (n, k), jvp: v -> dlogits (n, k), vjp: dlogits -> dtheta), ...]"""
        ...


def fisher_vector_product(model: CategoricalModel, theta: np.ndarray, states, v: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """(F + damping I) v, with F the state-averaged Fisher of the action distributions.

    F is the Hessian of mean KL(pi_old || pi_theta) at theta = theta_old. Its
    product with v is the derivative of the KL gradient along v: the logit JVP is
    pushed through the softmax KL curvature diag(p) - p p^T and pulled back with
    the logit VJP.
    """
    if damping < 0:
        raise ConfigurationError("damping must be non-negative")
    terms = model.fisher_terms(theta, states)
    n_total = sum(p.shape[0] for p, _, _ in terms)
    if n_total == 0:
        raise ConfigurationError("empty state batch")
    out = damping * np.asarray(v, dtype=np.float64)
    for p, jvp, vjp in terms:
        dz = jvp(v)
        mdz = p * dz - p * np.sum(p * dz, axis=1, keepdims=True)
        out = out + vjp(mdz / n_total)
    return out


def fvp_finite_difference(kl_grad: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, v: np.ndarray,
                          damping: float = 0.0, eps: float = 1e-5) -> np.ndarray:
    """(F + damping I) v by central differences of the KL gradient (old policy held fixed)."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.zeros_like(v)
    u = v / norm
    hv = (kl_grad(theta + eps * u) - kl_grad(theta - eps * u)) / (2 * eps)
    return norm * hv + damping * v


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values: np.ndarray, g: np.ndarray) -> None:
        """In-place descent step on `values`."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        values -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * values)
