"""Dense numerical kernels with tape-based reverse-mode differentiation.

Everything in the model is composed from the primitives here. A :class:`Var`
wraps a float64 numpy array. Operations applied while a :class:`Tape` is
active are recorded in creation order; :meth:`Tape.backward` replays their
adjoints in exact reverse order. Outside a tape the same functions simply
compute values, which is what inference and finite differencing use.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

LEAKY_SLOPE = 0.2

_ACTIVE: List["Tape"] = []


class Var:
    """A value node. ``grad`` accumulates adjoints (sum rule across uses)."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: Tuple["Var", ...] = ()
        self.backward_fn: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nested tapes record to the innermost one.
    """

    def __init__(self) -> None:
        self.nodes: List[Var] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, root: Var, seed: Optional[np.ndarray] = None) -> None:
        """Propagate adjoints from ``root`` to every leaf with ``requires_grad``.

        Intermediate adjoints are reset first, so replaying the same tape is
        deterministic; leaf adjoints accumulate into ``Var.grad``.
        """
        for node in self.nodes:
            node.grad = None
        if seed is None:
            seed = np.ones_like(root.value)
        _accumulate(root, np.asarray(seed, dtype=np.float64))
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, grads):
                if pg is not None and parent.requires_grad:
                    _accumulate(parent, pg)


def _accumulate(var: Var, g: np.ndarray) -> None:
    var.grad = g if var.grad is None else var.grad + g


def _record(value: np.ndarray, parents: Sequence[Var], backward_fn: Callable) -> Var:
    out = Var(value)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _ACTIVE[-1].nodes.append(out)
    return out


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, c: float) -> Var:
    return _record(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Var:
    """Batched matrix product with numpy broadcasting (both operands >= 2-D)."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record(av @ bv, (a, b), back)


def affine(x, W, bias=None) -> Var:
    """Row-wise ``x @ W + bias`` over any number of leading axes."""
    x, W = as_var(x), as_var(W)
    xv, Wv = x.value, W.value
    if Wv.ndim != 2 or xv.shape[-1] != Wv.shape[0]:
        raise ValueError(f"affine shape mismatch: x{xv.shape} W{Wv.shape}")
    out = xv @ Wv
    if bias is not None:
        bias = as_var(bias)
        if bias.shape != (Wv.shape[1],):
            raise ValueError(f"affine bias shape {bias.shape} does not match W{Wv.shape}")
        out = out + bias.value
    a, b = Wv.shape

    def back(g):
        g2 = g.reshape(-1, b)
        gx = g @ Wv.T
        gW = xv.reshape(-1, a).T @ g2
        if bias is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if bias is None else (x, W, bias)
    return _record(out, parents, back)


# ---------------------------------------------------------------- activations


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Var) -> Var:
    y = _sigmoid(x.value)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(x: Var, slope: float = LEAKY_SLOPE) -> Var:
    v = x.value
    d = np.where(v > 0, 1.0, slope)
    return _record(v * d, (x,), lambda g: (g * d,))


# ---------------------------------------------------------------- structure


def reshape(x: Var, shape: Tuple[int, ...]) -> Var:
    old = x.shape
    return _record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Var, axes: Sequence[int]) -> Var:
    inv = np.argsort(axes)
    return _record(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Var, key) -> Var:
    """Basic (slice/integer) indexing."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _record(x.value[key], (x,), back)


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([x.value for x in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence[Var], axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]
    n = len(xs)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(np.stack([x.value for x in xs], axis=axis), xs, back)


def sum(x: Var, axis=None) -> Var:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(x.value, axis=axis), (x,), back)


def mean(x: Var, axis: int) -> Var:
    n = x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


def where(cond: np.ndarray, a: Var, b: Var) -> Var:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is constant data."""
    a, b = as_var(a), as_var(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _record(np.where(cond, a.value, b.value), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)))


def masked_softmax(logits: Var, mask: np.ndarray) -> Var:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0.

    ``mask`` broadcasts against ``logits``. Every row must keep at least one entry.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no permitted entries")
    v = np.where(mask, logits.value, -np.inf)
    v = v - v.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(v), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (logits,), back)


# ---------------------------------------------------------------- recurrence


def lstm_cell(x: Var, h_prev: Var, c_prev: Var, W: Var, b: Var) -> Tuple[Var, Var]:
    """Standard LSTM step. ``W`` is ``(in + H, 4H)`` with gate blocks ordered i, f, g, o."""
    H = h_prev.shape[-1]
    if W.shape != (x.shape[-1] + H, 4 * H):
        raise ValueError(f"lstm_cell: W{W.shape} incompatible with x{x.shape}, h{h_prev.shape}")
    gates = affine(concat([x, h_prev], axis=-1), W, b)
    i = sigmoid(gates[..., 0:H])
    f = sigmoid(gates[..., H:2 * H])
    g = tanh(gates[..., 2 * H:3 * H])
    o = sigmoid(gates[..., 3 * H:4 * H])
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


# ---------------------------------------------------------------- losses


def mse_masked(pred: Var, target: np.ndarray, mask: np.ndarray) -> Var:
    """Sum of squared errors over ``mask``-true entries (mask broadcasts to ``pred``)."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mse_masked: pred{pred.shape} vs target{target.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    diff = np.where(m, pred.value - target, 0.0)
    return _record(np.sum(diff * diff), (pred,), lambda g: (2.0 * g * diff,))


def bce_logits(logit: Var, target) -> Var:
    """Summed binary cross-entropy on logits, stable log-sum-exp form."""
    t = np.asarray(target, dtype=np.float64)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("bce_logits: targets must be 0 or 1")
    t = np.broadcast_to(t, logit.shape)
    z = logit.value
    val = np.sum(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z))))
    p = _sigmoid(z)
    return _record(np.asarray(val), (logit,), lambda g: (g * (p - t),))


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    learning_rate: float = 5e-5
    decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def decay_learning_rate(self) -> None:
        self.learning_rate *= self.decay


def adam_step(params: Mapping[str, Var], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update applied to ``params`` values; returns ``state``."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.value = p.value - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    passed: bool
    errors: Dict[str, float]
    tolerance: float

    @property
    def worst(self) -> Tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def __str__(self) -> str:
        lines = [f"{'PASS' if e < self.tolerance else 'FAIL'} {n}: rel_err={e:.3e}"
                 for n, e in self.errors.items()]
        return "\n".join(lines)


def grad_check(f: Callable[..., Var], inputs: Mapping[str, np.ndarray], tolerance: float = 1e-4,
               step: float = 1e-5, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare tape adjoints of scalar ``f(**vars)`` against central differences.

    The error per input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``
    with ``floor = 1e-6 * max(|f|, 1)``: the central difference cannot resolve
    gradients below roughly ``eps * |f| / step``, so components that small are
    judged on an absolute scale instead of a relative one. When ``max_coords`` is set, only that many randomly chosen coordinates of
    each input are differenced.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    vars_ = {k: Var(np.array(v, dtype=np.float64), requires_grad=True) for k, v in inputs.items()}
    with Tape() as tape:
        out = f(**vars_)
    if out.value.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    tape.backward(out)
    floor = 1e-6 * max(abs(float(out.value)), 1.0)

    errors = {}
    for name, var in vars_.items():
        analytic = var.grad if var.grad is not None else np.zeros_like(var.value)
        flat = var.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.zeros(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            fp = float(f(**vars_).value)
            flat[c] = orig - step
            fm = float(f(**vars_).value)
            flat[c] = orig
            numeric[j] = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[coords]
        scale_ = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
        errors[name] = float(np.max(np.abs(a - numeric), initial=0.0) / scale_)
    passed = all(e < tolerance for e in errors.values())
    return GradCheckReport(passed, errors, tolerance)


# ---------------------------------------------------------------- array record I/O

_MAGIC = b"TRIPODARR1\n"


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write named float64 arrays plus a JSON ``meta`` block.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header
    (``meta`` and per-array name/shape/offset), then the arrays' raw
    little-endian float64 bytes in header order. Output is byte-deterministic.
    """
    entries = []
    blobs = []
    offset = 0
    for name in arrays:
        a = np.asarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a tripod array record")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=start).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def check_finite(values: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(v)) for v in values)
