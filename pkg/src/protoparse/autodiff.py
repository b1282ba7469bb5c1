"""Small reverse-mode automatic differentiation over numpy float64 arrays.

Only what the parser needs: vectors and matrices, a handful of pointwise
functions, a fused LSTM cell and a masked softmax whose denominator can
carry an extra constant.  Every op records its parents and a closure that
maps the output gradient to parent gradients; :func:`backward` walks the
graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteInput, NonScalarLoss, ShapeMismatch

DTYPE = np.float64
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self.grad = None

    __add__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __mul__ = lambda self, other: mul(self, other)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)


def tensor(value, requires_grad=False, name=None) -> Tensor:
    arr = np.array(value, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("tensor contains NaN or inf")
    return Tensor(arr, requires_grad=requires_grad, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else tensor(value)


def _make(value, parents, backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad or p.parents for p in parents):
        return Tensor(value, parents, backward_fn)
    return Tensor(value)


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into ``leaf.grad`` for every leaf that
    requires grad.  Calling twice without zeroing adds up."""
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not (parent.requires_grad or parent.parents):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementary ops

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.value * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.value + c, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix/vector products for 1-D and 2-D operands."""
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")
    out = av @ bv

    def back(g):
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        return g * bv, g * av

    return _make(out, (a, b), back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "dot")
    return matmul(a, b)


def transpose(a: Tensor) -> Tensor:
    return _make(a.value.T, (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.value.shape[0] for p in parts]
    out = np.concatenate([p.value for p in parts])
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(out, tuple(parts), back)


def stack(rows: Sequence[Tensor]) -> Tensor:
    out = np.stack([r.value for r in rows])
    return _make(out, tuple(rows), lambda g: tuple(g[i] for i in range(len(rows))))


def slice_(a: Tensor, start: int, stop: int) -> Tensor:
    def back(g):
        full = np.zeros_like(a.value)
        full[start:stop] = g
        return (full,)

    return _make(a.value[start:stop], (a,), back)


def row(m: Tensor, i: int) -> Tensor:
    def back(g):
        full = np.zeros_like(m.value)
        full[i] = g
        return (full,)

    return _make(m.value[i], (m,), back)


def rows(m: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(m.value)
        np.add.at(full, idx, g)
        return (full,)

    return _make(m.value[idx], (m,), back)


def select_rows(a: Tensor, b: Tensor, mask: Sequence[int]) -> Tensor:
    """Row i of ``b`` where mask[i] is 1, row i of ``a`` otherwise."""
    _check_same(a, b, "select_rows")
    m = np.asarray(mask, dtype=bool)
    if m.shape != (a.value.shape[0],):
        raise ShapeMismatch(f"select_rows: mask of length {m.shape} for {a.shape[0]} rows")
    col = m[:, None]
    return _make(np.where(col, b.value, a.value), (a, b),
                 lambda g: (np.where(col, 0.0, g), np.where(col, g, 0.0)))


def mul_scalar(s: Tensor, v: Tensor) -> Tensor:
    """A 0-d tensor times a tensor."""
    if s.value.size != 1:
        raise ShapeMismatch(f"mul_scalar: expected a scalar, got {s.shape}")
    sv, vv = s.value, v.value
    return _make(sv * vv, (s, v), lambda g: (np.array((g * vv).sum()), g * sv))


def normalize(a: Tensor) -> Tensor:
    """a / sum(a) for a vector with positive sum."""
    total = a.value.sum()
    if not total > 0:
        raise NonFiniteInput("normalize needs a positive sum")
    p = a.value / total
    return _make(p, (a,), lambda g: ((g - np.dot(g, p)) / total,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.value)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.value)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    v = a.value
    return _make(np.log(v), (a,), lambda g: (g / v,))


def sum_(a: Tensor) -> Tensor:
    return _make(np.array(a.value.sum()), (a,), lambda g: (np.full_like(a.value, g),))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    if len(terms) == 1:
        return terms[0]
    out = terms[0].value.copy()
    for t in terms[1:]:
        _check_same(terms[0], t, "add_n")
        out = out + t.value
    return _make(out, tuple(terms), lambda g: tuple(g for _ in terms))


def mean(vectors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean over a non-empty set of equally shaped tensors."""
    if not vectors:
        raise ShapeMismatch("mean of an empty set")
    k = len(vectors)
    return scale(add_n(list(vectors)), 1.0 / k)


def abs_sum(a: Tensor) -> Tensor:
    """sum_i |a_i| with subgradient 0 at 0."""
    v = a.value
    return _make(np.array(np.abs(v).sum()), (a,), lambda g: (g * np.sign(v),))


def pick(a: Tensor, i: int) -> Tensor:
    """Scalar element ``a[i]``."""
    def back(g):
        full = np.zeros_like(a.value)
        full[i] = g
        return (full,)

    return _make(np.array(a.value[i]), (a,), back)


# ---------------------------------------------------------------------------
# softmax family

def _check_finite(v: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput(f"{what} contains NaN or inf")


def _log_normalizer(z: np.ndarray, k: float) -> float:
    m = z.max()
    if k > 0:
        lk = np.log(k)
        m = max(m, lk)
        return m + np.log(np.exp(z - m).sum() + np.exp(lk - m))
    return m + np.log(np.exp(z - m).sum())


def softmax(a: Tensor, k: float = 0.0) -> Tensor:
    """exp(z_i) / (sum_j exp(z_j) + k), stabilised by the running max."""
    if k < 0:
        raise ValueError("smoothing constant must be non-negative")
    z = a.value
    _check_finite(z, "softmax input")
    p = np.exp(z - _log_normalizer(z, k))

    def back(g):
        return (p * (g - np.dot(g, p)),)

    return _make(p, (a,), back)


def log_softmax(a: Tensor, k: float = 0.0) -> Tensor:
    if k < 0:
        raise ValueError("smoothing constant must be non-negative")
    z = a.value
    _check_finite(z, "log_softmax input")
    lse = _log_normalizer(z, k)
    p = np.exp(z - lse)

    def back(g):
        return (g - p * g.sum(),)

    return _make(z - lse, (a,), back)


# ---------------------------------------------------------------------------
# LSTM

def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output).

    ``W`` has shape (4H, len(x) + H) and acts on [x; h].
    """
    H = h.value.shape[0]
    if W.value.shape != (4 * H, x.value.shape[0] + H) or b.value.shape != (4 * H,):
        raise ShapeMismatch(f"lstm_cell: W {W.shape}, b {b.shape}, x {x.shape}, h {h.shape}")
    xh = np.concatenate([x.value, h.value])
    z = W.value @ xh + b.value
    i = _sigmoid(z[:H])
    f = _sigmoid(z[H:2 * H])
    gg = np.tanh(z[2 * H:3 * H])
    o = _sigmoid(z[3 * H:])
    c_new = f * c.value + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    nx = x.value.shape[0]
    c_old = c.value

    def back(gout):
        gh, gc = gout[:H], gout[H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * c_old * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ])
        dxh = W.value.T @ dz
        return dxh[:nx], dxh[nx:], dc * f, np.outer(dz, xh), dz

    both = _make(np.concatenate([h_new, c_new]), (x, h, c, W, b), back)
    return slice_(both, 0, H), slice_(both, H, 2 * H)


# ---------------------------------------------------------------------------
# parameters

class ParameterStore:
    """Named, seeded parameters.

    Matrices start uniform in ±sqrt(6 / (fan_in + fan_out)); embedding tables
    uniform in ±0.1; biases at zero.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.params: dict[str, Tensor] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def names(self) -> list[str]:
        return list(self.params)

    def _put(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.ascontiguousarray(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def glorot(self, name: str, shape: tuple[int, ...]) -> Tensor:
        fan_out, fan_in = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return self._put(name, self.rng.uniform(-a, a, size=shape))

    def embedding(self, name: str, shape: tuple[int, ...], scale: float = 0.1) -> Tensor:
        return self._put(name, self.rng.uniform(-scale, scale, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._put(name, np.zeros(shape, dtype=DTYPE))

    def set(self, name: str, value: np.ndarray) -> Tensor:
        """Replace (or create) a parameter's value, keeping it trainable."""
        value = np.ascontiguousarray(value, dtype=DTYPE)
        if name in self.params:
            self.params[name].value = value
            self.params[name].grad = None
            return self.params[name]
        return self._put(name, value)

    def append_rows(self, name: str, new_rows: np.ndarray) -> None:
        t = self.params[name]
        t.value = np.ascontiguousarray(np.vstack([t.value, new_rows]), dtype=DTYPE)
        t.grad = None

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].value = v.copy()

    def save(self, directory: str | Path, hyperparameters: dict | None = None) -> None:
        """JSON manifest plus one little-endian float64 blob per parameter."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, t in self.params.items():
            fname = f"{name}.f64"
            (d / fname).write_bytes(t.value.astype("<f8").tobytes())
            entries.append({"name": name, "shape": list(t.value.shape), "file": fname})
        manifest = {"seed": self.seed, "hyperparameters": hyperparameters or {}, "parameters": entries}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> tuple["ParameterStore", dict]:
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        store = cls(manifest["seed"])
        for e in manifest["parameters"]:
            arr = np.frombuffer((d / e["file"]).read_bytes(), dtype="<f8").reshape(e["shape"])
            store._put(e["name"], arr.astype(DTYPE))
        return store, manifest.get("hyperparameters", {})


class Adam:
    """Adam with an exponential learning-rate decay that starts after
    ``decay_start`` epochs (epochs are 1-based)."""

    def __init__(self, lr=0.0025, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay_rate=1.0, decay_start=0, clip_norm=None):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay_rate = decay_rate
        self.decay_start = decay_start
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_rate ** max(0, epoch - self.decay_start)

    def step(self, store: ParameterStore, epoch: int = 1) -> None:
        self.t += 1
        lr = self.lr_at(epoch)
        grads = {n: t.grad for n, t in store if t.grad is not None}
        if self.clip_norm is not None and grads:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {n: g * (self.clip_norm / norm) for n, g in grads.items()}
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, t in store:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            if m is None or m.shape != g.shape:
                m = _resize(m, g.shape)
                self.v[name] = _resize(self.v.get(name), g.shape)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            t.value = t.value - lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def _resize(arr, shape):
    out = np.zeros(shape, dtype=DTYPE)
    if arr is not None:
        sl = tuple(slice(0, min(a, b)) for a, b in zip(arr.shape, shape))
        out[sl] = arr[sl]
    return out


def grad_check(
    f: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    max_per_param: int | None = None,
    seed: int = 0,
    extended: bool = True,
) -> float:
    """Largest relative error between backprop and central differences.

    The error of one entry is |a - n| / max(1e-8, |a| + |n|).  With
    ``max_per_param`` only that many randomly chosen entries of each
    parameter are probed.

    Backprop runs in float64.  With ``extended`` the finite differences are
    evaluated in numpy's long double: at eps = 1e-5 a float64 loss of order
    10 leaves roughly 1e-10 of round-off in each difference quotient, which
    swamps entries whose true gradient is below 1e-8.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    store.zero_grad()
    loss = f(store)
    backward(loss)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value)) for n, t in store}
    store.zero_grad()
    snap = store.snapshot()
    ftype = np.longdouble if extended else DTYPE
    h = ftype(eps)
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for _, t in store:
            t.value = t.value.astype(ftype)
        for name in (names if names is not None else store.names()):
            flat = store[name].value.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
            for j in idx:
                orig = flat[j]
                with no_grad():
                    flat[j] = orig + h
                    fp = f(store).value
                    flat[j] = orig - h
                    fm = f(store).value
                flat[j] = orig
                num = float((fp - fm) / (2 * h))
                ana = float(analytic[name].reshape(-1)[j])
                err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
                worst = max(worst, err)
    finally:
        store.restore(snap)
    return worst
