"""Small reverse-mode differentiation kernel over numpy arrays.

Every operation appends its output node to a :class:`Tape`; calling
:meth:`Tape.backward` walks the tape in reverse and accumulates adjoints.
Only the primitives the retrieval losses and the MLP need are provided.
Operations accept 1-D vectors or 2-D row batches.

Non-differentiable points (ReLU at zero, distance at coincidence, the log
floor) contribute a *branch signature* to the tape so that :func:`grad_check`
can skip coordinates whose finite-difference stencil straddles a kink.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

KINK_TOL = 1e-7
LOG_FLOOR = 1e-12


class Tape:
    def __init__(self):
        self.nodes = []
        self.signatures = []

    def param(self, value) -> "Var":
        return Var(np.array(value, dtype=np.float64), self, requires_grad=True)

    def const(self, value) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self)

    def backward(self, out: "Var"):
        if out.value.size != 1:
            raise ValueError("backward needs a scalar output")
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def signature(self) -> np.ndarray:
        if not self.signatures:
            return np.zeros(0, dtype=np.int8)
        return np.concatenate([s.ravel() for s in self.signatures])


class Var:
    __slots__ = ("value", "grad", "tape", "requires_grad", "_backward")
    __array_priority__ = 100

    def __init__(self, value, tape=None, requires_grad=False):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var({self.value!r})"

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
        return mul(self, -1.0)


def _tape_of(args):
    for a in args:
        if isinstance(a, Var) and a.tape is not None:
            return a.tape
    return Tape()


def _as_var(x, tape):
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64), tape)


def _accum(var, g):
    if not var.requires_grad:
        return
    g = _unbroadcast(g, var.value.shape)
    var.grad = g if var.grad is None else var.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _node(value, inputs, backward):
    """Create an output node; record it only if any input needs a gradient."""
    tape = _tape_of(inputs)
    out = Var(value, tape)
    if any(isinstance(a, Var) and a.requires_grad for a in inputs):
        out.requires_grad = True
        out._backward = backward
        tape.nodes.append(out)
    return out


def add(a, b) -> Var:
    tape = _tape_of((a, b))
    a, b = _as_var(a, tape), _as_var(b, tape)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.value + b.value, (a, b), backward)


def sub(a, b) -> Var:
    tape = _tape_of((a, b))
    a, b = _as_var(a, tape), _as_var(b, tape)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.value - b.value, (a, b), backward)


def mul(a, b) -> Var:
    tape = _tape_of((a, b))
    a, b = _as_var(a, tape), _as_var(b, tape)

    def backward(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _node(a.value * b.value, (a, b), backward)


def square(a) -> Var:
    a = _as_var(a, _tape_of((a,)))

    def backward(g):
        _accum(a, 2.0 * g * a.value)

    return _node(a.value * a.value, (a,), backward)


def total(a, axis=None) -> Var:
    """Sum over ``axis`` (all entries when ``None``)."""
    a = _as_var(a, _tape_of((a,)))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape).copy())

    return _node(np.sum(a.value, axis=axis), (a,), backward)


def mean(a, axis=None) -> Var:
    a = _as_var(a, _tape_of((a,)))
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(total(a, axis), 1.0 / n)


def reshape(a, shape) -> Var:
    a = _as_var(a, _tape_of((a,)))

    def backward(g):
        _accum(a, g.reshape(a.value.shape))

    return _node(a.value.reshape(shape), (a,), backward)


def affine(x, W, b) -> Var:
    """``W x + b`` for a vector ``x`` or row-wise for a batch of rows."""
    tape = _tape_of((x, W, b))
    x, W, b = _as_var(x, tape), _as_var(W, tape), _as_var(b, tape)
    if W.value.ndim != 2 or b.value.shape != (W.value.shape[0],) or x.value.shape[-1] != W.value.shape[1]:
        raise ValueError(
            f"affine shape mismatch: x{x.value.shape}, W{W.value.shape}, b{b.value.shape}"
        )

    def backward(g):
        _accum(x, g @ W.value)
        if g.ndim == 1:
            _accum(W, np.outer(g, x.value))
        else:
            _accum(W, g.T @ x.value)
        _accum(b, g)

    return _node(x.value @ W.value.T + b.value, (x, W, b), backward)


def relu(x) -> Var:
    tape = _tape_of((x,))
    x = _as_var(x, tape)
    z = x.value
    sig = np.sign(z).astype(np.int8)
    sig[np.abs(z) < KINK_TOL] = 0
    tape.signatures.append(sig)
    active = z > 0

    def backward(g):
        _accum(x, g * active)

    return _node(np.where(active, z, 0.0), (x,), backward)


def euclidean_distance(u, v) -> Var:
    """Distance along the last axis; the gradient at ``u == v`` is zero."""
    tape = _tape_of((u, v))
    u, v = _as_var(u, tape), _as_var(v, tape)
    if u.value.shape[-1] != v.value.shape[-1]:
        raise ValueError(f"length mismatch: {u.value.shape} vs {v.value.shape}")
    diff = u.value - v.value
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    tape.signatures.append((d < KINK_TOL).astype(np.int8))
    safe = np.where(d > 0, d, 1.0)
    unit = np.where((d > 0)[..., None], diff / safe[..., None], 0.0)

    def backward(g):
        gu = g[..., None] * unit
        _accum(u, gu)
        _accum(v, -gu)

    return _node(d, (u, v), backward)


def pairwise_distance(X, A) -> Var:
    """``D[i, j] = ||X[i] - A[j]||`` for row batches ``X`` (n, m), ``A`` (k, m)."""
    tape = _tape_of((X, A))
    X, A = _as_var(X, tape), _as_var(A, tape)
    if X.value.ndim != 2 or A.value.ndim != 2 or X.value.shape[1] != A.value.shape[1]:
        raise ValueError(f"pairwise_distance shape mismatch: {X.value.shape} vs {A.value.shape}")
    diff = X.value[:, None, :] - A.value[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    tape.signatures.append((d < KINK_TOL).astype(np.int8))
    safe = np.where(d > 0, d, 1.0)
    unit = np.where((d > 0)[..., None], diff / safe[..., None], 0.0)

    def backward(g):
        gu = g[..., None] * unit
        _accum(X, gu.sum(axis=1))
        _accum(A, -gu.sum(axis=0))

    return _node(d, (X, A), backward)


def _norms(x, what):
    n = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(n == 0):
        raise ValueError(f"cosine similarity of a zero-norm {what}")
    return n


def cosine_similarity(u, v) -> Var:
    """Cosine of the angle between ``u`` and ``v`` along the last axis."""
    tape = _tape_of((u, v))
    u, v = _as_var(u, tape), _as_var(v, tape)
    if u.value.shape[-1] != v.value.shape[-1]:
        raise ValueError(f"length mismatch: {u.value.shape} vs {v.value.shape}")
    nu, nv = _norms(u.value, "input"), _norms(v.value, "input")
    dot = np.sum(u.value * v.value, axis=-1)
    c = dot / (nu * nv)

    def backward(g):
        g = g[..., None]
        cc = c[..., None]
        _accum(u, g * (v.value / (nu * nv)[..., None] - cc * u.value / (nu * nu)[..., None]))
        _accum(v, g * (u.value / (nu * nv)[..., None] - cc * v.value / (nv * nv)[..., None]))

    return _node(c, (u, v), backward)


def pairwise_cosine(X, A) -> Var:
    """``S[i, j] = cos(X[i], A[j])``."""
    tape = _tape_of((X, A))
    X, A = _as_var(X, tape), _as_var(A, tape)
    if X.value.ndim != 2 or A.value.ndim != 2 or X.value.shape[1] != A.value.shape[1]:
        raise ValueError(f"pairwise_cosine shape mismatch: {X.value.shape} vs {A.value.shape}")
    nx, na = _norms(X.value, "feature"), _norms(A.value, "anchor")
    Xh, Ah = X.value / nx[:, None], A.value / na[:, None]
    S = Xh @ Ah.T

    def backward(g):
        _accum(X, (g @ Ah - np.sum(g * S, axis=1)[:, None] * Xh) / nx[:, None])
        _accum(A, (g.T @ Xh - np.sum(g * S, axis=0)[:, None] * Ah) / na[:, None])

    return _node(S, (X, A), backward)


def softmax(z, axis=-1) -> Var:
    z = _as_var(z, _tape_of((z,)))
    if z.value.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(z.value - np.max(z.value, axis=axis, keepdims=True))
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        _accum(z, s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return _node(s, (z,), backward)


def log_softmax(z, axis=-1) -> Var:
    z = _as_var(z, _tape_of((z,)))
    shifted = z.value - np.max(z.value, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        _accum(z, g - s * np.sum(g, axis=axis, keepdims=True))

    return _node(out, (z,), backward)


def log(p) -> Var:
    """``log(max(p, LOG_FLOOR))``; zero gradient below the floor."""
    tape = _tape_of((p,))
    p = _as_var(p, tape)
    floored = p.value < LOG_FLOOR
    tape.signatures.append(floored.astype(np.int8))
    safe = np.where(floored, LOG_FLOOR, p.value)

    def backward(g):
        _accum(p, np.where(floored, 0.0, g / safe))

    return _node(np.log(safe), (p,), backward)


class ParamStore:
    """Ordered named float64 arrays with a flat-vector view."""

    def __init__(self, arrays):
        self._arrays = OrderedDict()
        items = arrays.items() if hasattr(arrays, "items") else arrays
        for name, value in items:
            a = np.array(value, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name!r} has non-finite entries")
            a.setflags(write=False)
            self._arrays[name] = a

    def __getitem__(self, name) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list:
        return list(self._arrays)

    @property
    def shapes(self) -> dict:
        return {k: v.shape for k, v in self._arrays.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    def with_flat(self, flat) -> "ParamStore":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise ValueError(f"flat vector has length {flat.size}, expected {self.size}")
        out, pos = OrderedDict(), 0
        for name, v in self._arrays.items():
            out[name] = flat[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        return ParamStore(out)

    def coordinate_names(self) -> list:
        names = []
        for name, v in self._arrays.items():
            names.extend(f"{name}{list(idx)}" for idx in np.ndindex(*v.shape))
        return names

    def __eq__(self, other):
        return (
            isinstance(other, ParamStore)
            and self.names() == other.names()
            and all(np.array_equal(self[k], other[k]) for k in self)
        )


@dataclass(frozen=True)
class GradResult:
    value: float
    gradient: np.ndarray


def value_and_grad(loss, params: ParamStore, with_signature=False):
    """Evaluate ``loss(tape, vars)`` and its gradient w.r.t. every parameter.

    ``vars`` maps parameter names to tape leaves. Returns a
    :class:`GradResult` (and the tape's branch signature if requested).
    """
    tape = Tape()
    leaves = OrderedDict((name, tape.param(v)) for name, v in params.items())
    out = loss(tape, leaves)
    value = float(np.asarray(out.value).reshape(()))
    if out.requires_grad:
        tape.backward(out)
    parts = [
        (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)).ravel()
        for leaf in leaves.values()
    ]
    grad = np.concatenate(parts) if parts else np.zeros(0)
    result = GradResult(value, grad)
    return (result, tape.signature()) if with_signature else result


def evaluate(loss, params: ParamStore, with_signature=False):
    tape = Tape()
    leaves = OrderedDict((name, tape.const(v)) for name, v in params.items())
    out = loss(tape, leaves)
    value = float(np.asarray(out.value).reshape(()))
    return (value, tape.signature()) if with_signature else value


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    worst_name: str
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    excluded: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self, n=3) -> list:
        """``(name, analytic, numeric, rel_error)`` for the ``n`` worst coordinates."""
        order = np.argsort(-np.nan_to_num(self.rel_errors, nan=-1.0))[:n]
        names = self._names
        return [(names[i], self.analytic[i], self.numeric[i], self.rel_errors[i]) for i in order]

    _names: list = field(default_factory=list, repr=False)


def grad_check(loss, params: ParamStore, h=1e-5, tolerance=1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences, coordinate by coordinate.

    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    A coordinate whose perturbation changes the branch signature (a ReLU,
    distance or log-floor kink is crossed or touched) is excluded.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    result, sig0 = value_and_grad(loss, params, with_signature=True)
    theta = params.flat()
    numeric = np.zeros_like(theta)
    rel = np.full(theta.shape, np.nan)
    excluded = []
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fp, sp = evaluate(loss, params.with_flat(theta + e), with_signature=True)
        fm, sm = evaluate(loss, params.with_flat(theta - e), with_signature=True)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss at perturbed coordinate {i}")
        numeric[i] = (fp - fm) / (2 * h)
        if not (np.array_equal(sp, sig0) and np.array_equal(sm, sig0)):
            excluded.append(i)
            continue
        a = result.gradient[i]
        rel[i] = abs(a - numeric[i]) / max(abs(a), abs(numeric[i]), 1e-8)
    valid = ~np.isnan(rel)
    worst = int(np.argmax(np.where(valid, rel, -1.0))) if valid.any() else -1
    names = params.coordinate_names()
    return GradCheckReport(
        max_rel_error=float(rel[worst]) if worst >= 0 else 0.0,
        worst_index=worst,
        worst_name=names[worst] if worst >= 0 else "",
        analytic=result.gradient,
        numeric=numeric,
        rel_errors=rel,
        excluded=excluded,
        tolerance=tolerance,
        _names=names,
    )
