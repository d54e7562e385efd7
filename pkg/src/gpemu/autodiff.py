"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records operations in construction (topological) order; ``backward``
replays it once in reverse to produce gradients for every leaf. Tensors are
immutable value wrappers around numpy arrays. Operations whose inputs are all
constants (no tape) fold away and produce constants, so frozen model
parameters cost nothing extra during sampling.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular as _solve_triangular
from scipy.special import erf as _sp_erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class CholeskyError(RuntimeError):
    """Decomposition failure; ``pivot`` is the first non-positive pivot index."""

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(
            f"cholesky failed: pivot {pivot} is not positive (value {value:.6e}); "
            "input is not positive definite at the supplied jitter"
        )


class Tape:
    """Ordered op records for one differentiable computation."""

    __slots__ = ("_parents", "_vjps", "_shapes")

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list = []
        self._shapes: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self._parents)

    def leaf(self, data) -> "Tensor":
        """Register an input tensor whose gradient will be available."""
        arr = _as_f64(data)
        nid = len(self._parents)
        self._parents.append(())
        self._vjps.append(None)
        self._shapes.append(arr.shape)
        return Tensor(arr, self, nid)

    def _record(self, data: np.ndarray, parents: list["Tensor"], vjp) -> "Tensor":
        nid = len(self._parents)
        self._parents.append(tuple(p.nid for p in parents))
        self._vjps.append(vjp)
        self._shapes.append(data.shape)
        return Tensor(data, self, nid)


class Tensor:
    """Immutable float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape: Tape | None = None, nid: int = -1):
        self.data = _as_f64(data)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "const" if self.nid < 0 else f"node {self.nid}"
        return f"Tensor(shape={self.shape}, {tag})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # shorthands
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _common_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data, inputs: tuple[Tensor, ...], vjp_builder) -> Tensor:
    """Record an op if any input is on a tape, else return a constant.

    ``vjp_builder`` receives the tuple of booleans saying which inputs need
    gradients and must return ``vjp(g) -> list`` aligned with the needed ones.
    """
    tape = _common_tape(*inputs)
    if tape is None:
        return Tensor(data)
    needs = tuple(t.nid >= 0 for t in inputs)
    parents = [t for t in inputs if t.nid >= 0]
    return tape._record(data, parents, vjp_builder(needs))


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def build(needs):
        def vjp(g):
            gs = []
            if needs[0]:
                gs.append(_unbroadcast(g, a.data.shape))
            if needs[1]:
                gs.append(_unbroadcast(g, b.data.shape))
            return gs

        return vjp

    return _make(out, (a, b), build)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def build(needs):
        def vjp(g):
            gs = []
            if needs[0]:
                gs.append(_unbroadcast(g, a.data.shape))
            if needs[1]:
                gs.append(_unbroadcast(-g, b.data.shape))
            return gs

        return vjp

    return _make(out, (a, b), build)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def build(needs):
        def vjp(g):
            gs = []
            if needs[0]:
                gs.append(_unbroadcast(g * b.data, a.data.shape))
            if needs[1]:
                gs.append(_unbroadcast(g * a.data, b.data.shape))
            return gs

        return vjp

    return _make(out, (a, b), build)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def build(needs):
        def vjp(g):
            gs = []
            if needs[0]:
                gs.append(_unbroadcast(g / b.data, a.data.shape))
            if needs[1]:
                gs.append(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
            return gs

        return vjp

    return _make(out, (a, b), build)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda needs: lambda g: [-g])


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    a = _lift(a)
    p = float(p)
    out = a.data**p

    def build(needs):
        def vjp(g):
            return [g * p * a.data ** (p - 1.0)]

        return vjp

    return _make(out, (a,), build)


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda needs: lambda g: [g * out])


def log(a) -> Tensor:
    a = _lift(a)
    out = np.log(a.data)
    return _make(out, (a,), lambda needs: lambda g: [g / a.data])


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda needs: lambda g: [g * (0.5 / out)])


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda needs: lambda g: [g * (1.0 - out * out)])


def cos(a) -> Tensor:
    a = _lift(a)
    out = np.cos(a.data)
    return _make(out, (a,), lambda needs: lambda g: [-g * np.sin(a.data)])


def sin(a) -> Tensor:
    a = _lift(a)
    out = np.sin(a.data)
    return _make(out, (a,), lambda needs: lambda g: [g * np.cos(a.data)])


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)
    return _make(out, (a,), lambda needs: lambda g: [g * mask])


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation (cheaper than erf at equal smoothness)."""
    a = _lift(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def build(needs):
        def vjp(g):
            sech2 = 1.0 - t * t
            d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
            return [g * d]

        return vjp

    return _make(out, (a,), build)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda needs: lambda g: [g * out * (1.0 - out)])


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    a = _lift(a)
    out = np.logaddexp(0.0, a.data)

    def build(needs):
        def vjp(g):
            return [g / (1.0 + np.exp(-a.data))]

        return vjp

    return _make(out, (a,), build)


def erf(a) -> Tensor:
    a = _lift(a)
    out = _sp_erf(a.data)

    def build(needs):
        def vjp(g):
            return [g * (2.0 / math.sqrt(math.pi)) * np.exp(-a.data * a.data)]

        return vjp

    return _make(out, (a,), build)


def softmax_lastdim(a) -> Tensor:
    """Softmax over the last axis."""
    a = _lift(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def build(needs):
        def vjp(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return [out * (g - dot)]

        return vjp

    return _make(out, (a,), build)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def build(needs):
        def vjp(g):
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return [np.broadcast_to(gg, a.data.shape).copy()]

        return vjp

    return _make(out, (a,), build)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def build(needs):
        def vjp(g):
            gg = np.asarray(g) / count
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return [np.broadcast_to(gg, a.data.shape).copy()]

        return vjp

    return _make(out, (a,), build)


def take(a, idx) -> Tensor:
    """Basic slicing or integer-array indexing; gradient scatters back."""
    a = _lift(a)
    raw = a.data[idx]
    out = raw.copy() if isinstance(raw, np.ndarray) else raw
    fancy = isinstance(idx, (list, np.ndarray))

    def build(needs):
        def vjp(g):
            z = np.zeros_like(a.data)
            if fancy:  # repeated indices must accumulate
                np.add.at(z, idx, g)
            else:
                z[idx] += g
            return [z]

        return vjp

    return _make(out, (a,), build)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    tape = _common_tape(*parts)
    if tape is None:
        return Tensor(out)
    live = [(i, p) for i, p in enumerate(parts) if p.nid >= 0]

    def vjp(g):
        gs = []
        for i, p in live:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            gs.append(np.ascontiguousarray(g[tuple(sl)]))
        return gs

    return tape._record(out, [p for _, p in live], vjp)


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def build(needs):
        def vjp(g):
            return [np.transpose(g, inv)]

        return vjp

    return _make(out, (a,), build)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _lift(a)
    out = np.swapaxes(a.data, ax1, ax2)
    return _make(out, (a,), lambda needs: lambda g: [np.swapaxes(g, ax1, ax2)])


def reshape(a, *shape) -> Tensor:
    a = _lift(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda needs: lambda g: [g.reshape(a.data.shape)])


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    out = np.broadcast_to(a.data, shape)

    def build(needs):
        def vjp(g):
            return [_unbroadcast(g, a.data.shape)]

        return vjp

    return _make(np.ascontiguousarray(out), (a,), build)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data @ b.data
    an, bn = a.data.ndim, b.data.ndim

    def build(needs):
        def vjp(g):
            gs = []
            if an == 1 and bn == 1:  # inner product
                if needs[0]:
                    gs.append(g * b.data)
                if needs[1]:
                    gs.append(g * a.data)
                return gs
            if needs[0]:
                if an == 1:  # (k,) @ (..., k, m) -> (..., m)
                    ga = (g[..., None, :] @ np.swapaxes(b.data, -1, -2))[..., 0, :]
                    gs.append(_unbroadcast(ga, a.data.shape))
                elif bn == 1:  # (..., n, k) @ (k,) -> (..., n)
                    gs.append(_unbroadcast(g[..., :, None] * b.data, a.data.shape))
                elif an == 2 and bn > 2:
                    # contract batch and output axes in one gemm; avoids the
                    # broadcast-sized intermediate
                    axes = list(range(bn - 2)) + [bn - 1]
                    gs.append(np.tensordot(g, b.data, axes=(axes, axes)))
                else:
                    gs.append(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if needs[1]:
                if bn == 1:
                    gb = (np.swapaxes(a.data, -1, -2) @ g[..., :, None])[..., 0]
                    gs.append(_unbroadcast(gb, b.data.shape))
                elif an == 1:
                    gb = a.data[:, None] * g[..., None, :]
                    gs.append(_unbroadcast(gb, b.data.shape))
                elif bn == 2 and an > 2:
                    axes = list(range(an - 2)) + [an - 2]
                    gs.append(np.tensordot(a.data, g, axes=(axes, axes)))
                else:
                    gs.append(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
            return gs

        return vjp

    return _make(out, (a, b), build)


def _find_bad_pivot(k: np.ndarray) -> tuple[int, float]:
    """Locate the first non-positive pivot of a failed factorization."""
    n = k.shape[0]
    l = np.zeros_like(k)
    for j in range(n):
        pivot = k[j, j] - l[j, :j] @ l[j, :j]
        if pivot <= 0.0 or not np.isfinite(pivot):
            return j, float(pivot)
        l[j, j] = math.sqrt(pivot)
        if j + 1 < n:
            l[j + 1 :, j] = (k[j + 1 :, j] - l[j + 1 :, :j] @ l[j, :j]) / l[j, j]
    return n - 1, float(l[n - 1, n - 1] ** 2)


def cholesky(a, *, symmetry_tol: float = 1e-10) -> Tensor:
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    a = _lift(a)
    k = a.data
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"cholesky expects a square matrix, got shape {k.shape}")
    asym = np.abs(k - k.T).max() if k.size else 0.0
    if asym > symmetry_tol:
        raise ValueError(f"cholesky input asymmetric by {asym:.3e} (tol {symmetry_tol:.0e})")
    try:
        low = np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        pivot, value = _find_bad_pivot(k)
        raise CholeskyError(pivot, value) from None

    def build(needs):
        def vjp(g):
            # Standard triangular recurrence: project L^T dL, solve twice,
            # then symmetrize since the input is a symmetric matrix.
            gl = np.tril(g)
            p = np.tril(low.T @ gl)
            np.fill_diagonal(p, 0.5 * np.diag(p))
            tmp = _solve_triangular(low, p, lower=True, trans="T")
            s = _solve_triangular(low, tmp.T, lower=True, trans="T").T
            return [0.5 * (s + s.T)]

        return vjp

    return _make(low, (a,), build)


def triangular_solve(a_lower, b, *, trans: bool = False) -> Tensor:
    """Solve ``L x = b`` (or ``L^T x = b`` when ``trans``) for lower-triangular L."""
    a, b = _lift(a_lower), _lift(b)
    low = a.data
    if low.ndim != 2 or low.shape[0] != low.shape[1]:
        raise ValueError(f"triangular_solve expects a square matrix, got {low.shape}")
    x = _solve_triangular(low, b.data, lower=True, trans="T" if trans else "N")

    def build(needs):
        def vjp(g):
            gs = []
            gb = _solve_triangular(low, g, lower=True, trans="N" if trans else "T")
            if needs[0]:
                if b.data.ndim == 1:
                    outer = np.outer(x, gb) if trans else np.outer(gb, x)
                else:
                    outer = x @ gb.T if trans else gb @ x.T
                gs.append(np.tril(-outer))
            if needs[1]:
                gs.append(gb)
            return gs

        return vjp

    return _make(x, (a, b), build)


# ---------------------------------------------------------------------------
# backward pass


class Gradients:
    """Gradient lookup for leaves of one backward pass."""

    def __init__(self, tape: Tape, table: list):
        self._tape = tape
        self._table = table

    def wrt(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape or t.nid < 0:
            raise ValueError("tensor is not a node of this tape")
        g = self._table[t.nid]
        if g is None:
            return np.zeros(self._tape._shapes[t.nid])
        return g


def backward(tape: Tape, output: Tensor) -> Gradients:
    """Reverse sweep from a scalar output; each node is visited once."""
    if output.tape is not tape or output.nid < 0:
        raise ValueError("output is not a node of this tape")
    if output.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    table: list = [None] * (output.nid + 1)
    owned = bytearray(output.nid + 1)  # safe to accumulate in place
    table[output.nid] = np.ones(output.shape)
    for nid in range(output.nid, -1, -1):
        g = table[nid]
        if g is None:
            continue
        vjp = tape._vjps[nid]
        if vjp is None:
            continue
        parents = tape._parents[nid]
        for pid, pg in zip(parents, vjp(g)):
            if table[pid] is None:
                # pg may alias this node's grad (pass-through vjps), so the
                # first write is treated as borrowed
                table[pid] = pg
            elif owned[pid]:
                np.add(table[pid], pg, out=table[pid])
            else:
                table[pid] = table[pid] + pg
                owned[pid] = 1
    return Gradients(tape, table)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with learnable scale and shift (fused)."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    xd = x.data
    m = xd.mean(axis=-1, keepdims=True)
    d = xd - m
    v = (d * d).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = d * inv
    out = xhat * gamma.data + beta.data

    def build(needs):
        def vjp(g):
            gs = []
            if needs[0]:
                dxhat = g * gamma.data
                term = dxhat - dxhat.mean(axis=-1, keepdims=True)
                term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                gs.append(inv * term)
            if needs[1]:
                gs.append(_unbroadcast(g * xhat, gamma.data.shape))
            if needs[2]:
                gs.append(_unbroadcast(g, beta.data.shape))
            return gs

        return vjp

    return _make(out, (x, gamma, beta), build)
