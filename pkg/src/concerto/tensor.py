"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is an eager tape: every differentiable operation records its
inputs and a vector-Jacobian closure on the output tensor at forward time.
``backward`` replays the reachable part of the tape in reverse creation
order (creation order is a topological order under eager execution) and
accumulates gradients into leaf tensors created with ``requires_grad=True``.

Only the operations the rest of the system needs are provided; there is no
general broadcasting beyond last-dimension row ops and concat.
"""

from __future__ import annotations

import itertools
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

_CREATION_COUNTER = itertools.count()

_SQRT1_2 = 0.70710678118654752440
_INV_SQRT_2PI = 0.39894228040143267794


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients.

    A tensor created directly (a constant or a parameter) is a leaf.
    Tensors returned by ops carry the recorded operation; constants with
    ``requires_grad=False`` never accumulate gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_order")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp = None
        self._op = "leaf"
        self._order = next(_CREATION_COUNTER)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"


def param(data) -> Tensor:
    """Leaf tensor that accumulates gradient."""
    return Tensor(data, requires_grad=True)


def _record(data, op: str, parents: Sequence[Tensor], vjp) -> Tensor:
    """Wrap a forward result; record the node only if a parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    ``loss`` must be a scalar. A loss with no recorded graph (a constant)
    leaves every gradient untouched, i.e. zero.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    # Gather the reachable subgraph, then replay in reverse creation order.
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._order)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._vjp is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def op_add(a: Tensor, b) -> Tensor:
    """a + b. Supports equal shapes, a python scalar, or a 1-D bias added
    row-wise to the last dimension of a 2-D tensor."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        bval = float(b)
        return _record(a.data + bval, "add_scalar", [a], lambda g: (g,))
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        return _record(a.data + b.data, "add", [a, b], lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        return _record(a.data + b.data, "add_bias", [a, b], lambda g: (g, g.sum(axis=0)))
    if b.data.ndim == 2 and a.data.ndim == 1 and b.data.shape[1] == a.data.shape[0]:
        return _record(a.data + b.data, "add_bias", [a, b], lambda g: (g.sum(axis=0), g))
    raise ValueError(f"op_add shape mismatch: {a.data.shape} vs {b.data.shape}")


def op_mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar, a same-shape tensor,
    or a 1-D row factor applied across the last dimension of a 2-D tensor."""
    if not isinstance(b, Tensor) and np.isscalar(b):
        bval = float(b)
        return _record(a.data * bval, "mul_scalar", [a], lambda g: (g * bval,))
    b = _as_tensor(b)
    if a.data.shape == b.data.shape:
        return _record(a.data * b.data, "mul", [a, b],
                       lambda g: (g * b.data, g * a.data))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        return _record(a.data * b.data, "mul_row", [a, b],
                       lambda g: (g * b.data, (g * a.data).sum(axis=0)))
    raise ValueError(f"op_mul shape mismatch: {a.data.shape} vs {b.data.shape}")


def op_sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return op_add(a, -float(b))
    return op_add(a, op_mul(b, -1.0))


def op_relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), "relu", [x], lambda g: (g * mask,))


def op_gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI

    def vjp(g):
        return (g * (cdf + x.data * pdf),)

    return _record(x.data * cdf, "gelu", [x], vjp)


def op_log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("op_log requires strictly positive inputs")
    return _record(np.log(x.data), "log", [x], lambda g: (g / x.data,))


def op_mean(x: Tensor) -> Tensor:
    n = x.data.size

    def vjp(g):
        return (np.full_like(x.data, float(g) / n),)

    return _record(np.array(x.data.mean()), "mean", [x], vjp)


def op_sum(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full_like(x.data, float(g)),)

    return _record(np.array(x.data.sum()), "sum", [x], vjp)


def op_transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("op_transpose expects a 2-D tensor")
    return _record(x.data.T.copy(), "transpose", [x], lambda g: (g.T,))


def op_reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ValueError(f"op_reshape cannot view {x.data.shape} as {shape}")
    return _record(x.data.reshape(shape), "reshape", [x],
                   lambda g: (g.reshape(x.data.shape),))


def op_concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("op_concat_lastdim needs at least one tensor")
    lead = tensors[0].data.shape[:-1]
    for t in tensors:
        if t.data.shape[:-1] != lead:
            raise ValueError("op_concat_lastdim: leading dimensions differ")
    widths = [t.data.shape[-1] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=-1))

    return _record(np.concatenate([t.data for t in tensors], axis=-1),
                   "concat", list(tensors), vjp)


def op_concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack (n_i, d) tensors along the row axis."""
    if not tensors:
        raise ValueError("op_concat_rows needs at least one tensor")
    width = tensors[0].data.shape[1:]
    for t in tensors:
        if t.data.shape[1:] != width:
            raise ValueError("op_concat_rows: trailing dimensions differ")
    splits = np.cumsum([t.data.shape[0] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=0))

    return _record(np.concatenate([t.data for t in tensors], axis=0),
                   "concat_rows", list(tensors), vjp)


def op_gather_rows(x: Tensor, index) -> Tensor:
    """Rows of a 2-D tensor selected by an integer array; backward scatter-adds."""
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2:
        raise ValueError("op_gather_rows expects a 2-D tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError("op_gather_rows index out of range")

    def vjp(g):
        return (scatter_add_rows(g, idx, x.data.shape[0]),)

    return _record(x.data[idx], "gather_rows", [x], vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def op_matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("op_matmul expects 2-D tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"op_matmul inner dims disagree: {a.data.shape} x {b.data.shape}")

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return _record(a.data @ b.data, "matmul", [a, b], vjp)


# ---------------------------------------------------------------------------
# normalization and similarity
# ---------------------------------------------------------------------------

def op_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax of x/temperature over the last dimension, max-subtracted."""
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y / temperature,)

    return _record(y, "softmax", [x], vjp)


def op_log_softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """log(softmax(x/temperature)) computed stably."""
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def vjp(g):
        return ((g - sm * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _record(y, "log_softmax", [x], vjp)


def op_layernorm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Zero-mean unit-variance normalization over the last dimension."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _record(y, "layernorm", [x], vjp)


def op_l2norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-wise L2 normalization x / max(||x||, eps)."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    den = np.maximum(n, eps)
    clamped = n <= eps
    y = x.data / den

    def vjp(g):
        free = (g - y * (g * y).sum(axis=-1, keepdims=True)) / den
        return (np.where(clamped, g / eps, free),)

    return _record(y, "l2norm", [x], vjp)


def op_cosine(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-wise cosine similarity of two (n, d) tensors -> (n,)."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"op_cosine shape mismatch: {a.data.shape} vs {b.data.shape}")
    dot = (a.data * b.data).sum(axis=-1)
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    den = np.maximum(na * nb, eps)
    clamped = na * nb <= eps
    cos = dot / den

    def vjp(g):
        g = g[..., None]
        c = cos[..., None]
        d = den[..., None]
        # where the denominator is clamped it is a constant
        na_ = np.where(clamped, 1.0, na)[..., None]
        nb_ = np.where(clamped, 1.0, nb)[..., None]
        da_free = g * (b.data / d - c * a.data / (na_ * na_))
        db_free = g * (a.data / d - c * b.data / (nb_ * nb_))
        da_cl = g * b.data / eps
        db_cl = g * a.data / eps
        m = clamped[..., None]
        return (np.where(m, da_cl, da_free), np.where(m, db_cl, db_free))

    return _record(cos, "cosine", [a, b], vjp)


# ---------------------------------------------------------------------------
# segment pooling
# ---------------------------------------------------------------------------

def _sorted_runs(ids: np.ndarray):
    """Stable sort order plus run starts and run labels of equal ids."""
    order = np.argsort(ids, kind="stable")
    sid = ids[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sid)) + 1])
    return order, starts, sid[starts]


def segment_sum_np(values: np.ndarray, ids: np.ndarray, num_segments: int) -> np.ndarray:
    """Plain numpy per-segment row sum (sorted reduceat; fast, no graph)."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros((num_segments,) + values.shape[1:], dtype=values.dtype)
    if ids.size == 0:
        return out
    order, starts, uniq = _sorted_runs(ids)
    out[uniq] = np.add.reduceat(values[order], starts, axis=0)
    return out


def segment_mean_np(values: np.ndarray, ids: np.ndarray, num_segments: int):
    """Per-segment row mean; returns (means, counts). Empty segments are zero."""
    counts = np.bincount(np.asarray(ids, dtype=np.int64), minlength=num_segments)
    sums = segment_sum_np(values, ids, num_segments)
    denom = np.maximum(counts, 1).astype(np.float64)
    return sums / denom.reshape((-1,) + (1,) * (values.ndim - 1)), counts


def scatter_add_rows(rows: np.ndarray, index: np.ndarray, num_rows: int) -> np.ndarray:
    """Sum rows into an output of ``num_rows`` rows at positions ``index``."""
    out = np.zeros((num_rows,) + rows.shape[1:], dtype=rows.dtype)
    if index.size == 0:
        return out
    order, starts, uniq = _sorted_runs(np.asarray(index, dtype=np.int64))
    out[uniq] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def op_segment_mean(values: Tensor, segment_ids, num_segments: int):
    """Mean of value rows per segment id.

    Returns ``(out, nonempty)`` where ``out`` is a (num_segments, d) tensor
    (zero rows for empty segments) and ``nonempty`` a boolean mask. Backward
    scatters dOut/|segment| to each member row.
    """
    ids = np.asarray(segment_ids, dtype=np.int64)
    if values.data.ndim != 2 or ids.shape != (values.data.shape[0],):
        raise ValueError("op_segment_mean expects (n, d) values and (n,) ids")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError("segment id out of range")
    means, counts = segment_mean_np(values.data, ids, num_segments)
    inv = 1.0 / np.maximum(counts, 1).astype(np.float64)

    def vjp(g):
        return ((g * inv[:, None])[ids],)

    out = _record(means, "segment_mean", [values], vjp)
    return out, counts > 0


def op_voxel_smooth(x: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Replace each row by the mean of its segment (mean then broadcast).

    The operator matrix is a symmetric projection, so the backward pass is
    the same mean-and-broadcast applied to the incoming gradient.
    """
    ids = np.asarray(segment_ids, dtype=np.int64)
    if x.data.ndim != 2 or ids.shape != (x.data.shape[0],):
        raise ValueError("op_voxel_smooth expects (n, d) values and (n,) ids")

    def smooth(arr):
        means, _ = segment_mean_np(arr, ids, num_segments)
        return means[ids]

    return _record(smooth(x.data), "voxel_smooth", [x], lambda g: (smooth(g),))


def op_cross_entropy_rows(p_target: Tensor, log_q: Tensor) -> Tensor:
    """-(1/n) sum_i sum_k p[i,k] * log_q[i,k]; no gradient flows into p_target."""
    p = _as_tensor(p_target)
    if p.data.shape != log_q.data.shape:
        raise ValueError(f"op_cross_entropy_rows shape mismatch: {p.data.shape} vs {log_q.data.shape}")
    n = p.data.shape[0]
    val = -(p.data * log_q.data).sum() / n

    def vjp(g):
        return (None, -float(g) * p.data / n)

    return _record(np.array(val), "cross_entropy_rows", [p, log_q], vjp)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(op, arrays, h: float = 1e-5, wrt=None) -> float:
    """Compare analytic gradients of a weighted sum of ``op(*tensors)``
    against central finite differences; returns the worst relative error.

    The probe loss uses fixed random weights so that ops with constant row
    sums (softmax, layernorm) still exercise a nonzero gradient.
    """
    tensors = [param(a.copy()) for a in arrays]
    out = op(*tensors)
    w = np.random.default_rng(1234).normal(size=out.data.shape)
    backward(op_sum(op_mul(out, Tensor(w))))
    wrt = range(len(arrays)) if wrt is None else wrt
    worst = 0.0
    for i in wrt:
        def f(x, i=i):
            args = [Tensor(t.data) for t in tensors]
            args[i] = Tensor(x)
            return float((op(*args).data * w).sum())

        num = finite_difference_grad(f, tensors[i].data.copy(), h=h)
        ana = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(num)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        worst = max(worst, float(np.abs(num - ana).max() / scale))
    return worst
