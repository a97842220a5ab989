"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Each operation attaches its inputs and a backward closure to its output
tensor. :func:`backward` linearizes the graph below the loss into a
:class:`Tape` (an ordered record in topological order) and replays it once,
in reverse, accumulating gradients into every reachable tensor that requires
them. Only the primitives needed by the encoder and the losses are provided,
and each backward rule is verified against central finite differences by
:func:`check_gradients`.

Numerical conventions, applied uniformly:

* all values are 64-bit floats;
* ``log`` clamps its input to ``>= CLAMP_FLOOR`` (1e-12);
* ``softmax`` subtracts the row max before exponentiating;
* cosine similarity involving a zero vector is defined as 0 (gradient 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CLAMP_FLOOR = 1e-12


class Tape:
    """Ordered record of primitive operations for one computation graph.

    Built by :func:`backward` in topological order, so walking the record in
    reverse visits each operation exactly once with all downstream gradients
    already accumulated.
    """

    def __init__(self):
        self.records = []  # list of (op_name, inputs, output, backward_fn)

    def record(self, op_name, inputs, output, backward_fn):
        self.records.append((op_name, inputs, output, backward_fn))

    def __len__(self):
        return len(self.records)


class Tensor:
    """A float64 array plus optional gradient bookkeeping.

    ``grad`` is populated by :func:`backward` and has the same shape as
    ``values``. Operation outputs remember their inputs; leaves (parameters,
    constants) have no history and may be reused across graphs.
    """

    __slots__ = ("values", "requires_grad", "grad", "_op")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = None  # (op_name, inputs, backward_fn) for op outputs

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        return float(self.values)

    def detach(self):
        """Plain ndarray view of the values, outside the graph."""
        return self.values

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are wrapped on the fly.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __getitem__(self, key):
        return take(self, key)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make_output(op_name, inputs, values, backward_fn):
    if not any(t.requires_grad for t in inputs):
        return Tensor(values)  # pure: nothing recorded
    out = Tensor(values, requires_grad=True)
    out._op = (op_name, inputs, backward_fn)
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.values)
    tensor.grad += grad


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _shape_error(op, *operands):
    shapes = " and ".join(str(np.asarray(o.values).shape) for o in operands)
    return ValueError(f"{op}: nonconforming shapes {shapes}")


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def _broadcastable(a, b):
    try:
        np.broadcast_shapes(a.values.shape, b.values.shape)
        return True
    except ValueError:
        return False


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    if not _broadcastable(a, b):
        raise _shape_error("add", a, b)
    values = a.values + b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return _make_output("add", [a, b], values, backward_fn)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    if not _broadcastable(a, b):
        raise _shape_error("sub", a, b)
    values = a.values - b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(-g, b.values.shape))

    return _make_output("sub", [a, b], values, backward_fn)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    if not _broadcastable(a, b):
        raise _shape_error("mul", a, b)
    values = a.values * b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _make_output("mul", [a, b], values, backward_fn)


def div(a, b):
    """Elementwise division; the denominator's magnitude is floored at
    CLAMP_FLOOR (sign preserved) to keep losses finite."""
    a, b = _wrap(a), _wrap(b)
    if not _broadcastable(a, b):
        raise _shape_error("div", a, b)
    denom = np.where(
        np.abs(b.values) < CLAMP_FLOOR,
        np.copysign(CLAMP_FLOOR, np.where(b.values == 0.0, 1.0, b.values)),
        b.values,
    )
    values = a.values / denom

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g / denom, a.values.shape))
        _accumulate(b, _unbroadcast(-g * a.values / denom**2, b.values.shape))

    return _make_output("div", [a, b], values, backward_fn)


# ---------------------------------------------------------------------------
# Matrix product
# ---------------------------------------------------------------------------

def matmul(a, b, transpose_b=False):
    """Matrix product, numpy semantics for 1-D operands.

    Supports (m,k)@(k,n), (k,)@(k,n), (m,k)@(k,), and with ``transpose_b``
    the product ``a @ b.T`` for 2-D ``b`` (used by the query aggregator).
    """
    a, b = _wrap(a), _wrap(b)
    bv = b.values.T if transpose_b else b.values
    a_inner = a.values.shape[-1] if a.values.ndim else None
    b_inner = bv.shape[0] if bv.ndim else None
    if a.values.ndim == 0 or bv.ndim == 0 or a_inner != b_inner:
        raise _shape_error("matmul", a, b)
    values = a.values @ bv

    def backward_fn(g):
        av = a.values
        if av.ndim == 1 and bv.ndim == 1:
            ga, gb = g * bv, g * av
        elif av.ndim == 1:  # (k,) @ (k,n) -> (n,)
            ga, gb = bv @ g, np.outer(av, g)
        elif bv.ndim == 1:  # (m,k) @ (k,) -> (m,)
            ga, gb = np.outer(g, bv), av.T @ g
        else:
            ga, gb = g @ bv.T, av.T @ g
        if transpose_b:
            gb = gb.T
        _accumulate(a, ga)
        _accumulate(b, gb)

    return _make_output("matmul", [a, b], values, backward_fn)


# ---------------------------------------------------------------------------
# Nonlinearities and reductions
# ---------------------------------------------------------------------------

def exp(a):
    a = _wrap(a)
    values = np.exp(a.values)

    def backward_fn(g):
        _accumulate(a, g * values)

    return _make_output("exp", [a], values, backward_fn)


def log(a):
    """Natural log of ``max(a, CLAMP_FLOOR)``; gradient is 0 in the clamped
    region (the forward value is constant there)."""
    a = _wrap(a)
    clamped = np.maximum(a.values, CLAMP_FLOOR)
    values = np.log(clamped)

    def backward_fn(g):
        _accumulate(a, np.where(a.values > CLAMP_FLOOR, g / clamped, 0.0))

    return _make_output("log", [a], values, backward_fn)


def relu(a):
    a = _wrap(a)
    values = np.maximum(a.values, 0.0)

    def backward_fn(g):
        _accumulate(a, g * (a.values > 0.0))

    return _make_output("relu", [a], values, backward_fn)


def softmax(a):
    """Row-stable softmax over the last axis."""
    a = _wrap(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        inner = (g * values).sum(axis=-1, keepdims=True)
        _accumulate(a, values * (g - inner))

    return _make_output("softmax", [a], values, backward_fn)


def tsum(a, axis=None):
    a = _wrap(a)
    values = a.values.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.full_like(a.values, g))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.values.shape).copy())

    return _make_output("sum", [a], values, backward_fn)


def tmean(a, axis=None):
    a = _wrap(a)
    values = a.values.mean(axis=axis)
    n = a.values.size if axis is None else a.values.shape[axis]

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.full_like(a.values, g / n))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.values.shape) / n)

    return _make_output("mean", [a], values, backward_fn)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make_output("concat", tensors, values, backward_fn)


def take(a, key):
    """Basic and integer-array indexing (the ``slice`` primitive).

    Backward scatter-adds into the source, so repeated indices accumulate.
    """
    a = _wrap(a)
    values = a.values[key]

    def backward_fn(g):
        full = np.zeros_like(a.values)
        np.add.at(full, key, g)
        _accumulate(a, full)

    return _make_output("slice", [a], values, backward_fn)


def layer_norm(a, eps=CLAMP_FLOOR):
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    a = _wrap(a)
    mu = a.values.mean(axis=-1, keepdims=True)
    centered = a.values - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    values = centered * inv

    def backward_fn(g):
        g_centered = g - g.mean(axis=-1, keepdims=True)
        proj = (g * values).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g_centered - values * proj))

    return _make_output("layer-norm", [a], values, backward_fn)


def cosine_similarity(a, b):
    """Cosine similarity between rows of ``a`` and rows of ``b``.

    For 2-D inputs (m,d) and (n,d) returns the (m,n) matrix of pairwise
    similarities; for two 1-D vectors returns a scalar. Rows with zero norm
    yield similarity 0 and gradient 0.
    """
    a, b = _wrap(a), _wrap(b)
    scalar_out = a.values.ndim == 1 and b.values.ndim == 1
    av = np.atleast_2d(a.values)
    bv = np.atleast_2d(b.values)
    if av.shape[1] != bv.shape[1]:
        raise _shape_error("cosine-similarity", a, b)

    na = np.linalg.norm(av, axis=1)
    nb = np.linalg.norm(bv, axis=1)
    za = na < CLAMP_FLOOR
    zb = nb < CLAMP_FLOOR
    safe_na = np.where(za, 1.0, na)
    safe_nb = np.where(zb, 1.0, nb)
    ua = av / safe_na[:, None]
    ub = bv / safe_nb[:, None]
    sims = ua @ ub.T
    sims[za, :] = 0.0
    sims[:, zb] = 0.0
    values = sims[0, 0] if scalar_out else sims

    def backward_fn(g):
        gm = np.atleast_2d(g)
        gm = gm * ~np.logical_or(za[:, None], zb[None, :])
        ga = (gm @ ub - (gm * sims).sum(axis=1, keepdims=True) * ua) / safe_na[:, None]
        gb = (gm.T @ ua - (gm * sims).sum(axis=0)[:, None] * ub) / safe_nb[:, None]
        ga[za] = 0.0
        gb[zb] = 0.0
        _accumulate(a, ga.reshape(a.values.shape))
        _accumulate(b, gb.reshape(b.values.shape))

    return _make_output("cosine-similarity", [a, b], values, backward_fn)


# ---------------------------------------------------------------------------
# Backward pass and verification
# ---------------------------------------------------------------------------

def linearize(loss):
    """Build the :class:`Tape` for the graph below ``loss``.

    Iterative depth-first postorder, so each operation appears exactly once
    and after all of its inputs.
    """
    tape = Tape()
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if node._op is None or id(node) in visited:
            continue
        if expanded:
            visited.add(id(node))
            op_name, inputs, backward_fn = node._op
            tape.record(op_name, inputs, node, backward_fn)
        else:
            stack.append((node, True))
            for inp in node._op[1]:
                stack.append((inp, False))
    return tape


def backward(loss):
    """Populate ``grad`` on every reachable gradient-requiring tensor.

    ``loss`` must be a finite scalar produced through recorded operations.
    Gradients accumulate into any pre-existing ``grad`` buffers on leaves, so
    callers reset parameter gradients between steps.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.values.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.values.shape}")
    if not np.isfinite(loss.values):
        raise RuntimeError("backward: non-finite loss (training diverged?)")
    if not loss.requires_grad or loss._op is None:
        raise ValueError("backward: loss does not depend on any gradient-requiring tensor")

    loss.grad = np.ones_like(loss.values)
    tape = linearize(loss)
    for _name, _inputs, output, backward_fn in reversed(tape.records):
        if output.grad is not None:
            backward_fn(output.grad)


@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic and finite-difference gradients."""

    entries: list = field(default_factory=list)  # (name, max_rel_error, passed)
    tol: float = 0.0

    @property
    def passed(self):
        return all(ok for _, _, ok in self.entries)

    @property
    def max_rel_error(self):
        return max((e for _, e, _ in self.entries), default=0.0)

    def __str__(self):
        lines = [
            f"  {name}: max_rel_err={err:.3e} {'PASS' if ok else 'FAIL'}"
            for name, err, ok in self.entries
        ]
        return "\n".join(lines) if lines else "  (no parameters)"


def check_gradients(loss_builder, params, step=1e-5, tol=1e-4):
    """Compare analytic gradients against central finite differences.

    ``loss_builder`` is a zero-argument callable that rebuilds the loss from
    the current parameter values; it must be deterministic (two evaluations
    are compared exactly, and a mismatch raises). ``params`` maps names to
    gradient-requiring leaf tensors.

    The per-element relative error is ``|a - n| / max(|a|, |n|, 1)``, i.e.
    absolute error when both gradients are below 1 in magnitude. A parameter
    passes when its max relative error is below ``tol``; an empty parameter
    map passes vacuously.
    """
    if step <= 0:
        raise ValueError("check_gradients: step must be positive")
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]

    first = loss_builder()
    second = loss_builder()
    if first.values != second.values:
        raise RuntimeError(
            "check_gradients: loss_builder is not deterministic "
            f"({first.values!r} != {second.values!r})"
        )

    for _, p in named:
        p.grad = None
    loss = loss_builder()
    if loss.requires_grad:
        backward(loss)

    report = GradCheckReport(tol=tol)
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_builder().values
            flat[i] = orig - step
            lo = loss_builder().values
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
        numeric = numeric.reshape(p.values.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
        report.entries.append((name, rel, rel < tol))
    return report
