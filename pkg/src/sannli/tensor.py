"""Dense float64 tensors with reverse-mode automatic differentiation.

Ops executed while a Tape is active record backward closures onto it;
``backward(loss, tape)`` then walks the records in reverse to accumulate
gradients for every leaf that requires them. Outside a tape the same ops
run as plain numpy, which is the evaluation-mode fast path.

Conventions fixed here so tests are deterministic: abs has subgradient 0
at 0, relu's gate at exactly 0 is 0, maxout/max-pool ties go to the first
element, and masked softmax entries are exactly 0.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .rng import RngStream


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


_uid = itertools.count(1)
_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tensor:
    """Immutable dense array of float64 values, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "uid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.uid = next(_uid)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed ops; usable as a context manager.

    Records are appended in execution order, so the list is a topological
    order of the computation graph and reverse iteration is valid for
    backpropagation. Single-threaded by design; independent tapes may run
    on different threads.
    """

    def __init__(self):
        self.nodes: list[tuple[int, tuple[Tensor, ...], Callable]] = []
        self.gradients: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None

    def record(self, out: Tensor, parents: tuple, backward_fn: Callable) -> None:
        self.nodes.append((out.uid, parents, backward_fn))

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        """Gradient accumulated for t by the last backward(), or None."""
        return self.gradients.get(t.uid)


def record_op(out_data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    """Wrap a forward result, recording the op if a tape is active.

    backward_fn(grad_out) must return one gradient array (or None) per
    parent, in order. Gradients for parents with requires_grad=False are
    discarded, so backward_fn may compute them unconditionally.
    """
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.record(out, parents, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate gradients of a scalar loss into tape.gradients.

    A tensor used several times receives the sum of all its use-site
    gradients. Leaves that never reach the loss get no entry.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for out_uid, parents, backward_fn in reversed(tape.nodes):
        g = grads.get(out_uid)
        if g is None:
            continue
        parent_grads = backward_fn(g)
        for p, pg in zip(parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(p.uid)
            if acc is None:
                # private copy: backward closures may hand back views of the
                # upstream gradient, or the same array for several parents
                grads[p.uid] = np.array(pg)
            else:
                acc += pg
    tape.gradients = grads


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return record_op(ad @ bd, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return record_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return record_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)  # sign(0) == 0: subgradient at the kink is 0
    return record_op(np.abs(a.data), (a,), lambda g: (g * s,))


def elementwise(kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch for the pointwise op family: add, sub, mul, abs."""
    if kind == "abs":
        if b is not None:
            raise ValueError("elementwise: abs is unary")
        return abs_(a)
    if b is None:
        raise ValueError(f"elementwise: {kind} needs two operands")
    try:
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b)
    except KeyError:
        raise ValueError(f"elementwise: unknown kind {kind!r}") from None


def add_bias(mat: Tensor, bias: Tensor) -> Tensor:
    """Add a column vector to every column of a matrix (the only broadcast)."""
    if mat.data.ndim != 2 or bias.shape != (mat.shape[0], 1):
        raise ShapeError(f"add_bias: matrix {mat.shape} with bias {bias.shape}")
    return record_op(mat.data + bias.data, (mat, bias),
                     lambda g: (g, g.sum(axis=1, keepdims=True)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(x: Tensor) -> Tensor:
    gate = x.data > 0.0
    return record_op(np.where(gate, x.data, 0.0), (x,), lambda g: (g * gate,))


def tanh_(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function on raw arrays."""
    return expit(x)


def sigmoid(x: Tensor) -> Tensor:
    out = sigmoid_values(x.data)
    return record_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ValueError("log: non-positive input")
    xd = x.data
    return record_op(np.log(xd), (x,), lambda g: (g / xd,))


def softmax(x: Tensor, axis: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax along axis; masked entries are exactly 0.

    mask is a boolean array of x's shape marking valid entries; every slice
    along the axis must keep at least one.
    """
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xd.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} vs {x.shape}")
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: fully masked slice (degenerate attention)")
        shifted = np.where(mask, xd, -np.inf)
        e = np.exp(shifted - shifted.max(axis=axis, keepdims=True))
        e = np.where(mask, e, 0.0)
    else:
        e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return record_op(out, (x,), bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty part list")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        s = list(p.shape)
        if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(s)) if d != axis):
            raise ShapeError(f"concat: incompatible shapes {parts[0].shape} vs {p.shape}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        out = []
        for k in range(len(sizes)):
            sl[axis] = slice(offsets[k], offsets[k + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return record_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: need 2-d, got {x.shape}")
    return record_op(np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    orig = x.shape
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] of shape {x.shape}")
    xshape = x.shape

    def bwd(g):
        full = np.zeros(xshape)
        full[:, start:stop] = g
        return (full,)

    return record_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] of shape {x.shape}")
    xshape = x.shape

    def bwd(g):
        full = np.zeros(xshape)
        full[start:stop, :] = g
        return (full,)

    return record_op(x.data[start:stop, :].copy(), (x,), bwd)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows by index; backward scatter-adds, so repeats accumulate."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: need 2-d table, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("gather_rows: need a non-empty 1-d id list")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise IndexError(f"gather_rows: id out of range for table with {table.shape[0]} rows")
    tshape = table.shape

    def bwd(g):
        full = np.zeros(tshape)
        np.add.at(full, ids, g)
        return (full,)

    return record_op(table.data[ids], (table,), bwd)


def rowgroup_max(x: Tensor, groups: int) -> Tensor:
    """Max over each block of `groups` consecutive rows; ties go to the first."""
    if x.data.ndim != 2 or x.shape[0] % groups != 0:
        raise ShapeError(f"rowgroup_max: {x.shape} not divisible into groups of {groups}")
    r, c = x.shape
    blocks = x.data.reshape(r // groups, groups, c)
    arg = blocks.argmax(axis=1)  # argmax picks the first maximal row

    def bwd(g):
        full = np.zeros((r // groups, groups, c))
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full.reshape(r, c),)

    return record_op(blocks.max(axis=1), (x,), bwd)


def max_cols(x: Tensor) -> Tensor:
    """Row-wise max over columns -> [r x 1]; ties go to the first column."""
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"max_cols: need non-empty 2-d, got {x.shape}")
    arg = x.data.argmax(axis=1)
    xshape = x.shape

    def bwd(g):
        full = np.zeros(xshape)
        full[np.arange(xshape[0]), arg] = g[:, 0]
        return (full,)

    return record_op(x.data.max(axis=1, keepdims=True), (x,), bwd)


def unfold_cols(x: Tensor, window: int) -> Tensor:
    """Stack each run of `window` columns as one column (1-d conv im2col).

    [d x L] -> [d*window x (L - window + 1)], column j the row-major
    flattening of x[:, j:j+window].
    """
    if x.data.ndim != 2 or window < 1 or x.shape[1] < window:
        raise ShapeError(f"unfold_cols: window {window} of shape {x.shape}")
    d, L = x.shape
    pos = L - window + 1
    idx = np.arange(window)[None, :] + np.arange(pos)[:, None]  # [pos x window]
    out = x.data[:, idx]                     # [d x pos x window]
    out = out.transpose(0, 2, 1).reshape(d * window, pos)

    def bwd(g):
        gw = g.reshape(d, window, pos).transpose(0, 2, 1)  # [d x pos x window]
        full = np.zeros((d, L))
        np.add.at(full.T, idx.reshape(-1), gw.reshape(d, -1).T)
        return (full,)

    return record_op(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    xshape = x.shape
    return record_op(np.asarray(x.data.sum()), (x,),
                     lambda g: (np.full(xshape, float(g)),))


def pick(x: Tensor, index: tuple) -> Tensor:
    """Select one element as a 0-d tensor."""
    xshape = x.shape

    def bwd(g):
        full = np.zeros(xshape)
        full[index] = g
        return (full,)

    return record_op(np.asarray(x.data[index]), (x,), bwd)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to sum to 1; rows must have positive sums."""
    if x.data.ndim != 2:
        raise ShapeError(f"normalize_rows: need 2-d, got {x.shape}")
    s = x.data.sum(axis=1, keepdims=True)
    if np.any(s <= 0.0):
        raise ValueError("normalize_rows: non-positive row sum")
    out = x.data / s

    def bwd(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) / s,)

    return record_op(out, (x,), bwd)


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Reparameterized weight g * v / ||v||; gradients flow to both v and g."""
    if g.size != 1:
        raise ShapeError(f"weight_norm: gain must be scalar, got shape {g.shape}")
    n = float(np.sqrt((v.data * v.data).sum()))
    if n == 0.0:
        raise ValueError("weight_norm: zero-norm direction")
    vd, gd = v.data, float(g.data)
    out = (gd / n) * vd

    def bwd(grad):
        inner = float((vd * grad).sum())
        dv = (gd / n) * (grad - vd * (inner / (n * n)))
        dg = np.asarray(inner / n).reshape(g.data.shape)
        return dv, dg

    return record_op(out, (v, g), bwd)


def dropout_mask(shape, rate: float, rng: RngStream) -> Tensor:
    """Bernoulli(1-rate) keep mask of 0/1 values; never tracked on the tape."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    u = rng.uniform(size=shape)
    return Tensor((np.asarray(u) >= rate).astype(np.float64))


def apply_dropout(x: Tensor, mask: Tensor, rate: float) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-rate)."""
    scaled = Tensor(mask.data / (1.0 - rate))
    return mul(x, scaled)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable, inputs, eps: float = 1e-5,
               rng: Optional[RngStream] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f maps the input tensors to one output tensor; the output is reduced to
    a scalar through a fixed random projection so constant-sum outputs
    (softmax) still exercise the full Jacobian. Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if rng is None:
        rng = RngStream(0)
    for x in xs:
        x.requires_grad = True

    with Tape() as tape:
        y = f(*xs)
        w = rng.uniform(-1.0, 1.0, size=y.shape) if y.size > 1 else np.ones(y.shape)
        proj = Tensor(np.asarray(w).reshape(y.shape))
        loss = sum_all(mul(y, proj))
        backward(loss, tape)

    def scalar_of(*ts):
        out = f(*ts)
        return float((out.data * np.asarray(w).reshape(out.shape)).sum())

    worst = 0.0
    for i, x in enumerate(xs):
        analytic = tape.grad(x)
        if analytic is None:
            analytic = np.zeros(x.shape)
        flat = x.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = scalar_of(*xs)
            flat[k] = orig - eps
            lo = scalar_of(*xs)
            flat[k] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[k]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
