"""Dense float64 tensors on a reverse-mode differentiation tape.

The backward pass can itself be recorded (``create_graph=True``), so a loss
that contains a gradient, such as an attribution map, stays differentiable
and a second backward pass yields correct second-order derivatives.  Every
primitive's backward rule is written with the same public ops, which is what
makes the higher-order path work without special cases.

Conventions baked in here:
  * everything is float64,
  * d|x|/dx at 0 is 0, dReLU/dx at 0 is 0,
  * max-pool routes gradient to the first argmax in row-major window order
    and treats that selection as locally constant,
  * non-finite values raise instead of propagating.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Sequence

import numpy as np


class EngineError(Exception):
    """Base class for failures inside the differentiation engine."""


class ShapeError(EngineError):
    pass


class NonFiniteError(EngineError):
    pass


class TapeError(EngineError):
    pass


_TAPE_COUNTER = 0


class Node:
    __slots__ = ("op", "inputs", "value", "ctx", "requires_grad")

    def __init__(self, op, inputs, value, ctx, requires_grad):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx
        self.requires_grad = requires_grad


class Tape:
    """Append-only record of operations; node inputs always precede the node."""

    def __init__(self):
        global _TAPE_COUNTER
        _TAPE_COUNTER += 1
        self.generation = _TAPE_COUNTER
        self.nodes: list[Node] = []
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad=False) -> "Tensor":
        arr = np.asarray(value, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("leaf value contains NaN/Inf")
        self.nodes.append(Node("leaf", (), arr, None, requires_grad))
        return Tensor(arr, self, len(self.nodes) - 1)

    def tensor(self, node_id: int) -> "Tensor":
        return Tensor(self.nodes[node_id].value, self, node_id)

    class _Paused:
        def __init__(self, tape):
            self.tape = tape

        def __enter__(self):
            self.prev = self.tape.recording
            self.tape.recording = False

        def __exit__(self, *exc):
            self.tape.recording = self.prev

    def paused(self):
        """Context manager: ops compute values but record nothing."""
        return Tape._Paused(self)

    def replay(self) -> list[np.ndarray]:
        """Re-execute every forward record; used to check reproducibility."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.value)
            else:
                values.append(_EVAL[node.op]([values[i] for i in node.inputs], node.ctx))
        return values


class Tensor:
    """A dense float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

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
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

_EVAL: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}

# ops that only move data around cannot create NaN/Inf from finite inputs
_NO_FINITE_CHECK = {"reshape", "transpose", "gather", "broadcast_to", "relu", "abs", "neg"}


def _check_finite(kind: str, arr: np.ndarray):
    if kind not in _NO_FINITE_CHECK and not np.isfinite(arr).all():
        raise NonFiniteError(f"op '{kind}' produced non-finite values")


def _find_tape(inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise TapeError("operands live on different tapes")
    return tape


def _value(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _apply(kind: str, inputs: Sequence, ctx=None) -> Tensor:
    tape = _find_tape(inputs)
    values = [_value(x) for x in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = _EVAL[kind](values, ctx)
    _check_finite(kind, out)
    if tape is None or not tape.recording:
        return Tensor(out)
    ids = []
    requires_grad = False
    for x, v in zip(inputs, values):
        if isinstance(x, Tensor) and x.tape is tape and x.node is not None:
            ids.append(x.node)
            requires_grad = requires_grad or tape.nodes[x.node].requires_grad
        else:
            ids.append(tape.leaf(v).node)
    tape.nodes.append(Node(kind, tuple(ids), out, ctx, requires_grad))
    return Tensor(out, tape, len(tape.nodes) - 1)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _eval_add(v, ctx):
    _broadcast_shape("add", v[0], v[1])
    return v[0] + v[1]


def _eval_sub(v, ctx):
    _broadcast_shape("sub", v[0], v[1])
    return v[0] - v[1]


def _eval_mul(v, ctx):
    _broadcast_shape("mul", v[0], v[1])
    return v[0] * v[1]


def _eval_div(v, ctx):
    a, b = v
    _broadcast_shape("div", a, b)
    if np.abs(b).min() < 1e-300:
        raise EngineError("degenerate divisor")
    return a / b


_EVAL["add"] = _eval_add
_EVAL["sub"] = _eval_sub
_EVAL["mul"] = _eval_mul
_EVAL["div"] = _eval_div
_EVAL["neg"] = lambda v, ctx: -v[0]


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Undo broadcasting: reduce g back down to `shape`."""
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and g.shape[lead + i] != 1
    )
    return reshape(reduce_sum(g, axes, keepdims=True), shape)


def _in(tape, node, i) -> Tensor:
    return tape.tensor(node.inputs[i])


def _vjp_add(tape, node, out_id, g, needs):
    a, b = tape.nodes[node.inputs[0]].value, tape.nodes[node.inputs[1]].value
    return [
        _sum_to(g, a.shape) if needs[0] else None,
        _sum_to(g, b.shape) if needs[1] else None,
    ]


def _vjp_sub(tape, node, out_id, g, needs):
    a, b = tape.nodes[node.inputs[0]].value, tape.nodes[node.inputs[1]].value
    return [
        _sum_to(g, a.shape) if needs[0] else None,
        _sum_to(neg(g), b.shape) if needs[1] else None,
    ]


def _vjp_mul(tape, node, out_id, g, needs):
    a, b = _in(tape, node, 0), _in(tape, node, 1)
    return [
        _sum_to(mul(g, b), a.shape) if needs[0] else None,
        _sum_to(mul(g, a), b.shape) if needs[1] else None,
    ]


def _vjp_div(tape, node, out_id, g, needs):
    a, b = _in(tape, node, 0), _in(tape, node, 1)
    out = tape.tensor(out_id)
    return [
        _sum_to(div(g, b), a.shape) if needs[0] else None,
        _sum_to(neg(div(mul(g, out), b)), b.shape) if needs[1] else None,
    ]


def _vjp_neg(tape, node, out_id, g, needs):
    return [neg(g)]


_VJP["add"] = _vjp_add
_VJP["sub"] = _vjp_sub
_VJP["mul"] = _vjp_mul
_VJP["div"] = _vjp_div
_VJP["neg"] = _vjp_neg


def elementwise(op_kind: str, a, b) -> Tensor:
    """Broadcasted add/sub/mul/div, dispatched by name."""
    if op_kind not in ("add", "sub", "mul", "div"):
        raise EngineError(f"unknown elementwise op '{op_kind}'")
    return _apply(op_kind, [a, b])


def add(a, b) -> Tensor:
    return _apply("add", [a, b])


def sub(a, b) -> Tensor:
    return _apply("sub", [a, b])


def mul(a, b) -> Tensor:
    return _apply("mul", [a, b])


def div(a, b) -> Tensor:
    return _apply("div", [a, b])


def neg(a) -> Tensor:
    return _apply("neg", [a])


# ---------------------------------------------------------------------------
# unary nonlinearities
# ---------------------------------------------------------------------------

def _eval_log(v, ctx):
    if not (v[0] > 0).all():
        raise NonFiniteError("log of non-positive value")
    return np.log(v[0])


def _eval_sqrt(v, ctx):
    if not (v[0] >= 0).all():
        raise NonFiniteError("sqrt of negative value")
    return np.sqrt(v[0])


_EVAL["relu"] = lambda v, ctx: np.maximum(v[0], 0.0)
_EVAL["abs"] = lambda v, ctx: np.abs(v[0])
_EVAL["exp"] = lambda v, ctx: np.exp(v[0])
_EVAL["log"] = _eval_log
_EVAL["sqrt"] = _eval_sqrt


def _vjp_relu(tape, node, out_id, g, needs):
    mask = (tape.nodes[node.inputs[0]].value > 0.0).astype(np.float64)
    return [mul(g, mask)]


def _vjp_abs(tape, node, out_id, g, needs):
    sign = np.sign(tape.nodes[node.inputs[0]].value)  # sign(0) == 0
    return [mul(g, sign)]


def _vjp_exp(tape, node, out_id, g, needs):
    return [mul(g, tape.tensor(out_id))]


def _vjp_log(tape, node, out_id, g, needs):
    return [div(g, _in(tape, node, 0))]


def _vjp_sqrt(tape, node, out_id, g, needs):
    # clamp the denominator so that d(sqrt)/dx at exactly 0 stays finite;
    # callers at 0 always multiply this branch by 0 anyway
    y = tape.tensor(out_id)
    denom = add(relu(sub(y, 1e-150)), 1e-150)
    return [div(mul(g, 0.5), denom)]


_VJP["relu"] = _vjp_relu
_VJP["abs"] = _vjp_abs
_VJP["exp"] = _vjp_exp
_VJP["log"] = _vjp_log
_VJP["sqrt"] = _vjp_sqrt


def relu(x) -> Tensor:
    return _apply("relu", [x])


def absolute(x) -> Tensor:
    return _apply("abs", [x])


def exp(x) -> Tensor:
    return _apply("exp", [x])


def log(x) -> Tensor:
    return _apply("log", [x])


def sqrt(x) -> Tensor:
    return _apply("sqrt", [x])


# ---------------------------------------------------------------------------
# shape and indexing ops
# ---------------------------------------------------------------------------


def _eval_reshape(v, ctx):
    return np.reshape(v[0], ctx["shape"])


def _eval_transpose(v, ctx):
    return np.transpose(v[0], ctx["axes"])


def _eval_broadcast(v, ctx):
    if v[0].shape == tuple(ctx["shape"]):
        return v[0]
    return np.broadcast_to(v[0], ctx["shape"])


def _eval_gather(v, ctx):
    return np.take(v[0], ctx["idx"])


def _eval_scatter_add(v, ctx):
    size = int(np.prod(ctx["out_shape"], dtype=np.int64))
    flat = np.bincount(ctx["idx"].ravel(), weights=v[0].ravel(), minlength=size)
    return flat.reshape(ctx["out_shape"])


def _eval_sum(v, ctx):
    return np.sum(v[0], axis=ctx["axes"], keepdims=ctx["keepdims"])


def _eval_matmul(v, ctx):
    a, b = v
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return a @ b


_EVAL["reshape"] = _eval_reshape
_EVAL["transpose"] = _eval_transpose
_EVAL["broadcast_to"] = _eval_broadcast
_EVAL["gather"] = _eval_gather
_EVAL["scatter_add"] = _eval_scatter_add
_EVAL["sum"] = _eval_sum
_EVAL["matmul"] = _eval_matmul


def _vjp_reshape(tape, node, out_id, g, needs):
    return [reshape(g, tape.nodes[node.inputs[0]].value.shape)]


def _vjp_transpose(tape, node, out_id, g, needs):
    inverse = tuple(np.argsort(node.ctx["axes"]))
    return [transpose(g, inverse)]


def _vjp_broadcast(tape, node, out_id, g, needs):
    return [_sum_to(g, tape.nodes[node.inputs[0]].value.shape)]


def _vjp_gather(tape, node, out_id, g, needs):
    in_shape = tape.nodes[node.inputs[0]].value.shape
    return [scatter_add(g, node.ctx["idx"], in_shape)]


def _vjp_scatter_add(tape, node, out_id, g, needs):
    src_shape = tape.nodes[node.inputs[0]].value.shape
    return [reshape(gather(g, node.ctx["idx"]), src_shape)]


def _vjp_sum(tape, node, out_id, g, needs):
    in_shape = tape.nodes[node.inputs[0]].value.shape
    axes, keepdims = node.ctx["axes"], node.ctx["keepdims"]
    if axes is None:
        kd_shape = (1,) * len(in_shape)
    elif keepdims:
        kd_shape = g.shape
    else:
        kd_shape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
    return [broadcast_to(reshape(g, kd_shape), in_shape)]


def _vjp_matmul(tape, node, out_id, g, needs):
    a, b = _in(tape, node, 0), _in(tape, node, 1)
    return [
        matmul(g, transpose(b, (1, 0))) if needs[0] else None,
        matmul(transpose(a, (1, 0)), g) if needs[1] else None,
    ]


_VJP["reshape"] = _vjp_reshape
_VJP["transpose"] = _vjp_transpose
_VJP["broadcast_to"] = _vjp_broadcast
_VJP["gather"] = _vjp_gather
_VJP["scatter_add"] = _vjp_scatter_add
_VJP["sum"] = _vjp_sum
_VJP["matmul"] = _vjp_matmul


def reshape(x, shape) -> Tensor:
    return _apply("reshape", [x], {"shape": tuple(shape)})


def transpose(x, axes) -> Tensor:
    return _apply("transpose", [x], {"axes": tuple(axes)})


def broadcast_to(x, shape) -> Tensor:
    return _apply("broadcast_to", [x], {"shape": tuple(shape)})


def gather(x, idx: np.ndarray) -> Tensor:
    """Pick flat indices out of x; the index array is a constant."""
    return _apply("gather", [x], {"idx": np.asarray(idx, dtype=np.int64)})


def scatter_add(src, idx: np.ndarray, out_shape) -> Tensor:
    """Adjoint of gather: accumulate src entries into a zeroed array."""
    idx = np.asarray(idx, dtype=np.int64)
    src_size = _value(src).size
    if idx.size != src_size:
        raise ShapeError(f"scatter_add: {idx.size} indices for {src_size} values")
    return _apply("scatter_add", [src], {"idx": idx, "out_shape": tuple(out_shape)})


def reduce_sum(x, axes=None, keepdims=False) -> Tensor:
    if axes is not None:
        nd = _value(x).ndim
        if isinstance(axes, int):
            axes = (axes,)
        axes = tuple(sorted(a % nd for a in axes))
    return _apply("sum", [x], {"axes": axes, "keepdims": keepdims})


def reduce_mean(x, axes=None, keepdims=False) -> Tensor:
    arr = _value(x)
    if axes is None:
        n = arr.size
    else:
        ax = (axes,) if isinstance(axes, int) else axes
        n = int(np.prod([arr.shape[a % arr.ndim] for a in ax]))
    return mul(reduce_sum(x, axes, keepdims), 1.0 / n)


def reduce(x, axes, kind: str) -> Tensor:
    """Sum or mean over the given axes."""
    if kind == "sum":
        return reduce_sum(x, axes)
    if kind == "mean":
        return reduce_mean(x, axes)
    raise EngineError(f"unknown reduction '{kind}'")


def matmul(a, b) -> Tensor:
    return _apply("matmul", [a, b])


# ---------------------------------------------------------------------------
# convolution and pooling (built from gather / scatter_add / matmul)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=256)
def _pad_indices(n, c, h, w, p):
    hp, wp = h + 2 * p, w + 2 * p
    ni = np.arange(n, dtype=np.int64)[:, None, None, None]
    ci = np.arange(c, dtype=np.int64)[None, :, None, None]
    hi = np.arange(h, dtype=np.int64)[None, None, :, None] + p
    wi = np.arange(w, dtype=np.int64)[None, None, None, :] + p
    return (((ni * c + ci) * hp + hi) * wp + wi).ravel()


@lru_cache(maxsize=256)
def _im2col_indices(n, c, hp, wp, k, s):
    oh = (hp - k) // s + 1
    ow = (wp - k) // s + 1
    ni = np.arange(n, dtype=np.int64)[:, None, None, None, None, None]
    oi = np.arange(oh, dtype=np.int64)[None, :, None, None, None, None] * s
    oj = np.arange(ow, dtype=np.int64)[None, None, :, None, None, None] * s
    ci = np.arange(c, dtype=np.int64)[None, None, None, :, None, None]
    ki = np.arange(k, dtype=np.int64)[None, None, None, None, :, None]
    kj = np.arange(k, dtype=np.int64)[None, None, None, None, None, :]
    idx = ((ni * c + ci) * hp + oi + ki) * wp + oj + kj
    return idx.reshape(n * oh * ow, c * k * k), oh, ow


@lru_cache(maxsize=256)
def _pool_window_indices(n, c, h, w, k, s):
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    ni = np.arange(n, dtype=np.int64)[:, None, None, None, None, None]
    ci = np.arange(c, dtype=np.int64)[None, :, None, None, None, None]
    oi = np.arange(oh, dtype=np.int64)[None, None, :, None, None, None] * s
    oj = np.arange(ow, dtype=np.int64)[None, None, None, :, None, None] * s
    ki = np.arange(k, dtype=np.int64)[None, None, None, None, :, None]
    kj = np.arange(k, dtype=np.int64)[None, None, None, None, None, :]
    idx = ((ni * c + ci) * h + oi + ki) * w + oj + kj
    return idx.reshape(n, c, oh, ow, k * k), oh, ow


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIkk kernel (no flip)."""
    xv, wv = _value(x), _value(weight)
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {xv.shape}, {wv.shape}")
    n, c, h, w = xv.shape
    o, i, kh, kw = wv.shape
    if kh != kw:
        raise ShapeError("conv2d kernels must be square")
    k = kh
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {i}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {hp}x{wp}")
    if padding > 0:
        x = scatter_add(x, _pad_indices(n, c, h, w, padding), (n, c, hp, wp))
    col_idx, oh, ow = _im2col_indices(n, c, hp, wp, k, stride)
    cols = gather(x, col_idx)                              # (n*oh*ow, c*k*k)
    wmat = transpose(reshape(weight, (o, c * k * k)), (1, 0))
    out = matmul(cols, wmat)                               # (n*oh*ow, o)
    out = transpose(reshape(out, (n, oh, ow, o)), (0, 3, 1, 2))
    if bias is not None:
        out = add(out, reshape(bias, (1, o, 1, 1)))
    return out


def maxpool2d(x, k: int, s: int) -> Tensor:
    """Max pooling; gradient flows to the first argmax in each window."""
    xv = _value(x)
    if xv.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {xv.shape}")
    n, c, h, w = xv.shape
    if k > h or k > w:
        raise ShapeError(f"pooling window {k} exceeds spatial extent {h}x{w}")
    win_idx, oh, ow = _pool_window_indices(n, c, h, w, k, s)
    windows = xv.ravel()[win_idx]              # (n, c, oh, ow, k*k)
    local = np.argmax(windows, axis=-1)
    chosen = np.take_along_axis(win_idx, local[..., None], axis=-1)[..., 0]
    return gather(x, chosen)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(out: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar `out` with respect to each tensor in `wrt`.

    With ``create_graph=True`` every arithmetic step of this pass is itself
    recorded on the tape, so a later backward over a function of the returned
    gradients produces correct second-order derivatives.  With
    ``create_graph=False`` the returned tensors are untracked.
    """
    if out.tape is None or out.node is None:
        raise TapeError("backward target is not tracked on a tape")
    if out.size != 1:
        raise ShapeError(f"backward target must be a scalar, got shape {out.shape}")
    tape = out.tape
    for t in wrt:
        if t.tape is not tape or t.node is None:
            raise TapeError("wrt tensor is not tracked on the same tape")

    limit = out.node
    nodes = tape.nodes
    wrt_ids = {t.node for t in wrt}

    # a node needs a gradient iff some wrt tensor is reachable from it
    needed = bytearray(limit + 1)
    for nid in wrt_ids:
        if nid <= limit:
            needed[nid] = 1
    for nid in range(limit + 1):
        if needed[nid]:
            continue
        for i in nodes[nid].inputs:
            if needed[i]:
                needed[nid] = 1
                break

    def _zero(t: Tensor) -> Tensor:
        z = np.zeros(t.shape)
        return tape.leaf(z) if create_graph else Tensor(z)

    results: dict[int, Tensor] = {}
    if needed[limit]:
        guard = tape.paused() if not create_graph else _NullCtx()
        with guard:
            seed = np.ones(out.shape)
            grads: dict[int, Tensor] = {limit: tape.leaf(seed) if create_graph else Tensor(seed)}
            for nid in range(limit, -1, -1):
                g = grads.pop(nid, None)
                if g is None:
                    continue
                if nid in wrt_ids:
                    results[nid] = g
                node = nodes[nid]
                if node.op == "leaf":
                    continue
                needs = tuple(
                    bool(needed[i]) and nodes[i].requires_grad for i in node.inputs
                )
                if not any(needs):
                    continue
                contribs = _VJP[node.op](tape, node, nid, g, needs)
                for i, contrib in zip(node.inputs, contribs):
                    if contrib is None or not needed[i] or not nodes[i].requires_grad:
                        continue
                    prev = grads.get(i)
                    grads[i] = contrib if prev is None else add(prev, contrib)

    out_list = []
    for t in wrt:
        got = results.get(t.node)
        out_list.append(got if got is not None else _zero(t))
    return out_list


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# finite differences (verification oracle)
# ---------------------------------------------------------------------------


def finite_diff(f: Callable, x, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar-valued `f` at `x`.

    `f` receives an untracked Tensor and must return a scalar Tensor or float.
    Deliberately independent of the tape machinery above.
    """
    if eps <= 0:
        raise EngineError("finite_diff step must be positive")
    x0 = np.array(_value(x), dtype=np.float64)
    grad = np.zeros_like(x0)
    buf = x0.copy()
    bf, xf, gf = buf.ravel(), x0.ravel(), grad.ravel()

    def _eval_at() -> float:
        r = f(Tensor(buf.copy()))
        val = float(r.data) if isinstance(r, Tensor) else float(r)
        if not np.isfinite(val):
            raise NonFiniteError("finite_diff: objective returned non-finite value")
        return val

    for i in range(xf.size):
        bf[i] = xf[i] + eps
        fp = _eval_at()
        bf[i] = xf[i] - eps
        fm = _eval_at()
        bf[i] = xf[i]
        gf[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad)
