"""Dense NCHW tensors with reverse-mode automatic differentiation.

Every Tensor wraps a contiguous numpy array. Operations on tensors that
require gradients attach a :class:`Node` to their output; :func:`backward`
collects the nodes reachable from a scalar loss into a :class:`Graph`,
orders them topologically and propagates gradients in reverse.

Only float32 (training) and float64 (gradient checks) are supported.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "BroadcastError",
    "Tensor",
    "Node",
    "Graph",
    "backward",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "scalar_mul",
    "add_scalar",
    "rsub_scalar",
    "sigmoid",
    "relu",
    "softplus",
    "abs",
    "exp_neg",
    "reduce_sum",
    "mean",
    "conv2d",
    "global_avg_pool",
    "global_max_pool",
    "bilinear_resize",
    "concat",
]

_FLOAT_DTYPES = (np.float32, np.float64)
_AXES = ("N", "C", "H", "W")

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class BroadcastError(ShapeError):
    """Raised when two shapes cannot be broadcast against each other."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded operation: its tag, its inputs and how to differentiate it."""

    __slots__ = ("op", "inputs", "output_id", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        # an id, not a reference: tensor -> node -> tensor would be a cycle and
        # keep whole graphs alive until the cyclic collector runs
        self.output_id = None
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    """A dense array with an optional gradient.

    Activations and parameters are rank 4 (N, C, H, W); convolution biases
    are the only rank-1 tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim not in (1, 4):
            raise ShapeError(f"tensors must be rank 4 (N, C, H, W) or rank 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return rsub_scalar(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(t.requires_grad or t.node is not None for t in inputs):
        node = Node(op, tuple(inputs), backward_fn)
        node.output_id = id(out)
        out.node = node
        out.requires_grad = True
    return out


class Graph:
    """Operations reachable from one output, in topological order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order = []
        seen = set()
        stack = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            node = tensor.node
            if node is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((tensor, True))
            for inp in reversed(node.inputs):
                if inp.node is not None and id(inp.node) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def leaves(self) -> list:
        """Leaf tensors that require grad, in first-use order."""
        found = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp.node is None and inp.requires_grad:
                    found.setdefault(id(inp), inp)
        return list(found.values())

    def run_backward(self, output: Tensor, seed: np.ndarray) -> dict:
        grads = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(node.output_id, None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not (inp.requires_grad or inp.node is not None):
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {ig.shape} does not match input {inp.shape}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        return grads


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
    """Backpropagate from a (1, 1, 1, 1) loss.

    Gradients are accumulated into ``.grad`` of every reachable leaf that
    requires grad. Returns a mapping from tensor to gradient array covering
    those leaves plus every tensor in ``wrt`` (zero-filled when unused).
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar loss of shape (1, 1, 1, 1), got {loss.shape}")
    graph = Graph.from_output(loss)
    leaves = graph.leaves()
    if loss.node is None and loss.requires_grad:
        leaves = [loss]
    grads = graph.run_backward(loss, np.ones_like(loss.data))
    result = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    for t in wrt or ():
        if t not in result:
            g = grads.get(id(t))
            result[t] = np.zeros_like(t.data) if g is None else g
    return result


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def _check_rank4(t: Tensor, op: str) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{op}: expected a rank-4 tensor, got shape {t.shape}")


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if len(a) != 4 or len(b) != 4:
        raise ShapeError(f"{op}: expected rank-4 operands, got {a} and {b}")
    bad = [ax for ax, x, y in zip(_AXES, a, b) if x != y and x != 1 and y != 1]
    if bad:
        raise BroadcastError(f"{op}: cannot broadcast {a} with {b} along axes {', '.join(bad)}")
    return tuple(max(x, y) for x, y in zip(a, b))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _record(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scalar_mul", x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _record("add_scalar", x.data + x.dtype.type(c), (x,), lambda g: (g,))


def rsub_scalar(c: float, x: Tensor) -> Tensor:
    """``c - x``."""
    return _record("rsub_scalar", x.dtype.type(c) - x.data, (x,), lambda g: (-g,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return _record("softplus", _softplus_np(xd), (x,), lambda g: (g * _sigmoid_np(xd),))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def exp_neg(x: Tensor) -> Tensor:
    """``e^(-x)``."""
    e = np.exp(-x.data)
    return _record("exp_neg", e, (x,), lambda g: (-g * e,))


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    total = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)
    return _record("reduce_sum", total, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean(x: Tensor) -> Tensor:
    return scalar_mul(reduce_sum(x), 1.0 / x.data.size)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    ref = tensors[0].shape
    for t in tensors:
        _check_rank4(t, "concat")
        if (t.shape[0], t.shape[2], t.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat: shape {t.shape} does not match {ref} outside the channel axis")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=1)
    return _record("concat", data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=1)))


# ----------------------------------------------------------------------------
# convolution and pooling
# ----------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an (N, Cin, H, W) input with (Cout, Cin, kh, kw) weights."""
    _check_rank4(x, "conv2d")
    _check_rank4(weight, "conv2d")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has C={cin} channels but weight expects Cin={wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match Cout={cout}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} along H/W")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    needs_gx = x.requires_grad or x.node is not None
    if stride == 1 and kh * kw > 1 and cout < cin:
        out, _backward = _conv_narrow(xp, weight.data, ho, wo, padding, (h, w), bias is not None, needs_gx)
    else:
        out, _backward = _conv_im2col(xp, weight.data, ho, wo, stride, padding, (h, w), bias is not None, needs_gx)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record("conv2d", out, inputs, _backward)



# Both kernels work on channel-major (C, N, H, W) data and return the
# output in that layout plus a backward closure taking an NCHW gradient.


def _conv_im2col(xp, wd, ho, wo, stride, padding, hw, has_bias, needs_gx):
    # rows of the column matrix are contiguous copies of shifted input slices
    n, cin = xp.shape[:2]
    cout, _, kh, kw = wd.shape
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(cin * kh * kw, -1)
    wmat = wd.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo)

    def _backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gx = None
        if needs_gx:
            gcols = (wmat.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            gpad = np.zeros((cin, n) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = _crop(gpad, padding, hw)
        return _pack(gx, gw, g2.sum(axis=1) if has_bias else None)

    return out, _backward


def _conv_narrow(xp, wd, ho, wo, padding, hw, has_bias, needs_gx):
    # stride 1, few output channels: apply every kernel tap to the whole
    # padded input at once, then add the shifted per-tap responses
    n, cin, hp, wp = xp.shape
    cout, _, kh, kw = wd.shape
    xc = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(cin, -1)
    wst = np.ascontiguousarray(wd.transpose(2, 3, 0, 1)).reshape(kh * kw * cout, cin)
    resp = (wst @ xc).reshape(kh, kw, cout, n, hp, wp)
    out = resp[0, 0, :, :, :ho, :wo].copy()
    for i in range(kh):
        for j in range(kw):
            if i or j:
                out += resp[i, j, :, :, i : i + ho, j : j + wo]

    def _backward(g):
        g2 = g.transpose(1, 0, 2, 3)
        gst = np.zeros((kh, kw, cout, n, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gst[i, j, :, :, i : i + ho, j : j + wo] = g2
        gst = gst.reshape(kh * kw * cout, -1)
        gw = (gst @ xc.T).reshape(kh, kw, cout, cin).transpose(2, 3, 0, 1)
        gx = _crop((wst.T @ gst).reshape(cin, n, hp, wp), padding, hw) if needs_gx else None
        return _pack(gx, np.ascontiguousarray(gw), g2.sum(axis=(1, 2, 3)) if has_bias else None)

    return out, _backward


def _crop(gpad_cn, padding, hw):
    h, w = hw
    return np.ascontiguousarray(gpad_cn[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3))


def _pack(gx, gw, gb):
    return (gx, gw) if gb is None else (gx, gw, gb)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank4(x, "global_avg_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"global_avg_pool: empty spatial extent {h}x{w}")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = 1.0 / (h * w)
    return _record("global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g * scale, x.shape).astype(x.dtype),))


def global_max_pool(x: Tensor) -> Tensor:
    """Spatial max; the gradient goes to the first maximum in row-major order."""
    _check_rank4(x, "global_max_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"global_max_pool: empty spatial extent {h}x{w}")
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

    def _backward(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
        return (gx.reshape(n, c, h, w),)

    return _record("global_max_pool", out, (x,), _backward)


def _interp_matrix(size_in: int, size_out: int, align_corners: bool, dtype) -> np.ndarray:
    m = np.zeros((size_out, size_in), dtype=dtype)
    dst = np.arange(size_out, dtype=np.float64)
    if align_corners:
        src = dst * ((size_in - 1) / (size_out - 1)) if size_out > 1 else np.zeros(size_out)
    else:
        src = np.maximum((dst + 0.5) * (size_in / size_out) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), size_in - 1)
    i1 = np.minimum(i0 + 1, size_in - 1)
    lam = src - i0
    rows = np.arange(size_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = False) -> Tensor:
    """Bilinear resampling; half-pixel centres unless ``align_corners``."""
    _check_rank4(x, "bilinear_resize")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return _record("bilinear_resize", x.data.copy(), (x,), lambda g: (g,))
    ry = _interp_matrix(h, out_h, align_corners, x.dtype)
    rx = _interp_matrix(w, out_w, align_corners, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return _record("bilinear_resize", out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))
