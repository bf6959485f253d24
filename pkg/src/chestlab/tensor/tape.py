"""Reverse-mode differentiation tape over float32 numpy arrays.

A ``Tensor`` wraps a float32 ndarray plus the bookkeeping needed to pull
gradients back through it: parent nodes and a vjp (vector-Jacobian
product) closure.  All vjps are themselves written in terms of the
primitive ops below, so a backward pass can be recorded onto the tape and
differentiated again -- the one double-backward pattern needed by the
critic's gradient penalty.

Tapes are implicit (define-by-run) and single-owner: a graph is built by
one thread and consumed by one call to ``backward``/``grad``.
"""

from __future__ import annotations

import numpy as np

_f32 = np.float32

_grad_enabled = True
_next_id = 0


class no_grad:
    """Context manager suppressing tape recording (eval-mode forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A node in the computation tape: float32 values plus optional grad."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_id", "_parents", "_vjp", "_spent")

    def __init__(self, data, requires_grad=False, name=None):
        global _next_id
        arr = np.asarray(data)
        if arr.dtype != _f32:
            arr = arr.astype(_f32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._id = _next_id
        _next_id += 1
        self._parents = ()
        self._vjp = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or f"t{self._id}"
        return f"Tensor({tag}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar (constants are broadcast float32)
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def backward(self, create_graph=False):
        backward(self, create_graph=create_graph)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_f32))


def _node(data, parents, vjp) -> Tensor:
    """Build an op output; record parents/vjp only when the tape is live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers

def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum g down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.data.shape == tuple(shape):
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.data.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(neg(g), b.data.shape)

    return _node(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        return _unbroadcast(mul(g, b), a.data.shape), _unbroadcast(mul(g, a), b.data.shape)

    return _node(a.data * b.data, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        ga = div(g, b)
        gb = neg(mul(ga, div(a, b)))
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _node(a.data / b.data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (neg(g),)

    return _node(-a.data, (a,), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """a * c for a python scalar c (lighter than a broadcast mul node)."""
    c = float(c)

    def vjp(g):
        return (scale(g, c),)

    return _node(a.data * _f32(c), (a,), vjp)


def powc(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for constant p (a > 0 unless p is a whole number)."""
    p = float(p)

    def vjp(g):
        return (mul(g, scale(powc(a, p - 1.0), p)),)

    return _node(a.data ** _f32(p), (a,), vjp)


def square(a: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, scale(a, 2.0)),)

    return _node(np.square(a.data), (a,), vjp)


def cube(a: Tensor) -> Tensor:
    def vjp(g):
        return (mul(g, scale(square(a), 3.0)),)

    return _node(a.data * a.data * a.data, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def vjp(g):
        return (div(scale(g, 0.5), out),)

    out = _node(out_data, (a,), vjp)
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def vjp(g):
        return (mul(g, out),)

    out = _node(out_data, (a,), vjp)
    return out


def log(a: Tensor) -> Tensor:
    def vjp(g):
        return (div(g, a),)

    return _node(np.log(a.data), (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def vjp(g):
        return (mul(g, sub(Tensor(np.ones((), _f32)), square(out))),)

    out = _node(out_data, (a,), vjp)
    return out


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def vjp(g):
        return (mul(g, Tensor(sign)),)

    return _node(np.abs(a.data), (a,), vjp)


def maximum_const(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c); used as a numerical floor."""
    mask = (a.data > c).astype(_f32)

    def vjp(g):
        return (mul(g, Tensor(mask)),)

    return _node(np.maximum(a.data, _f32(c)), (a,), vjp)


def leaky_relu(a: Tensor, alpha=0.2) -> Tensor:
    slope = np.where(a.data > 0, _f32(1.0), _f32(alpha))

    def vjp(g):
        return (mul(g, Tensor(slope)),)

    return _node(a.data * slope, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(_f32)

    def vjp(g):
        return (mul(g, Tensor(mask)),)

    return _node(a.data * mask, (a,), vjp)


# ---------------------------------------------------------------------------
# shape / reduction primitives

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape

    def vjp(g):
        return (reshape(g, old),)

    return _node(a.data.reshape(shape), (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), vjp)


def concat(parts, axis=0) -> Tensor:
    parts = tuple(parts)
    sizes = [p.data.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(narrow(g, axis, int(offs[i]), sizes[i]) for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    full = a.data.shape
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        return (_embed(g, full, axis, start),)

    return _node(np.ascontiguousarray(a.data[idx]), (a,), vjp)


def _embed(a: Tensor, full_shape, axis: int, start: int) -> Tensor:
    """Adjoint of narrow: place a into a zero tensor of full_shape."""
    length = a.data.shape[axis]

    def vjp(g):
        return (narrow(g, axis, start, length),)

    data = np.zeros(full_shape, _f32)
    idx = [slice(None)] * len(full_shape)
    idx[axis] = slice(start, start + length)
    data[tuple(idx)] = a.data
    return _node(data, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    in_shape = a.data.shape
    if axis is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)

    def vjp(g):
        if not keepdims:
            kshape = list(in_shape)
            for ax in axes:
                kshape[ax] = 1
            g = reshape(g, kshape)
        return (broadcast_to(g, in_shape),)

    return _node(a.data.sum(axis=axes if axis is not None else None, keepdims=keepdims), (a,), vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""

    def vjp(g):
        return matmul(g, transpose(b, (1, 0))), matmul(transpose(a, (1, 0)), g)

    return _node(a.data @ b.data, (a, b), vjp)


# ---------------------------------------------------------------------------
# convolution family (NHWC, weights (kh, kw, Ci, Co))
#
# The three raw routines below form a closed family under differentiation:
#   fwd   : x (N,H,W,Ci), w -> y (N,Ho,Wo,Co)
#   igrad : y-shaped g, w  -> x-shaped  (adjoint of fwd wrt x; also the
#           forward map of a transposed convolution)
#   wgrad : x, y-shaped g  -> w-shaped  (adjoint of fwd wrt w)

def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _conv_out_hw(H, W, kh, kw, sh, sw, ph, pw):
    return (H + 2 * ph - kh) // sh + 1, (W + 2 * pw - kw) // sw + 1


def _im2col(xp, kh, kw, sh, sw, Ho, Wo):
    """Gather conv patches of a padded NHWC array into (N*Ho*Wo, kh*kw*C)."""
    N, Hp, Wp, C = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (N, Ho, Wo, kh, kw, C), (s0, s1 * sh, s2 * sw, s1, s2, s3))
    return view.reshape(N * Ho * Wo, kh * kw * C)


def _pad_nhwc(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    N, H, W, C = x.shape
    xp = np.zeros((N, H + 2 * ph, W + 2 * pw, C), _f32)
    xp[:, ph:ph + H, pw:pw + W, :] = x
    return xp


def _conv_fwd_raw(x, w, stride, pad):
    sh, sw = stride
    ph, pw = pad
    kh, kw, Ci, Co = w.shape
    N, H, W, _ = x.shape
    Ho, Wo = _conv_out_hw(H, W, kh, kw, sh, sw, ph, pw)
    cols = _im2col(_pad_nhwc(x, ph, pw), kh, kw, sh, sw, Ho, Wo)
    y = cols @ w.reshape(kh * kw * Ci, Co)
    return y.reshape(N, Ho, Wo, Co)


def _conv_wgrad_raw(x, g, kshape, stride, pad):
    sh, sw = stride
    ph, pw = pad
    kh, kw, Ci, Co = kshape
    N, Ho, Wo, _ = g.shape
    cols = _im2col(_pad_nhwc(x, ph, pw), kh, kw, sh, sw, Ho, Wo)
    gw = cols.T @ g.reshape(N * Ho * Wo, Co)
    return gw.reshape(kh, kw, Ci, Co)


def _conv_igrad_raw(g, w, in_hw, stride, pad):
    sh, sw = stride
    ph, pw = pad
    kh, kw, Ci, Co = w.shape
    N, Ho, Wo, _ = g.shape
    H, W = in_hw
    colg = g.reshape(N * Ho * Wo, Co) @ w.reshape(kh * kw * Ci, Co).T
    colg = colg.reshape(N, Ho, Wo, kh, kw, Ci)
    xp = np.zeros((N, H + 2 * ph, W + 2 * pw, Ci), _f32)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + sh * Ho:sh, j:j + sw * Wo:sw, :] += colg[:, :, :, i, j, :]
    return xp[:, ph:ph + H, pw:pw + W, :] if (ph or pw) else xp


def conv2d(x: Tensor, w: Tensor, stride=1, pad=1) -> Tensor:
    """Cross-correlation of NHWC x with (kh,kw,Ci,Co) weights."""
    stride = _pair(stride)
    pad = _pair(pad)
    in_hw = x.data.shape[1:3]
    kshape = w.data.shape

    def vjp(g):
        gx = conv2d_igrad(g, w, in_hw, stride, pad)
        gw = conv2d_wgrad(x, g, kshape, stride, pad)
        return gx, gw

    return _node(_conv_fwd_raw(x.data, w.data, stride, pad), (x, w), vjp)


def conv2d_igrad(g: Tensor, w: Tensor, in_hw, stride, pad) -> Tensor:
    """Adjoint of conv2d wrt its input; linear in both arguments."""
    stride = _pair(stride)
    pad = _pair(pad)
    in_hw = tuple(in_hw)
    kshape = w.data.shape

    def vjp(c):
        cg = conv2d(c, w, stride, pad)
        cw = conv2d_wgrad(c, g, kshape, stride, pad)
        return cg, cw

    return _node(_conv_igrad_raw(g.data, w.data, in_hw, stride, pad), (g, w), vjp)


def conv2d_wgrad(x: Tensor, g: Tensor, kshape, stride, pad) -> Tensor:
    """Adjoint of conv2d wrt its weights; bilinear in (x, g)."""
    stride = _pair(stride)
    pad = _pair(pad)
    kshape = tuple(kshape)
    in_hw = x.data.shape[1:3]

    def vjp(cw):
        gx = conv2d_igrad(g, cw, in_hw, stride, pad)
        gg = conv2d(x, cw, stride, pad)
        return gx, gg

    return _node(_conv_wgrad_raw(x.data, g.data, kshape, stride, pad), (x, g), vjp)


def conv_transpose2d(x: Tensor, w: Tensor, stride=1, pad=1, out_hw=None) -> Tensor:
    """Transposed convolution: x (N,h,w,Cin), weights (kh,kw,Cout,Cin).

    Weight layout matches the regular conv that this op is the adjoint of,
    so ``out_hw`` fixes the ambiguity that striding introduces (the usual
    output_padding knob, made explicit).
    """
    stride = _pair(stride)
    pad = _pair(pad)
    if out_hw is None:
        kh, kw, _, _ = w.data.shape
        h, ww_ = x.data.shape[1:3]
        out_hw = ((h - 1) * stride[0] - 2 * pad[0] + kh,
                  (ww_ - 1) * stride[1] - 2 * pad[1] + kw)
    return conv2d_igrad(x, w, tuple(out_hw), stride, pad)


# ---------------------------------------------------------------------------
# backward

def _topo(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or node._vjp is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _pullback(root: Tensor, seed: Tensor):
    order = _topo(root)
    cot = {id(root): seed}
    for node in reversed(order):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        gs = node._vjp(g)
        for p, gp in zip(node._parents, gs):
            if gp is None or not p.requires_grad:
                continue
            cur = cot.get(id(p))
            cot[id(p)] = gp if cur is None else add(cur, gp)
        if node._vjp is not None and node._parents:
            # leaves of this traversal keep their cotangents in `cot`
            for p in node._parents:
                if p._vjp is None and p.requires_grad and id(p) in cot:
                    pass
    return cot


def backward(loss: Tensor, create_graph=False):
    """Populate .grad on every reachable requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad (no reachable parameters)")
    if loss._spent:
        raise RuntimeError("backward called twice on the same tape; rebuild the graph first")
    loss._spent = True

    seed = Tensor(np.ones_like(loss.data))
    if create_graph:
        cot = _pullback(loss, seed)
    else:
        with no_grad():
            cot = _pullback(loss, seed)

    order = _topo(loss)
    leaves = set()
    for node in order:
        for p in node._parents:
            if p._vjp is None and p.requires_grad:
                leaves.add(id(p))
                _leaf_registry[id(p)] = p
    if loss._vjp is None:
        leaves.add(id(loss))
        _leaf_registry[id(loss)] = loss
    for lid in leaves:
        g = cot.get(lid)
        if g is None:
            continue
        leaf = _leaf_registry.pop(lid)
        if leaf.grad is None:
            leaf.grad = g.data.copy()
        else:
            leaf.grad += g.data
    _leaf_registry.clear()


_leaf_registry: dict = {}


def grad(output: Tensor, inputs, create_graph=False):
    """Return cotangent Tensors of ``output`` wrt ``inputs`` (no .grad writes)."""
    if output.data.size != 1:
        raise ValueError("grad needs a scalar output")
    inputs = list(inputs)
    seed = Tensor(np.ones_like(output.data))
    if create_graph:
        cot = _pullback(output, seed)
    else:
        with no_grad():
            cot = _pullback(output, seed)
    outs = []
    for t in inputs:
        g = cot.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        outs.append(g)
    return outs
