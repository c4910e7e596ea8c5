"""Dense tensors with tape-style reverse-mode differentiation.

Every op builds its output eagerly with numpy and records a closure that
maps the output cotangent to input cotangents.  ``backward`` sorts the
recorded graph topologically and visits each node exactly once.

Precision is a process-wide switch: float32 for training, float64 for
gradient checks (``with precision("f64"): ...``).
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError

LAYER_NORM_EPS = 1e-5
NORMALIZE_EPS = 1e-8

_DTYPES = {"f32": np.float32, "f64": np.float64}


class _Settings:
    dtype = np.float32
    check_finite = True


class _Local(threading.local):
    grad_enabled = True
    trace: list | None = None


_settings = _Settings()
_local = _Local()


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _settings.dtype = _DTYPES[name]


def get_precision() -> str:
    return "f64" if _settings.dtype == np.float64 else "f32"


def default_dtype():
    return _settings.dtype


@contextmanager
def precision(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


def set_check_finite(flag: bool) -> None:
    _settings.check_finite = bool(flag)


@contextmanager
def check_finite(flag: bool):
    old = _settings.check_finite
    _settings.check_finite = bool(flag)
    try:
        yield
    finally:
        _settings.check_finite = old


@contextmanager
def no_grad():
    old = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = old


@contextmanager
def activation_trace():
    """Collect the sign pattern of every ReLU input evaluated inside the block.

    Gradient checkers use this to discard finite-difference stencils that
    straddle a ReLU kink, where the derivative is undefined.
    """
    old = _local.trace
    _local.trace = []
    try:
        yield _local.trace
    finally:
        _local.trace = old


class Tensor:
    """Immutable n-d array node in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_settings.dtype)
        if arr.size == 0:
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
        if _settings.check_finite and not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        needs = _local.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection ---------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self, grad=None) -> None:
        backward(self, grad)

    # -- operators -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


class Graph:
    """Recorded operations reachable from an output, in topological order."""

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order
        self.output = output

    @property
    def ops(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is not None]

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]

    def backward(self, grad: np.ndarray, visit: Callable[[Tensor], None] | None = None) -> None:
        pending: dict[int, np.ndarray] = {id(self.output): grad}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if visit is not None:
                visit(node)
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def backward(output: Tensor, grad=None) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if not output.requires_grad:
        return
    if grad is None:
        if output.size != 1:
            raise DimensionError("backward() without a seed gradient needs a scalar output")
        grad = np.ones_like(output.data)
    else:
        grad = np.asarray(grad, dtype=output.data.dtype)
        if grad.shape != output.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {output.shape}")
    Graph(output).backward(grad)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive value")
    ad = a.data
    return Tensor._node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    if _local.trace is not None:
        _local.trace.append(np.packbits(out > 0))
    return Tensor._node(out, (a,), lambda g: (g * (out > 0),), "relu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def stop_gradient(a: Tensor) -> Tensor:
    """Identity in the forward pass; blocks every gradient in the backward pass."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = "stop_gradient"
    out.name = None
    return out


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._node(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return Tensor._node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = np.broadcast_to(a.data, shape)
    return Tensor._node(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concatenate")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    dtype = a.data.dtype
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._node(np.array(a.data[index]), (a,), bw, "getitem")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = g @ bd.T
            else:
                ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = ad.shape[-1]
                a2 = np.broadcast_to(ad, g.shape[:-1] + (k,)).reshape(-1, k)
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._node(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, activation: str | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``, optionally followed by ReLU."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear expects last axis {weight.shape[0]}, got {x.shape}")
    if activation not in (None, "relu"):
        raise ValueError(f"unsupported activation {activation!r}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out += bias.data
    if activation == "relu":
        np.maximum(out, 0, out=out)
        if _local.trace is not None:
            _local.trace.append(np.packbits(out > 0))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if activation == "relu":
            g = g * (out > 0)
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = (xd.reshape(-1, xd.shape[-1]).T @ g2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._node(out, parents, bw, "linear")


def add_relu(a: Tensor, b: Tensor) -> Tensor:
    """``relu(a + b)`` with broadcasting, as one node."""
    sa, sb = a.shape, b.shape
    out = a.data + b.data
    np.maximum(out, 0, out=out)
    if _local.trace is not None:
        _local.trace.append(np.packbits(out > 0))

    def bw(g):
        g = g * (out > 0)
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._node(out, (a, b), bw, "add_relu")


def slot_mixture(decoded: Tensor, slot_axis: int) -> tuple[Tensor, np.ndarray]:
    """Mix per-slot decodings ``(..., K, N, D + 1)`` into ``(..., N, D)``.

    The last channel is a logit softmaxed across ``slot_axis``; the output is
    the weight-weighted sum of the first ``D`` channels.  Returns the mixed
    tensor and the (non-differentiable) weights ``(..., K, N)``.
    """
    data = decoded.data
    values = data[..., :-1]
    logits = data[..., -1]
    axis = slot_axis % (data.ndim - 1)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=axis, keepdims=True)
    out = (values * weights[..., None]).sum(axis=axis)

    def bw(g):
        gex = np.expand_dims(g, axis)
        full = np.empty_like(data)
        np.multiply(gex, weights[..., None], out=full[..., :-1])
        dw = (values * gex).sum(axis=-1)
        full[..., -1] = weights * (dw - (weights * dw).sum(axis=axis, keepdims=True))
        return (full,)

    return Tensor._node(out, (decoded,), bw, "slot_mixture"), weights


def broadcast_mixture_mlp(
    slot_pre: Tensor,
    pos_pre: Tensor,
    hidden: Sequence[tuple[Tensor, Tensor]],
    head: tuple[Tensor, Tensor],
) -> tuple[Tensor, np.ndarray]:
    """Spatial-broadcast MLP decoding with softmax-over-slots mixing, as one node.

    ``slot_pre`` is ``(..., K, H)`` and ``pos_pre`` is ``(N, H)``: the first
    affine layer already applied to slots and to positions.  Each
    ``(slot, position)`` pair goes through ``relu(slot_pre + pos_pre)``, the
    ReLU layers in ``hidden`` and the ``head`` layer of width ``D + 1``.  The
    last head channel is softmaxed across slots and mixes the other ``D``.

    Because the mixing weights sum to one, the head is applied once to the
    weight-averaged hidden state instead of to every slot.  Work proceeds one
    leading item at a time so that the ``K x N x H`` activations stay in
    cache.  Returns ``(..., N, D)`` and the weights ``(..., K, N)``.
    """
    w_head, b_head = head
    *lead, k, h = slot_pre.shape
    n = pos_pre.shape[0]
    if pos_pre.shape != (n, h):
        raise DimensionError(f"position term {pos_pre.shape} does not match slot term width {h}")
    d = w_head.shape[1] - 1
    sd = slot_pre.data.reshape(-1, k, h)
    pd = pos_pre.data
    wv, wl = w_head.data[:, :d], w_head.data[:, d]
    bv, bl = b_head.data[:d], b_head.data[d]
    items = sd.shape[0]
    out = np.empty((items, n, d), dtype=sd.dtype)
    weights = np.empty((items, k, n), dtype=sd.dtype)
    parents = (slot_pre, pos_pre, *[t for layer in hidden for t in layer], w_head, b_head)
    keep = _local.grad_enabled and any(p.requires_grad for p in parents)
    saved = []
    for i in range(items):
        act = np.maximum(sd[i][:, None, :] + pd, 0).reshape(k * n, h)
        acts = [act]
        for w, b in hidden:
            act = act @ w.data
            act += b.data
            np.maximum(act, 0, out=act)
            acts.append(act)
        if _local.trace is not None:
            _local.trace.extend(np.packbits(a > 0) for a in acts)
        logit = (act @ wl).reshape(k, n) + bl
        logit -= logit.max(axis=0)
        e = np.exp(logit)
        mix = e / e.sum(axis=0)
        top = act.reshape(k, n, -1)
        avg = mix[0][:, None] * top[0]
        for j in range(1, k):
            avg += mix[j][:, None] * top[j]
        out[i] = avg @ wv + bv
        weights[i] = mix
        if keep:
            saved.append((acts, avg))

    def bw(g):
        g = g.reshape(items, n, d)
        g_slot = np.empty_like(sd)
        g_pos = np.zeros_like(pd)
        g_hidden = [(np.zeros_like(w.data), np.zeros_like(b.data)) for w, b in hidden]
        g_wh = np.zeros_like(w_head.data)
        g_bh = np.zeros_like(b_head.data)
        for i in range(items):
            acts, avg = saved[i]
            gi = g[i]
            mix = weights[i]
            g_wh[:, :d] += avg.T @ gi
            g_bh[:d] += gi.sum(axis=0)
            g_avg = gi @ wv.T  # (N, H)
            top = acts[-1].reshape(k, n, -1)
            g_mix = np.einsum("nh,knh->kn", g_avg, top)
            g_logit = mix * (g_mix - (mix * g_mix).sum(axis=0))
            ga = mix[:, :, None] * g_avg + g_logit[:, :, None] * wl
            ga = ga.reshape(k * n, -1)
            gl = g_logit.reshape(-1)
            g_wh[:, d] += acts[-1].T @ gl
            g_bh[d] += gl.sum()
            for layer in range(len(hidden) - 1, -1, -1):
                ga *= acts[layer + 1] > 0
                g_hidden[layer][0][...] += acts[layer].T @ ga
                g_hidden[layer][1][...] += ga.sum(axis=0)
                ga = ga @ hidden[layer][0].data.T
            ga *= acts[0] > 0
            ga = ga.reshape(k, n, h)
            g_slot[i] = ga.sum(axis=1)
            g_pos += ga.sum(axis=0)
        grads = [g_slot.reshape(slot_pre.shape), g_pos]
        for gw, gb in g_hidden:
            grads += [gw, gb]
        return (*grads, g_wh, g_bh)

    recon = Tensor._node(out.reshape(tuple(lead) + (n, d)), parents, bw, "broadcast_mixture_mlp")
    return recon, weights.reshape(tuple(lead) + (k, n))


# ---------------------------------------------------------------------------
# Normalizations
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._node(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._node(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        g2 = g.reshape(-1, d)
        ggain = (g2 * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return Tensor._node(out, (x, gain, bias), bw, "layer_norm")


def l1_normalize_columns(a: Tensor, eps: float = NORMALIZE_EPS) -> Tensor:
    """Divide each column (axis -2) by its sum plus ``eps``."""
    ad = a.data
    if (ad < 0).any():
        raise DomainError("l1_normalize_columns expects non-negative entries")
    denom = ad.sum(axis=-2, keepdims=True) + eps
    out = ad / denom

    def bw(g):
        return (g / denom - (g * ad).sum(axis=-2, keepdims=True) / (denom * denom),)

    return Tensor._node(out, (a,), bw, "l1_normalize_columns")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORMALIZE_EPS) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    denom = norm + eps
    out = xd / denom

    def bw(g):
        dot = (g * xd).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - xd * dot / (denom * denom * safe),)

    return Tensor._node(out, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _interp_axis(n_in: int, n_out: int):
    """Half-pixel-centre source indices and weights along one axis."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    return lo, hi, w


def bilinear_resize(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes (half-pixel centres, edge clamping)."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target extent must be positive, got {out_h}x{out_w}")
    h, w = m.shape[-2:]
    if h < 1 or w < 1:
        raise DimensionError("source map must be non-empty")
    if (h, w) == (out_h, out_w):
        return m.copy()
    y0, y1, wy = _interp_axis(h, out_h)
    x0, x1, wx = _interp_axis(w, out_w)
    wy = wy.astype(m.dtype)[:, None]
    wx = wx.astype(m.dtype)[None, :]
    r0 = m[..., y0, :]
    r1 = m[..., y1, :]
    top = (1 - wx) * r0[..., :, x0] + wx * r0[..., :, x1]
    bot = (1 - wx) * r1[..., :, x0] + wx * r1[..., :, x1]
    return (1 - wy) * top + wy * bot


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out x n_in) matrix of the 1-D bilinear resize along one axis."""
    lo, hi, w = _interp_axis(n_in, n_out)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1 - w)
    np.add.at(mat, (rows, hi), w)
    return mat


def bilinear_upsample(m: Tensor, out_h: int, out_w: int) -> Tensor:
    if m.ndim < 2:
        raise DimensionError("bilinear_upsample needs a map of rank >= 2")
    h, w = m.shape[-2:]
    out = bilinear_resize(m.data, out_h, out_w)
    ry = interpolation_matrix(h, out_h).astype(m.data.dtype)
    rx = interpolation_matrix(w, out_w).astype(m.data.dtype)

    # resize is linear: out = Ry @ m @ Rx^T, so the adjoint is Ry^T @ g @ Rx
    def bw(g):
        return (ry.T @ g @ rx,)

    return Tensor._node(out, (m,), bw, "bilinear_upsample")


def mlp(x: Tensor, layers: Iterable[tuple[Tensor, Tensor | None]]) -> Tensor:
    """Linear layers with ReLU between them (none after the last)."""
    layers = list(layers)
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = relu(x)
    return x


__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "backward",
    "set_precision",
    "get_precision",
    "precision",
    "default_dtype",
    "no_grad",
    "check_finite",
    "set_check_finite",
    "activation_trace",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "square",
    "relu",
    "clamp",
    "stop_gradient",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "swapaxes",
    "broadcast_to",
    "concatenate",
    "getitem",
    "matmul",
    "linear",
    "add_relu",
    "slot_mixture",
    "softmax",
    "log_softmax",
    "layer_norm",
    "l1_normalize_columns",
    "l2_normalize",
    "bilinear_resize",
    "bilinear_upsample",
    "interpolation_matrix",
    "mlp",
]
