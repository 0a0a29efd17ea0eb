"""A small dense-tensor engine with reverse-mode differentiation.

Each op returns a new :class:`Tensor` holding references to its inputs and a
closure computing the vector-Jacobian product; :func:`backward` walks that
graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
import json
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import InvalidConfig, InvalidInput, ShapeError

_GRAD_ENABLED = True
DEFAULT_DTYPE = np.float64


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DEFAULT_DTYPE) if not isinstance(data, np.ndarray) else data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: add(self, neg(_lift(o)))
    __rsub__ = lambda self, o: add(o, neg(self))
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def backward(loss: Tensor):
    """Populate ``.grad`` of every tensor reachable from ``loss``; leaf grads accumulate."""
    if loss.data.size != 1:
        raise InvalidInput(f"backward needs a scalar loss, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x3 = x.data * x.data * x.data
    u = _GELU_C * (x.data + 0.044715 * x3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data * x.data)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _node(out, (x,), vjp, "gelu")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise InvalidConfig("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is ``[in, out]``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    flat = x.data.reshape(-1, x.shape[-1])

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ w.data.T)
        gw = flat.T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, vjp, "linear")


def conv1d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, pad: Optional[int] = None) -> Tensor:
    """Convolution along the token axis of ``x[R, T, C_in]`` with ``w[k, C_in, C_out]``.

    ``pad`` defaults to ``k // 2`` (same length for odd ``k``); padding is zeros.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects [R, T, C] input, got {x.shape}")
    k, cin, cout = w.shape
    if x.shape[2] != cin:
        raise ShapeError(f"conv1d: input {x.shape} does not match kernel {w.shape}")
    pad = k // 2 if pad is None else pad
    R, T, _ = x.shape
    T_out = T + 2 * pad - k + 1
    if T_out < 1:
        raise ShapeError(f"conv1d: kernel {k} longer than padded input {T + 2 * pad}")
    xp = np.zeros((R, T + 2 * pad, cin), dtype=x.data.dtype)
    xp[:, pad : pad + T] = x.data
    out = xp[:, 0:T_out] @ w.data[0]
    for m in range(1, k):
        out += xp[:, m : m + T_out] @ w.data[m]
    if b is not None:
        out += b.data

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for m in range(k):
            gw[m] = xp[:, m : m + T_out].reshape(-1, cin).T @ g2
            gxp[:, m : m + T_out] += g @ w.data[m].T
        gx = gxp[:, pad : pad + T]
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, vjp, "conv1d")


def zero_init_conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise (kernel 1) convolution; its parameters start at zero in the layer that owns it."""
    return linear(x, w, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), vjp, "softmax")


def self_attention(q: Tensor, k: Tensor, v: Tensor, record: Optional[list] = None) -> Tensor:
    """Single-head scaled dot-product attention on ``[R, T, D]`` inputs."""
    if not (q.ndim == k.ndim == v.ndim == 3) or q.shape[2] != k.shape[2] or k.shape[:2] != v.shape[:2]:
        raise ShapeError(f"self_attention: shapes q{q.shape} k{k.shape} v{v.shape} mismatch")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, 1, 2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    if record is not None:
        record.append(attn.copy())
    out = attn @ v.data

    def vjp(g):
        gv = np.swapaxes(attn, 1, 2) @ g
        ga = g @ np.swapaxes(v.data, 1, 2)
        gs = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True)) * scale
        return gs @ k.data, np.swapaxes(gs, 1, 2) @ q.data, gv

    return _node(out, (q, k, v), vjp, "self_attention")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def vjp(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, n)
        return gx, (lead * xhat.reshape(-1, n)).sum(axis=0), lead.sum(axis=0)

    return _node(out, (x, gamma, beta), vjp, "layer_norm")


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(gelu(linear(x, w1, b1)), w2, b2)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor, start: int = 1) -> Tensor:
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_lift(t) for t in xs]
    ref = list(xs[0].shape)
    for t in xs[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _node(x.data[idx], (x,), vjp, "slice")


def split(x: Tensor, n: int, axis: int = 1) -> list:
    """Split into ``n`` equal segments along ``axis``."""
    size = x.shape[axis]
    if size % n:
        raise ShapeError(f"split: axis of length {size} not divisible by {n}")
    step = size // n
    return [slice_axis(x, i * step, (i + 1) * step, axis) for i in range(n)]


def avg_pool(x: Tensor, groups: int) -> Tensor:
    """Average token t with tokens t+P, t+2P, ... of ``x[R, groups*P, D]`` -> ``[R, P, D]``."""
    R, T, D = x.shape
    if T % groups:
        raise ShapeError(f"avg_pool: {T} tokens not divisible into {groups} groups")
    P = T // groups
    out = x.data.reshape(R, groups, P, D).mean(axis=1)
    return _node(out, (x,),
                 lambda g: (np.broadcast_to(g[:, None] / groups, (R, groups, P, D)).reshape(R, T, D),),
                 "avg_pool")


# ---------------------------------------------------------------- reductions / losses


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def mse_loss(pred: Tensor, target, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error; with ``mask`` the mean runs over entries where mask is 1."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    if mask is None:
        w = np.ones_like(diff) / diff.size
    else:
        m = np.asarray(mask, dtype=diff.dtype)
        w = m / max(m.sum(), 1.0)
    return _node(np.asarray((w * diff * diff).sum()), (pred,), lambda g: (2.0 * g * w * diff,), "mse")


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy_loss: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _node(np.asarray(loss), (logits,), vjp, "cross_entropy")


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction over a fixed list of parameters."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if not lr > 0:
            raise InvalidConfig(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.betas, self.eps = float(lr), tuple(betas), float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self, self.lr, self.betas, self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.tolist() for m in self.m], "v": [v.tolist() for v in self.v],
                "lr": self.lr, "betas": list(self.betas), "eps": self.eps}

    def load_state_dict(self, d: dict):
        self.t = int(d["t"])
        self.m = [np.asarray(m, dtype=p.data.dtype).reshape(p.shape) for m, p in zip(d["m"], self.params)]
        self.v = [np.asarray(v, dtype=p.data.dtype).reshape(p.shape) for v, p in zip(d["v"], self.params)]


def adam_step(params, grads, state: Adam, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    if not lr > 0:
        raise InvalidConfig(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        p.data -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = "pets-checkpoint/1"


def save_parameters(named: dict, path, extra: Optional[dict] = None):
    """Write ``{path: {shape, values}}`` as version-tagged JSON (row-major values)."""
    doc = {"version": CHECKPOINT_VERSION,
           "parameters": {k: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
                          for k, t in named.items()}}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_parameters(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidInput(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    return doc
