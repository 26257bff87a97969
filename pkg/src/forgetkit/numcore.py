"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on a :class:`Tensor` records a node holding its parents and a
closure mapping the output gradient to parent gradients. :func:`backprop`
walks the recorded graph in reverse topological order and then releases it.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")
    # make ndarray <op> Tensor defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # operator sugar
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


_recording = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.requires_grad = _recording and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU (smooth, so finite differences stay valid)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), backward)


# reductions and shape ------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    basic = all(isinstance(i, (int, slice)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index]), (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        if ad.ndim == 1 or bd.ndim == 1:
            # promote vectors to matrices, then drop the added axes again
            a2 = ad[None, :] if ad.ndim == 1 else ad
            b2 = bd[:, None] if bd.ndim == 1 else bd
            g2 = g
            if bd.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            if ad.ndim == 1:
                g2 = np.expand_dims(g2, -2)
            ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(ad.shape)
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bd.shape)
            return ga, gb
        if bd.ndim == 2 and ad.ndim > 2:
            # weight matrix shared across leading axes
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


# fused neural-network ops ---------------------------------------------------

def softmax(a, axis: int = -1, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``additive_mask`` (constant) is added to the logits first."""
    a = as_tensor(a)
    x = a.data if additive_mask is None else a.data + additive_mask
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    n = xd.shape[-1]

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, n)
        ggamma = (flat_g * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        return gx, ggamma, gbeta

    return _node(xhat * gd + beta.data, (x, gamma, beta), backward)


def embedding(weight, ids: np.ndarray) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids)
    vocab, dim = weight.shape

    def backward(g):
        full = np.zeros((vocab, dim), dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, dim))
        return (full,)

    return _node(weight.data[ids], (weight,), backward)


def cross_entropy(logits, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` is set.

    ``logits`` has shape (..., V); ``targets`` and ``mask`` match its leading shape.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy needs at least one target position")
    x = logits.data
    sel = x[mask]                                  # (count, V)
    tgt = np.asarray(targets)[mask]
    z = sel - sel.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(count), tgt]
    loss = np.asarray(nll.sum() / count)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(count), tgt] -= 1.0
        full = np.zeros_like(x)
        full[mask] = p * (float(g) / count)
        return (full,)

    return _node(loss, (logits,), backward)


# differentiation ------------------------------------------------------------

GradientMap = dict  # name -> ndarray, same shape as the named parameter


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backprop(loss: Tensor, release: bool = True) -> GradientMap:
    """Reverse-mode gradients of a scalar ``loss`` for every named parameter it reaches.

    The recorded graph is dismantled afterwards unless ``release`` is False.
    """
    if loss.size != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out: GradientMap = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.name is not None:
                if node.name in out:
                    raise ValueError(f"two parameters share the name {node.name!r}")
                out[node.name] = np.array(g, dtype=DTYPE).reshape(node.shape)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if release:
        for node in order:
            node._parents = ()
            node._backward = None
    for name, g in out.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    return out


def finite_diff_grad(f: Callable[[], float], params: Mapping[str, Tensor], eps: float = 1e-5,
                     coords: Mapping[str, Iterable[int]] | None = None) -> GradientMap:
    """Central-difference gradient of ``f`` w.r.t. the parameters, perturbed in place.

    ``f`` is re-evaluated for every perturbed coordinate. With ``coords`` only the
    listed flat indices are estimated and each entry of the result is a 1-D array
    aligned with its index list.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    out: GradientMap = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = range(flat.size) if coords is None else list(coords.get(name, ()))
        if coords is not None and not idx:
            continue
        est = np.zeros(len(idx), dtype=DTYPE)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            est[j] = (fp - fm) / (2.0 * eps)
        out[name] = est.reshape(p.shape) if coords is None else est
    return out


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# optimisation --------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adam"
    group_of: dict[str, int] = field(default_factory=dict)
    group_lr: dict[int, float] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        for g, lr in self.group_lr.items():
            if lr < 0:
                raise ValueError(f"negative learning rate for group {g}")

    def lr_for(self, name: str) -> float:
        group = self.group_of.get(name, 0)
        if group not in self.group_lr:
            raise KeyError(f"no learning rate for group {group} (parameter {name})")
        return self.group_lr[group]


def make_optimizer(params: Mapping[str, Tensor], group_of: Mapping[str, int] | None = None,
                   group_lr: Mapping[int, float] | float = 1e-3, kind: str = "adam",
                   **hyper) -> OptimizerState:
    group_of = dict(group_of) if group_of is not None else {n: 0 for n in params}
    if not isinstance(group_lr, Mapping):
        group_lr = {g: float(group_lr) for g in set(group_of.values())}
    state = OptimizerState(kind=kind, group_of=group_of, group_lr=dict(group_lr), **hyper)
    for name in params:
        state.lr_for(name)
    return state


def optimizer_step(params: Mapping[str, Tensor], grads: GradientMap,
                   state: OptimizerState) -> Mapping[str, Tensor]:
    """Update trainable parameters in place from ``grads`` and advance ``state``."""
    for name, p in params.items():
        if p.requires_grad and name not in grads:
            raise KeyError(f"missing gradient for trainable parameter {name}")
    for lr in state.group_lr.values():
        if lr < 0:
            raise ValueError("negative learning rate")
    state.step += 1
    t = state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads[name]
        lr = state.lr_for(name)
        if state.kind == "sgd":
            p.data -= lr * g
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        p.data -= lr * (mhat / (np.sqrt(vhat) + state.eps))
    return params
