"""A small reverse-mode autodiff engine and the network pieces SAC needs.

Tensors wrap float64 numpy arrays. Every differentiable op records its
inputs and a closure that pushes the output gradient back to them;
``backward`` walks the graph in reverse topological order. Broadcasting
follows numpy and gradients are summed back to the input shapes.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import LoadError, ShapeError

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, target computation)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    nd = grad.ndim - len(shape)
    if nd > 0:
        grad = grad.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None    # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=float)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- plumbing -----------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad += g

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if not np.isfinite(out.data).all():
            raise FloatingPointError("non-finite value produced in forward pass")
        if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() on a non-scalar needs an explicit gradient")
            grad = np.ones_like(self.data)
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        o = as_tensor(other)
        a, b = self.shape, o.shape
        return Tensor._make(self.data + o.data, (self, o),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other):
        o = as_tensor(other)
        a, b = self.shape, o.shape
        return Tensor._make(self.data - o.data, (self, o),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        o = as_tensor(other)
        x, y = self.data, o.data
        return Tensor._make(x * y, (self, o),
                            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = as_tensor(other)
        x, y = self.data, o.data
        return Tensor._make(x / y, (self, o),
                            lambda g: (_unbroadcast(g / y, x.shape),
                                       _unbroadcast(-g * x / (y * y), y.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        x = self.data
        return Tensor._make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        o = as_tensor(other)
        x, y = self.data, o.data
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError(f"matmul shapes {x.shape} @ {y.shape}")
        return Tensor._make(x @ y, (self, o), lambda g: (g @ y.T, x.T @ g))

    def __getitem__(self, idx):
        x = self.data

        def back(g):
            out = np.zeros_like(x)
            np.add.at(out, idx, g)
            return (out,)
        return Tensor._make(x[idx], (self,), back)

    # -- elementwise --------------------------------------------------------
    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def relu(self):
        m = self.data > 0
        return Tensor._make(self.data * m, (self,), lambda g: (g * m,))

    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def square(self):
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: (2.0 * g * x,))

    def softplus(self):
        x = self.data
        y = np.logaddexp(0.0, x)
        return Tensor._make(y, (self,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))

    def clip(self, lo: float, hi: float):
        """Clamp; the gradient is passed only where the input is inside the range."""
        x = self.data
        m = (x >= lo) & (x <= hi)
        return Tensor._make(np.clip(x, lo, hi), (self,), lambda g: (g * m,))

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis, keepdims) * (1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ W + b`` for a batch of row vectors."""
    xd, Wd = x.data, W.data
    if xd.ndim != 2 or Wd.ndim != 2 or xd.shape[1] != Wd.shape[0]:
        raise ShapeError(f"affine shapes {xd.shape} @ {Wd.shape}")
    return Tensor._make(xd @ Wd + b.data, (x, W, b),
                        lambda g: (g @ Wd.T if x.requires_grad else None, xd.T @ g, g.sum(axis=0)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    m = a.data <= b.data
    return Tensor._make(np.minimum(a.data, b.data), (a, b),
                        lambda g: (_unbroadcast(g * m, a.shape), _unbroadcast(g * ~m, b.shape)))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts,
                        lambda g: tuple(np.split(g, cuts, axis=axis)))


# -- layers ----------------------------------------------------------------------

class Module:
    def parameters(self) -> List[Tensor]:
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters():
            if k not in state:
                raise LoadError(f"missing parameter {k}")
            if state[k].shape != p.shape:
                raise LoadError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=float)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.W = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, (n_out,)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W.shape[0]:
            raise ShapeError(f"expected input width {self.W.shape[0]}, got {x.shape[-1]}")
        return affine(x, self.W, self.b)

    def parameters(self):
        return [self.W, self.b]

    def named_parameters(self, prefix=""):
        return [(prefix + "W", self.W), (prefix + "b", self.b)]


class MLP(Module):
    """ReLU hidden layers, linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ShapeError("MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x

    def parameters(self):
        return [p for l in self.layers for p in l.parameters()]

    def named_parameters(self, prefix=""):
        return [kv for i, l in enumerate(self.layers) for kv in l.named_parameters(f"{prefix}{i}.")]


LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
SQUASH_EPS = 1e-6
_LOG_2PI = float(np.log(2.0 * np.pi))


class GaussianHead(Module):
    """Two affine maps from features to the mean and the (clamped) log-std."""

    def __init__(self, n_in: int, act_dim: int, rng: np.random.Generator):
        self.mean_layer = Linear(n_in, act_dim, rng)
        self.log_std_layer = Linear(n_in, act_dim, rng)
        self.act_dim = act_dim

    def __call__(self, features: Tensor) -> Tuple[Tensor, Tensor]:
        mu = self.mean_layer(features)
        log_std = self.log_std_layer(features).clip(LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def parameters(self):
        return self.mean_layer.parameters() + self.log_std_layer.parameters()

    def named_parameters(self, prefix=""):
        return (self.mean_layer.named_parameters(prefix + "mean.")
                + self.log_std_layer.named_parameters(prefix + "log_std."))


def sample_squashed(head: GaussianHead, features: Tensor, rng: Optional[np.random.Generator],
                    eps: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """Reparameterised tanh-Gaussian sample and its log-density (one per row).

    ``eps`` overrides the standard-normal draw (used by tests).
    """
    mu, log_std = head(features)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    u = mu + log_std.exp() * eps
    a = u.tanh()
    logp = (-0.5 * np.square(eps) - 0.5 * _LOG_2PI - log_std).sum(axis=-1)
    logp = logp - (1.0 - a.square() + SQUASH_EPS).log().sum(axis=-1)
    return a, logp


class GaussianPolicy(Module):
    """ReLU trunk feeding a squashed Gaussian head."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int], rng: np.random.Generator):
        if not hidden:
            raise ShapeError("policy needs at least one hidden layer")
        self.trunk = MLP([obs_dim, *hidden], rng)
        self.head = GaussianHead(hidden[-1], act_dim, rng)
        self.act_dim = act_dim

    def features(self, obs) -> Tensor:
        return self.trunk(as_tensor(obs)).relu()

    def sample(self, obs, rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
        return sample_squashed(self.head, self.features(obs), rng)

    def deterministic(self, obs) -> Tensor:
        mu, _ = self.head(self.features(obs))
        return mu.tanh()

    def act_numpy(self, obs: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Graph-free forward pass: tanh(mu) if ``rng`` is None, else a squashed sample.

        Same arithmetic as ``deterministic`` / ``sample`` without recording.
        """
        h = np.asarray(obs, dtype=float)
        for layer in self.trunk.layers:
            h = np.maximum(h @ layer.W.data + layer.b.data, 0.0)
        mu = h @ self.head.mean_layer.W.data + self.head.mean_layer.b.data
        if rng is None:
            return np.tanh(mu)
        log_std = np.clip(h @ self.head.log_std_layer.W.data + self.head.log_std_layer.b.data,
                          LOG_STD_MIN, LOG_STD_MAX)
        return np.tanh(mu + np.exp(log_std) * rng.standard_normal(mu.shape))

    def parameters(self):
        return self.trunk.parameters() + self.head.parameters()

    def named_parameters(self, prefix=""):
        return self.trunk.named_parameters(prefix + "trunk.") + self.head.named_parameters(prefix + "head.")


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load(self, st: dict) -> None:
        self.t = st["t"]
        self.m = [a.copy() for a in st["m"]]
        self.v = [a.copy() for a in st["v"]]


# -- binary checkpoint format -------------------------------------------------------
# magic, u32 count, then per array: u16 name length, name, u8 ndim, u32 dims, <f8 data

MAGIC = b"VNCK\x01"


def save_arrays(path, arrays: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_arrays(path) -> Dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not buf.startswith(MAGIC):
        raise LoadError(f"{path}: not a checkpoint file")
    try:
        off = len(MAGIC)
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        out = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + ln].decode()
            off += ln
            (nd,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", buf, off)
            off += 4 * nd
            size = int(np.prod(shape)) if nd else 1
            if off + 8 * size > len(buf):
                raise LoadError(f"{path}: truncated")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise LoadError(f"{path}: corrupt checkpoint") from exc
    if off != len(buf):
        raise LoadError(f"{path}: trailing bytes")
    return out
