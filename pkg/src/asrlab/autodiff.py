"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors are immutable once created; ops record parent links when any input
requires grad, and ``backward`` walks the implicit graph in reverse
topological order without mutating forward activations. Broadcasting is
limited to bias-add; everything else wants explicit shapes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DivergedError, ShapeError

_GELU_C = np.sqrt(2.0 / np.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} shape={self.shape} grad={self.requires_grad}>"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _make(data, parents, vjp):
    # requires_grad is transitive: a node tracks iff any input tracks
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, vjp=vjp)
    return Tensor(data)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def vjp(g):
            return g, g
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        # bias add, the one permitted broadcast
        def vjp(g):
            axes = tuple(range(g.ndim - 1))
            return g, g.sum(axis=axes) if axes else g
    elif b.ndim == 0:
        def vjp(g):
            return g, np.sum(g)
    else:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _make(a.data + b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.ndim != 0 and a.ndim != 0:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = a.data * b.data

    def vjp(g):
        ga = g * b.data
        gb = g * a.data
        if a.shape != b.shape:
            if b.ndim == 0:
                gb = np.sum(gb)
            else:
                ga = np.sum(ga)
        return ga, gb

    return _make(out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    def vjp(g):
        return (g * s,)

    return _make(a.data * s, (a,), vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    use = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(use))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(use), (a,), vjp)


def concat(parts, axis=0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[sl] = g
        return (out,)

    return _make(a.data[sl], (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-9) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},), got "
                         f"{gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=axes) if axes else g * xhat
        gbias = g.sum(axis=axes) if axes else g
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), vjp)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
        return (g * d,)

    return _make(out, (x,), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), vjp)


def tsum(a: Tensor, axis=None) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.expand_dims(g, axis) * np.ones_like(a.data),)

    return _make(a.data.sum(axis=axis), (a,), vjp)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, g / n),)
        return (np.expand_dims(g, axis) * np.ones_like(a.data) / n,)

    return _make(a.data.mean(axis=axis), (a,), vjp)


def custom_op(value, parents, vjp) -> Tensor:
    """Build a node with a hand-written vector-Jacobian product."""
    return _make(np.asarray(value, dtype=np.float64), tuple(parents), vjp)


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt=None):
    """Accumulate gradients of a scalar loss.

    Returns a dict mapping requires-grad tensors to gradient arrays. Tensors
    listed in ``wrt`` always appear, with zeros when the loss never touched
    them. Forward activations are left untouched; a second call gives
    identical results.
    """
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    grads = {id(loss): np.ones(())}
    order = _toposort(loss)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    result = {}
    for node in order:
        if node.requires_grad and node._vjp is None and id(node) in grads:
            result[node] = np.asarray(grads[id(node)])
    if wrt is not None:
        for t in wrt:
            if t not in result:
                result[t] = np.zeros_like(t.data)
    return result


def grad_check(fn, point: Tensor, eps: float = 1e-5, coords=None, rng=None) -> float:
    """Max relative error of backward() vs central finite differences.

    ``coords``: number of randomly sampled coordinates to probe (all when
    None). The relative error is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must be in [1e-6, 1e-3], got {eps}")
    x = Tensor(point.data.copy(), requires_grad=True)
    out = fn(x)
    if out.data.shape != ():
        raise ValueError(f"fn must return a scalar, got shape {out.data.shape}")
    g_ad = backward(out, wrt=[x])[x]
    flat = x.data.reshape(-1)
    n = flat.size
    if coords is None:
        picks = range(n)
    else:
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(n, size=min(coords, n), replace=False)
    worst = 0.0
    for i in picks:
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(Tensor(x.data.copy())).data
        flat[i] = orig - eps
        lo = fn(Tensor(x.data.copy())).data
        flat[i] = orig
        fd = (hi - lo) / (2 * eps)
        ad = g_ad.reshape(-1)[i]
        worst = max(worst, abs(ad - fd) / max(1e-8, abs(ad) + abs(fd)))
    return float(worst)


class OptimizerState:
    """Adam with bias correction and decoupled weight decay.

    Weight decay touches only matrix-shaped parameters (ndim >= 2); biases,
    gains and vectors are exempt.
    """

    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {}
        self.v = {}


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """One Adam update over ``params`` (name -> Tensor), in place.

    ``grads`` maps names to arrays; missing or None entries count as zero.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if np.isnan(g).any():
            raise DivergedError(f"NaN gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape "
                             f"{p.data.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and p.data.ndim >= 2:
            update = update + state.lr * state.weight_decay * p.data
        p.data = p.data - update


CHECKPOINT_MAGIC = b"ASRLABCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Binary layout: magic, version, meta JSON, then per-parameter records.

    Record: name length (u16) + name, rank (u8), dims (u32 each), raw
    little-endian float64 values in row-major order. Bit-exact round trip.
    """
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            blob = name.encode("utf-8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            arr = np.asarray(p.data if isinstance(p, Tensor) else p, dtype="<f8")
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (params: dict[str, np.ndarray], meta: dict)."""
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an asrlab checkpoint")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta_len, = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        count, = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(count):
            name_len, = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            rank, = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            params[name] = data.copy()
    return params, meta
