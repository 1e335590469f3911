"""Reverse-mode automatic differentiation on float64 numpy arrays.

A Tape records primitive applications in execution order (which is a valid
topological order); backward walks the record once in reverse and accumulates
vector-Jacobian products. Every op below also accepts raw ndarrays and then
just computes, so numeric code can be written once and run either traced
(training) or untraced (inference, oracles).

Determinism: identical tapes produce bit-identical gradients. All reductions
run in fixed order; nothing here depends on hashing or set iteration.
"""

from __future__ import annotations

import struct
import threading

import numpy as np

_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class Tensor:
    """Array node. Leaf tensors with requires_grad=True receive gradients."""

    __slots__ = ("data", "requires_grad")

    # Make numpy return NotImplemented for `ndarray <op> Tensor` so Python
    # falls back to the reflected operators below; otherwise numpy would
    # treat the Tensor as an object scalar and build object arrays.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every operator routes through the module-level ops
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Ordered record of primitive applications; one backward pass per record."""

    def __init__(self):
        self._entries = []  # (out Tensor, ((input Tensor, vjp fn), ...))
        self._used = False

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc):
        _LOCAL.tape = None
        return False

    def _record(self, out, pairs):
        self._entries.append((out, pairs))

    def __len__(self):
        return len(self._entries)

    def backward(self, loss: Tensor) -> dict:
        """Gradients of a scalar loss wrt every requires_grad tensor on the tape.

        Returns {Tensor: ndarray}. Tensors not reached by the loss are absent;
        gradients(...) below fills in zeros for requested parameters.
        """
        if self._used:
            raise RuntimeError("tape already consumed by a backward pass")
        self._used = True
        if loss.data.size != 1:
            raise ValueError("backward expects a scalar loss")
        grads = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        for out, pairs in reversed(self._entries):
            key_out = id(out)
            g = grads.pop(key_out, None)
            if g is None:
                continue
            holders.pop(key_out, None)
            for inp, vjp in pairs:
                gi = vjp(g)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = inp
        return {holders[k]: np.asarray(g) for k, g in grads.items()}

    def gradients(self, loss: Tensor, params) -> list:
        """Like backward, but aligned with `params`; untouched entries get zeros."""
        gmap = self.backward(loss)
        return [gmap.get(p, np.zeros_like(p.data)) for p in params]


def _value(x):
    return x.data if isinstance(x, Tensor) else x


def _emit(out_data, pairs):
    """Wrap an op result; record on the active tape when gradients are needed.

    Callers only append (input, vjp) pairs for inputs that require
    gradients, so the pairs list being non-empty is the gradient flag.
    """
    out = Tensor(out_data, requires_grad=bool(pairs))
    if pairs:
        tape = getattr(_LOCAL, "tape", None)
        if tape is not None:
            tape._entries.append((out, pairs))
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fwd, vjp_a, vjp_b):
    ta, tb = type(a) is Tensor, type(b) is Tensor
    if not (ta or tb):
        return fwd(a, b)
    av = a.data if ta else a
    bv = b.data if tb else b
    out = fwd(av, bv)
    out_shape = out.shape
    pairs = []
    if ta and a.requires_grad:
        # skip the unbroadcast wrapper when no broadcasting happened
        if av.shape == out_shape:
            pairs.append((a, lambda g: vjp_a(g, av, bv)))
        else:
            pairs.append((a, lambda g: _unbroadcast(vjp_a(g, av, bv), av.shape)))
    if tb and b.requires_grad:
        bshape = np.shape(bv)
        if bshape == out_shape:
            pairs.append((b, lambda g: vjp_b(g, av, bv)))
        else:
            pairs.append((b, lambda g: _unbroadcast(vjp_b(g, av, bv), bshape)))
    return _emit(out, pairs)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(
        a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x
    )


def div(a, b):
    return _binary(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def matmul(a, b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    if not (ta or tb):
        return a @ b
    av, bv = _value(a), _value(b)
    out = av @ bv
    pairs = []
    if ta and a.requires_grad:
        pairs.append(
            (a, lambda g: _unbroadcast(g @ bv.swapaxes(-1, -2), np.shape(av)))
        )
    if tb and b.requires_grad:
        pairs.append(
            (b, lambda g: _unbroadcast(av.swapaxes(-1, -2) @ g, np.shape(bv)))
        )
    return _emit(out, pairs)


def _unary(a, fwd, make_vjp):
    if not isinstance(a, Tensor):
        return fwd(a)
    av = a.data
    out = fwd(av)
    pairs = []
    if a.requires_grad:
        pairs.append((a, make_vjp(av, out)))
    return _emit(out, pairs)


def neg(a):
    return _unary(a, lambda x: -x, lambda x, o: lambda g: -g)


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, o: lambda g: g * (x > 0))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _unary(a, _sigmoid, lambda x, o: lambda g: g * o * (1.0 - o))


def tanh(a):
    return _unary(a, np.tanh, lambda x, o: lambda g: g * (1.0 - o * o))


def exp(a):
    return _unary(a, np.exp, lambda x, o: lambda g: g * o)


def log(a):
    return _unary(a, np.log, lambda x, o: lambda g: g / x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, o: lambda g: g / (2.0 * o))


def square(a):
    return _unary(a, np.square, lambda x, o: lambda g: g * (2.0 * x))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    return _unary(a, _softplus, lambda x, o: lambda g: g * _sigmoid(x))


def sum_(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return np.sum(a, axis=axis, keepdims=keepdims)
    av = a.data

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, av.shape).copy()

    out = np.sum(av, axis=axis, keepdims=keepdims)
    return _emit(out, [(a, vjp)] if a.requires_grad else [])


def mean_(a, axis=None, keepdims=False):
    av = _value(a)
    if axis is None:
        n = av.size
    else:
        n = av.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) / float(n)


def _extreme_along(a, axis, argfn):
    av = _value(a)
    idx = argfn(av, axis=axis)
    vals = np.take_along_axis(av, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    if not isinstance(a, Tensor):
        return vals, idx

    def vjp(g):
        out = np.zeros_like(av)
        np.put_along_axis(
            out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return out

    t = _emit(vals, [(a, vjp)] if a.requires_grad else [])
    return t, idx


def max_along(a, axis):
    """Max over an axis; returns (values, argmax). Gradient routes to the argmax."""
    return _extreme_along(a, axis, np.argmax)


def min_along(a, axis):
    return _extreme_along(a, axis, np.argmin)


def concat(parts, axis=0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    vals = [_value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    pairs = []
    start = 0
    for p, v in zip(parts, vals):
        n = v.shape[axis]
        if isinstance(p, Tensor) and p.requires_grad:
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(start, start + n)
            pairs.append((p, (lambda s: lambda g: g[tuple(s)])(tuple(sl))))
        start += n
    return _emit(out, pairs)


def reshape(a, shape):
    if not isinstance(a, Tensor):
        return np.reshape(a, shape)
    av = a.data
    out = np.reshape(av, shape)
    return _emit(out, [(a, lambda g: g.reshape(av.shape))] if a.requires_grad else [])


def transpose(a, axes):
    if not isinstance(a, Tensor):
        return np.transpose(a, axes)
    av = a.data
    inv = np.argsort(axes)
    out = np.transpose(av, axes)
    return _emit(
        out, [(a, lambda g: np.transpose(g, inv))] if a.requires_grad else []
    )


def take(a, idx, axis=0):
    """Integer-array row gather along axis 0; gradient scatter-adds."""
    if axis != 0:
        raise ValueError("take supports axis=0")
    idx = np.asarray(idx, dtype=np.intp)
    if not isinstance(a, Tensor):
        return a[idx]
    av = a.data
    out = av[idx]

    def vjp(g):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return z

    return _emit(out, [(a, vjp)] if a.requires_grad else [])


def getitem(a, key):
    if not isinstance(a, Tensor):
        return a[key]
    av = a.data
    out = av[key]

    def vjp(g):
        z = np.zeros_like(av)
        z[key] += g
        return z

    return _emit(out, [(a, vjp)] if a.requires_grad else [])


def segment_sum(a, seg, n):
    """Sum rows of a [m, ...] array into n buckets given by seg [m]."""
    seg = np.asarray(seg, dtype=np.intp)
    if not isinstance(a, Tensor):
        out = np.zeros((n,) + a.shape[1:], dtype=np.float64)
        np.add.at(out, seg, a)
        return out
    av = a.data
    out = np.zeros((n,) + av.shape[1:], dtype=np.float64)
    np.add.at(out, seg, av)
    return _emit(out, [(a, lambda g: g[seg])] if a.requires_grad else [])


def bce_with_logits(logits, targets):
    """Elementwise binary cross entropy on logits; numerically stable."""
    tv = _value(targets)

    def fwd(x):
        return np.maximum(x, 0.0) - x * tv + np.log1p(np.exp(-np.abs(x)))

    return _unary(logits, fwd, lambda x, o: lambda g: g * (_sigmoid(x) - tv))


def softmax_cross_entropy(logits, labels):
    """Per-row cross entropy of [n, L] logits against integer labels [n]."""
    labels = np.asarray(labels, dtype=np.intp)

    def fwd(x):
        m = x.max(axis=-1, keepdims=True)
        lse = m.squeeze(-1) + np.log(np.exp(x - m).sum(axis=-1))
        return lse - x[np.arange(x.shape[0]), labels]

    def make_vjp(x, o):
        def vjp(g):
            m = x.max(axis=-1, keepdims=True)
            e = np.exp(x - m)
            p = e / e.sum(axis=-1, keepdims=True)
            p[np.arange(x.shape[0]), labels] -= 1.0
            return p * g[..., None]

        return vjp

    return _unary(logits, fwd, make_vjp)


def l2_norm(a, axis=None, keepdims=False, eps=0.0):
    """Euclidean norm, optionally eps-guarded under the square root."""
    s = sum_(square(a), axis=axis, keepdims=keepdims)
    if eps:
        s = s + eps
    return sqrt(s)


def softmax(a, axis=-1):
    m, _ = max_along(a, axis=axis)
    shifted = sub(a, reshape(m, _value(m).shape + (1,)) if axis == -1 else m)
    e = exp(shifted)
    return div(e, sum_(e, axis=axis, keepdims=True))


def value(x):
    """Unwrap to ndarray; identity on ndarrays."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}

    def tensors(self):
        out = {}
        for name, arr in self.m.items():
            out[f"adam.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"adam.v.{name}"] = arr
        return out

    @classmethod
    def from_tensors(cls, named: dict, step: int) -> "AdamState":
        st = cls()
        st.step = step
        for key, arr in named.items():
            if key.startswith("adam.m."):
                st.m[key[len("adam.m.") :]] = np.array(arr, dtype=np.float64)
            elif key.startswith("adam.v."):
                st.v[key[len("adam.v.") :]] = np.array(arr, dtype=np.float64)
        return st


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most max_norm."""
    total = 0.0
    for name in grads:
        total += float(np.sum(np.square(grads[name])))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam update with bias correction; mutates params in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# checkpoint container: versioned named-tensor binary

_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1


def save_tensors(path, named: dict, config_digest: str = ""):
    """Write named float64 tensors: header, then (name, dims, little-endian data)."""
    digest = config_digest.encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(digest)))
        f.write(digest)
        f.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            data = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                f.write(struct.pack("<I", d))
            f.write(data.astype("<f8").tobytes())


def load_tensors(path):
    """Read a tensor container; returns (named dict, config digest, version)."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: checkpoint version {version} unsupported "
                f"(this build reads {CHECKPOINT_VERSION})"
            )
        (dlen,) = struct.unpack("<I", f.read(4))
        digest = f.read(dlen).decode("utf-8")
        (count,) = struct.unpack("<I", f.read(4))
        named = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            named[name] = np.array(data, dtype=np.float64)
    return named, digest, version
