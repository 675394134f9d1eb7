"""Array-level reverse-mode autodiff, the frame encoder, Adam, checkpoints.

Every op on :class:`Tensor` records its parents and a backward closure on
the node itself; :func:`grad` walks the graph in reverse topological order.
The op set is exactly what the representation and reward losses need.
All arithmetic is float64.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from ._jit import njit, JIT_ENABLED
from .errors import FormatError, TrainingError, UsageError

LATENT_DIM = 32
HIDDEN = (128, 128)
PAPER_LR = 1e-5
DESK_LR = 1e-3


class Tensor:
    __slots__ = ("value", "parents", "backward", "requires_grad")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return take(self, idx)


def param(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return Tensor(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return Tensor(a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    return Tensor(a.value * b.value, (a, b),
                  lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.value / b.value
    return Tensor(out, (a, b),
                  lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules (both operands >= 2-D)."""
    a, b = _t(a), _t(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise UsageError("matmul operands must be at least 2-D")

    def back(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.value @ b.value, (a, b), back)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _t(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _t(a)
    n = a.value.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / float(n))


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _t(a)
    return Tensor(np.log(a.value), (a,), lambda g: (g / a.value,))


def square(a) -> Tensor:
    a = _t(a)
    return Tensor(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


_RELU_TRACE: Optional[list] = None


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.value > 0
    if _RELU_TRACE is not None:
        _RELU_TRACE.append(mask)
    return Tensor(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = _sigmoid(a.value)
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = _t(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor(out, (a,), lambda g: (g * _sigmoid(x),))


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = _t(a)
    m = a.value.max(axis=axis, keepdims=True)
    s = np.exp(a.value - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = m + np.log(tot)
    soft = s / tot

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor(out if keepdims else np.squeeze(out, axis=axis), (a,), back)


def softmax(a, axis=-1) -> Tensor:
    a = _t(a)
    return exp(sub(a, logsumexp(a, axis=axis, keepdims=True)))


def take(a, idx) -> Tensor:
    """Indexing (basic or integer-array); gradients scatter-add back."""
    a = _t(a)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.value[idx], (a,), back)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(parts: Sequence, axis=0) -> Tensor:
    parts = [_t(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts),
                  lambda g: tuple(np.split(g, sizes, axis=axis)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def grad(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """Reverse-mode gradients of scalar ``loss`` with respect to ``params``."""
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise UsageError("grad needs a scalar Tensor loss")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        if node.backward is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for p, gp in zip(node.parents, node.backward(g)):
            if p.requires_grad:
                grads[id(p)] = grads[id(p)] + gp if id(p) in grads else gp
    return [grads.get(id(p), np.zeros(p.shape)).reshape(p.shape) for p in params]


class GradTape:
    """Records a loss built from leaf parameters and returns its gradients.

    >>> tape = GradTape(arrays); loss = f(*tape.leaves); grads = tape.gradient(loss)
    """

    def __init__(self, arrays: Sequence[np.ndarray]):
        self.leaves = [param(a) for a in arrays]

    def gradient(self, loss: Tensor) -> List[np.ndarray]:
        return grad(loss, self.leaves)


# ---------------------------------------------------------------- encoder

@dataclass
class EncoderParams:
    """Fully connected ReLU network, optional scalar head on the latent."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    head_w: Optional[np.ndarray] = None
    head_b: Optional[np.ndarray] = None

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def latent_dim(self) -> int:
        return int(self.weights[-1].shape[1])

    @property
    def has_head(self) -> bool:
        return self.head_w is not None

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.has_head:
            out += [self.head_w, self.head_b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "EncoderParams":
        n = len(self.weights)
        ws = [np.array(arrays[2 * i], dtype=np.float64) for i in range(n)]
        bs = [np.array(arrays[2 * i + 1], dtype=np.float64) for i in range(n)]
        if self.has_head:
            return EncoderParams(ws, bs, np.array(arrays[2 * n]), np.array(arrays[2 * n + 1]))
        return EncoderParams(ws, bs)

    def copy(self) -> "EncoderParams":
        return self.with_arrays(self.arrays())

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def __eq__(self, other):
        if not isinstance(other, EncoderParams) or self.has_head != other.has_head:
            return False
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_encoder(input_dim: int, seed: int = 0, hidden: Sequence[int] = HIDDEN,
                 latent: int = LATENT_DIM, head: bool = False) -> EncoderParams:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xE1C])
    dims = [input_dim, *hidden, latent]
    ws = [glorot(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(b) for b in dims[1:]]
    if head:
        return EncoderParams(ws, bs, glorot(rng, latent, 1), np.zeros(1))
    return EncoderParams(ws, bs)


def zero_encoder(input_dim: int, hidden: Sequence[int] = HIDDEN, latent: int = LATENT_DIM,
                 head: bool = False) -> EncoderParams:
    dims = [input_dim, *hidden, latent]
    ws = [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(b) for b in dims[1:]]
    return EncoderParams(ws, bs, np.zeros((latent, 1)) if head else None, np.zeros(1) if head else None)


def forward(leaves: Sequence[Tensor], x, n_layers: int) -> Tensor:
    """Taped forward pass; ``leaves`` follow :meth:`EncoderParams.arrays`.

    The final layer is linear; hidden layers use the rectifier.
    """
    h = _t(x)
    for i in range(n_layers):
        h = add(matmul(h, leaves[2 * i]), leaves[2 * i + 1])
        if i < n_layers - 1:
            h = relu(h)
    return h


def head_forward(leaves: Sequence[Tensor], latent: Tensor, n_layers: int) -> Tensor:
    """Scalar head on a batch of latents -> shape (N,)."""
    out = add(matmul(latent, leaves[2 * n_layers]), leaves[2 * n_layers + 1])
    return reshape(out, out.shape[:-1])


@njit
def _dense_rows(x, w, b, act):
    n, k = x.shape
    m = w.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = b[j]
        for p in range(k):
            xv = x[i, p]
            if xv != 0.0:
                for j in range(m):
                    out[i, j] += xv * w[p, j]
        if act:
            for j in range(m):
                if out[i, j] < 0.0:
                    out[i, j] = 0.0
    return out


def _dense_rows_numpy(x, w, b, act):
    # same accumulation order as the compiled kernel: bias first, then inputs in order
    out = np.repeat(b[None, :].astype(np.float64), x.shape[0], axis=0)
    for p in range(x.shape[1]):
        col = x[:, p]
        nz = col != 0.0
        if nz.any():
            out[nz] += col[nz, None] * w[p]
    if act:
        out[out < 0.0] = 0.0
    return out


def encode(params: EncoderParams, frames) -> np.ndarray:
    """Latents for one frame (shape (D,)) or a batch (shape (N, D)).

    Rows are computed independently in a fixed order, so a frame's
    latent does not depend on what else is in the batch.
    """
    x = np.asarray(frames, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.input_dim:
        raise UsageError(f"frame length {x.shape[1]} does not match encoder input {params.input_dim}")
    rows = _dense_rows if JIT_ENABLED else _dense_rows_numpy
    h = np.ascontiguousarray(x)
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = rows(h, np.ascontiguousarray(w), np.ascontiguousarray(b), i < n - 1)
    return h[0] if single else h


def head_output(params: EncoderParams, latents: np.ndarray) -> np.ndarray:
    """Scalar head on a batch of latents, row-independent like :func:`encode`."""
    if not params.has_head:
        raise UsageError("encoder has no scalar head")
    rows = _dense_rows if JIT_ENABLED else _dense_rows_numpy
    z = np.atleast_2d(np.ascontiguousarray(latents, dtype=np.float64))
    return rows(z, np.ascontiguousarray(params.head_w), np.ascontiguousarray(params.head_b), False)[:, 0]


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    lr: float = PAPER_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, arrays: Sequence[np.ndarray], lr: float = PAPER_LR, **kw) -> "OptimState":
        return cls(lr=lr, m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **kw)


def adam_step(arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState) -> List[np.ndarray]:
    """One bias-corrected Adam update; returns new arrays, mutates ``state``."""
    if len(arrays) != len(grads):
        raise UsageError("parameter and gradient lists differ in length")
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    for i, g in enumerate(grads):
        if g.shape != arrays[i].shape:
            raise UsageError(f"gradient {i} has shape {g.shape}, parameter {arrays[i].shape}")
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise TrainingError(f"non-finite gradient at step {state.step + 1}: "
                                f"tensor {i} shape {g.shape} has {bad} bad entries")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (a, g) in enumerate(zip(arrays, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        out.append(a - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


# ---------------------------------------------------------------- gradient check

@dataclass
class FiniteDiffReport:
    max_rel_error: float
    tol: float
    coords: list
    analytic: np.ndarray
    numeric: np.ndarray
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def rel_error(a, n, floor: float = 1e-6):
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _traced(loss_fn, arrays):
    global _RELU_TRACE
    _RELU_TRACE = []
    try:
        value = float(loss_fn([Tensor(a) for a in arrays]).value)
        return value, _RELU_TRACE
    finally:
        _RELU_TRACE = None


def finite_diff_check(loss_fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                      coords: int = 10, tol: float = 1e-4, h: float = 1e-5, seed: int = 0) -> FiniteDiffReport:
    """Compare taped gradients with central differences at random coordinates.

    ``loss_fn`` maps a list of leaf Tensors (one per array) to a scalar
    Tensor. Relative error is |a - n| / max(|a|, |n|, 1e-6). A coordinate
    whose +h and -h probes put some rectifier input on different sides of
    zero straddles a kink, where central differences do not estimate the
    derivative; such coordinates are redrawn and counted in ``skipped``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tape = GradTape(arrays)
    analytic_all = tape.gradient(loss_fn(tape.leaves))
    rng = np.random.default_rng(seed)
    sizes = np.array([a.size for a in arrays])
    total = int(sizes.sum())
    order = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picked, ana, num = [], [], []
    skipped = 0
    for f in order:
        if len(picked) >= coords:
            break
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        idx = np.unravel_index(int(f - offsets[k]), arrays[k].shape)
        orig = arrays[k][idx]
        arrays[k][idx] = orig + h
        up, m_up = _traced(loss_fn, arrays)
        arrays[k][idx] = orig - h
        down, m_down = _traced(loss_fn, arrays)
        arrays[k][idx] = orig
        if any(not np.array_equal(a, b) for a, b in zip(m_up, m_down)):
            skipped += 1
            continue
        picked.append((k, idx))
        ana.append(float(analytic_all[k][idx]))
        num.append((up - down) / (2.0 * h))
    ana, num = np.array(ana), np.array(num)
    err = float(rel_error(ana, num).max()) if len(ana) else 0.0
    return FiniteDiffReport(err, tol, picked, ana, num, skipped)


# ---------------------------------------------------------------- checkpoint

ENC_MAGIC = b"XENC1"
_ENC_VERSION = 1


def dumps_encoder(params: EncoderParams) -> bytes:
    """Layer shapes, then raw little-endian float64 weights, then CRC-32."""
    arrays = params.arrays()
    body = bytearray(struct.pack("<HHI", _ENC_VERSION, 1 if params.has_head else 0, len(params.weights)))
    for a in arrays:
        a2 = np.atleast_2d(a) if a.ndim == 2 else a.reshape(1, -1)
        body += struct.pack("<BII", a.ndim, a2.shape[0], a2.shape[1])
    for a in arrays:
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    return ENC_MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)


def loads_encoder(buf: bytes) -> EncoderParams:
    if buf[:len(ENC_MAGIC)] != ENC_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:len(ENC_MAGIC)])!r}, expected {ENC_MAGIC!r}", 0)
    if len(buf) < len(ENC_MAGIC) + 12:
        raise FormatError("truncated encoder header", len(buf))
    body = buf[len(ENC_MAGIC):-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError("encoder checksum mismatch", len(buf) - 4)
    version, has_head, n_layers = struct.unpack_from("<HHI", body, 0)
    if version != _ENC_VERSION:
        raise FormatError(f"unsupported encoder version {version}", len(ENC_MAGIC))
    n_arr = 2 * n_layers + (2 if has_head else 0)
    off = 8
    shapes = []
    for _ in range(n_arr):
        ndim, r, c = struct.unpack_from("<BII", body, off)
        off += 9
        shapes.append((r, c) if ndim == 2 else (c,))
    arrays = []
    for shp in shapes:
        n = int(np.prod(shp)) * 8
        if off + n > len(body):
            raise FormatError("truncated encoder weights", len(ENC_MAGIC) + off)
        arrays.append(np.frombuffer(body, dtype="<f8", count=n // 8, offset=off).astype(np.float64).reshape(shp))
        off += n
    if off != len(body):
        raise FormatError("trailing bytes after encoder weights", len(ENC_MAGIC) + off)
    ws = arrays[0:2 * n_layers:2]
    bs = arrays[1:2 * n_layers:2]
    if has_head:
        return EncoderParams(ws, bs, arrays[-2], arrays[-1])
    return EncoderParams(ws, bs)


def save_encoder(params: EncoderParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_encoder(params))


def load_encoder(path) -> EncoderParams:
    with open(path, "rb") as fh:
        return loads_encoder(fh.read())
