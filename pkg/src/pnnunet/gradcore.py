"""Dense tensors with a reverse-mode differentiation tape.

Only the primitives the segmentation networks need are provided: 2D
convolution, 2x2/stride-2 transposed convolution, 2x2 max pooling, leaky
ReLU, channel concatenation, softmax, and a handful of reductions and losses.
Everything is NCHW and backed by numpy.

Recording is explicit::

    with Tape():
        loss = softmax_cross_entropy(conv2d(x, w, b, padding=1), y, 3)[0]
    backward(loss)

Ops executed outside a ``Tape`` block compute values only (inference mode).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, LabelError, NumericError, ShapeError, TapeError

_local = threading.local()


class Tensor:
    """N-dimensional real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of executed ops; replayed in reverse by :func:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append(_Node(out, tuple(inputs), grad_fn))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Fill ``grad`` on every leaf that contributed to ``loss``.

    Leaves seen on the tape but not reachable from ``loss``, and any extra
    ``params`` given, receive zero gradients. Existing gradients are
    overwritten, not accumulated. The tape is cleared afterwards.
    """
    tape = loss.tape
    if tape is None or not loss.requires_grad:
        raise TapeError("loss was not produced by ops recorded on a Tape")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {id(node.out) for node in tape.nodes}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else g.reshape(t.shape).astype(t.dtype, copy=False)
    for p in params:
        if id(p) not in leaves:
            p.grad = np.zeros_like(p.data)
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# convolution family


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an [Cout, Cin, kh, kw] kernel."""
    if stride <= 0:
        raise ConfigError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be non-negative, got {padding}")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and 4D weight")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weight expects {cin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    # channel-major columns (Cin, kh, kw, N, Ho, Wo) keep both GEMMs and the
    # backward scatter on contiguous inner dimensions
    xc = xp.transpose(1, 0, 2, 3)
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    k = cin * kh * kw
    flat = cols.reshape(k, n * ho * wo)
    w2 = weight.data.reshape(cout, k)
    out = (w2 @ flat).reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def grad_fn(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gw = (gc @ flat.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gc.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ gc).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros((cin, n, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, grad_fn)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution for the non-overlapping case kh == kw == stride.

    ``weight`` is laid out [Cin, Cout, kh, kw]; each input pixel scatters a
    kh x kw patch, so output extents are input extents times ``stride``.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv_transpose2d expects NCHW input and 4D weight")
    cin, cout, kh, kw = weight.shape
    if not (kh == kw == stride) or stride <= 0:
        raise ConfigError(f"only kernel == stride is supported, got {kh}x{kw}/stride {stride}")
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    # (N, H, W, Cout, kh, kw) -> (N, Cout, H, kh, W, kw)
    patches = np.tensordot(x.data, weight.data, axes=([1], [0]))
    out = patches.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, h * kh, w * kw)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def grad_fn(g):
        gp = g.reshape(n, cout, h, kh, w, kw)
        gx = np.tensordot(gp, weight.data, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2) \
            if x.requires_grad else None
        gw = np.tensordot(x.data, gp, axes=([0, 2, 3], [0, 2, 4])) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(np.ascontiguousarray(out), inputs, grad_fn)


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Disjoint 2x2 max pooling; ties send gradient to the first element."""
    if window != 2:
        raise ConfigError("only a 2x2 window is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def grad_fn(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# elementwise and structural


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ConfigError(f"slope must lie in [0, 1), got {slope}")
    neg = x.data < 0
    out = np.where(neg, x.data * slope, x.data)
    return _record(out, (x,), lambda g: (np.where(neg, g * slope, g),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record(out, (a, b), lambda g: (g[:, :c1], g[:, c1:]))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, factor: float) -> Tensor:
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def sum_all(a: Tensor) -> Tensor:
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _record(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def mean_of(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise arithmetic mean of equally shaped tensors."""
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError("mean_of: tensors differ in shape")
    k = len(tensors)
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    out /= k
    return _record(out, tuple(tensors), lambda g: tuple(g / k for _ in range(k)))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(p, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    """Natural log with the argument floored at the dtype's smallest normal."""
    tiny = np.finfo(x.dtype).tiny
    safe = np.maximum(x.data, tiny)
    return _record(np.log(safe), (x,), lambda g: (np.where(x.data > tiny, g / safe, 0.0),))


def _check_targets(targets, shape, class_count) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim == 4 and t.shape[1] == 1:
        t = t[:, 0]
    n, c, h, w = shape
    if t.shape != (n, h, w):
        raise ShapeError(f"targets shape {t.shape} does not match logits {shape}")
    if c != class_count:
        raise ShapeError(f"logits carry {c} classes, expected {class_count}")
    t = t.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= class_count):
        raise LabelError(f"labels must lie in [0, {class_count})")
    return t


def softmax_cross_entropy(logits: Tensor, targets, class_count: int) -> tuple[Tensor, np.ndarray]:
    """Mean per-pixel cross-entropy. Returns the loss and the softmax probabilities."""
    t = _check_targets(targets, logits.shape, class_count)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, t[:, None], axis=1)
    count = t.size
    loss = -picked.sum() / count
    probs = np.exp(logp)

    def grad_fn(g):
        d = probs.copy()
        np.put_along_axis(d, t[:, None], np.take_along_axis(d, t[:, None], axis=1) - 1.0, axis=1)
        return (d * (g / count),)

    return _record(np.asarray(loss), (logits,), grad_fn), probs


def nll_probs(probs: Tensor, targets, class_count: int) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under per-pixel probabilities."""
    t = _check_targets(targets, probs.shape, class_count)
    tiny = np.finfo(probs.dtype).tiny
    picked = np.take_along_axis(probs.data, t[:, None], axis=1)
    safe = np.maximum(picked, tiny)
    count = t.size
    loss = -np.log(safe).sum() / count

    def grad_fn(g):
        d = np.zeros_like(probs.data)
        np.put_along_axis(d, t[:, None], np.where(picked > tiny, -g / (count * safe), 0.0), axis=1)
        return (d,)

    return _record(np.asarray(loss), (probs,), grad_fn)


def soft_dice_loss(probs: Tensor, targets, class_count: int, smooth: float = 1.0) -> Tensor:
    """One minus the mean soft Dice over the foreground classes 1..C-1."""
    t = _check_targets(targets, probs.shape, class_count)
    onehot = (t[:, None] == np.arange(class_count)[None, :, None, None]).astype(probs.dtype)
    p, y = probs.data[:, 1:], onehot[:, 1:]
    inter = (p * y).sum(axis=(0, 2, 3))
    denom = p.sum(axis=(0, 2, 3)) + y.sum(axis=(0, 2, 3))
    dice = (2 * inter + smooth) / (denom + smooth)
    k = class_count - 1
    loss = 1.0 - dice.mean()

    def grad_fn(g):
        d = np.zeros_like(probs.data)
        num = 2 * y * (denom + smooth)[None, :, None, None] - (2 * inter + smooth)[None, :, None, None]
        d[:, 1:] = -g / k * num / ((denom + smooth) ** 2)[None, :, None, None]
        return (d,)

    return _record(np.asarray(loss), (probs,), grad_fn)


def mse(a: Tensor, b) -> Tensor:
    """Mean squared difference; ``b`` is treated as a constant unless it is a recorded tensor."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _record(np.asarray((diff ** 2).mean()), (a, b),
                   lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    The whole step is rejected with NumericError if any gradient is not
    finite; neither the parameters nor the state are touched in that case.
    """
    if state.lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {state.lr}")
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"grad {i} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {p.name or i}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(self.params, grads, self.state)


# ---------------------------------------------------------------------------
# finite differences


def directional_check(fn: Callable[[], Tensor], params: Sequence[Tensor], rng: np.random.Generator | None = None,
                      h: float = 1e-6) -> tuple[float, float]:
    """Compare the analytic directional derivative of ``fn`` with central differences.

    ``fn`` must rebuild the graph from ``params`` each call. Returns
    ``(analytic, numeric)`` along a random unit direction.
    """
    rng = rng or np.random.default_rng(0)
    dirs = [rng.standard_normal(p.shape) for p in params]
    norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    with Tape():
        loss = fn()
    backward(loss, params)
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs))

    def shifted(sign):
        for p, d in zip(params, dirs):
            p.data += sign * h * d
        val = float(fn().data)
        for p, d in zip(params, dirs):
            p.data -= sign * h * d
        return val

    numeric = (shifted(1.0) - shifted(-1.0)) / (2 * h)
    return analytic, numeric


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)
