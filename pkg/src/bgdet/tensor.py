"""Minimal dense tensor library with reverse-mode automatic differentiation.

Arrays are plain numpy ndarrays (float32 for training, float64 for gradient
checks). Differentiable operations record themselves on the active ``Tape``
in execution order; ``backward`` replays the tape once in reverse. There is
no broadcasting beyond scalar-against-anything, no views, no fusion: just
enough machinery for a small convolutional detector and its adversarial
heads.
"""

from __future__ import annotations

import logging
import struct
import threading
import zlib
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

# Probability clamp for cross-entropy losses.
EPS = 1e-7


class Tensor:
    """Dense n-d value, optionally tracked for gradients.

    ``grad`` is a same-shape accumulator, allocated eagerly for
    ``requires_grad`` leaves and lazily (during backward) for intermediates.
    """

    __slots__ = ("data", "requires_grad", "grad", "retain_grad", "_tape", "_fresh")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.retain_grad = False
        self._tape: Tape | None = None
        self._fresh = False  # set when a backward pass has touched this leaf

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0
        self._fresh = False

    def check_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{what} contains non-finite values")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; everything routes through the recorded ops below.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        other = _as_tensor(other, self.dtype)
        return add(self, mul(other, _as_tensor(-1.0, self.dtype)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))


@dataclass
class Parameter:
    """Named trainable tensor; names must be unique within a model."""

    name: str
    tensor: Tensor


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


_STATE = threading.local()


class Tape:
    """Ordered record of executed differentiable operations.

    A tape and its tensors are a single-threaded unit of work. Entering the
    context makes the tape active; ops involving tracked tensors append
    themselves. One ``backward`` consumes the tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_STATE, "stack", None)
        if stack is None:
            stack = _STATE.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = getattr(_STATE, "stack", None)
    return stack[-1] if stack else None


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _record(out: Tensor, inputs: tuple[Tensor, ...], fn) -> Tensor:
    tape = active_tape()
    if tape is not None and not tape.consumed and any(_tracked(t, tape) for t in inputs):
        out._tape = tape
        tape.nodes.append(_Node(out, inputs, fn))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g
        t._fresh = True
    elif t._tape is not None:
        t.grad = g.copy() if t.grad is None else t.grad + g


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _shape_err(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def backward(loss: Tensor) -> None:
    """Accumulate gradients of every tracked leaf reachable from ``loss``.

    Visits each recorded operation exactly once, in reverse execution order,
    then clears the tape. A second backward on the same tape is rejected.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        # Constant loss: nothing recorded, all grads stay zero / absent.
        tape = active_tape()
        if tape is not None:
            tape.consumed = True
            tape.nodes.clear()
        return
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed; run a new forward pass")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            # Never consumed by anything reaching the loss; leaves still count
            # as visited so the optimizer sees them.
            for t in node.inputs:
                if t.requires_grad:
                    t._fresh = True
            continue
        node.fn(g)
        if not node.out.retain_grad:
            node.out.grad = None
    tape.consumed = True
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# Elementwise / structural ops
# ---------------------------------------------------------------------------


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise _shape_err(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only scalar-vs-array broadcasting exists, so reduction is a full sum.
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("add", a, b)
    out = Tensor(a.data + b.data)

    def fn(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(g, b.shape))

    return _record(out, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes("mul", a, b)
    out = Tensor(a.data * b.data)

    def fn(g):
        _accum(a, _reduce_to(g * b.data, a.shape))
        _accum(b, _reduce_to(g * a.data, b.shape))

    return _record(out, (a, b), fn)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def fn(g):
        _accum(x, g * mask)

    return _record(out, (x,), fn)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s)

    def fn(g):
        _accum(x, g * s * (1.0 - s))

    return _record(out, (x,), fn)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ValueError("mean: empty input")
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))

    def fn(g):
        _accum(x, np.full_like(x.data, g / n))

    return _record(out, (x,), fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def fn(g):
        _accum(x, g.reshape(x.shape))

    return _record(out, (x,), fn)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))

    def fn(g):
        _accum(x, g.transpose(inv))

    return _record(out, (x,), fn)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows along the first axis; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])

    def fn(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        _accum(x, buf)

    return _record(out, (x,), fn)


def grad_reverse(x: Tensor, weight: float) -> Tensor:
    """Identity forward (bit-identical); backward scales upstream by -weight."""
    if weight < 0:
        raise ValueError(f"grad_reverse: weight must be nonnegative, got {weight}")
    out = Tensor(x.data)  # shares the buffer: forward is exactly the input
    w = x.dtype.type(weight)

    def fn(g):
        _accum(x, g * (-w))

    return _record(out, (x,), fn)


def constant(value: float, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


# ---------------------------------------------------------------------------
# Neural-net layers
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW, zero padding.

    out = floor((in + 2*pad - kernel) / stride) + 1 per spatial axis.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise _shape_err("conv2d", x.shape, w.shape)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output extent for input {x.shape}, kernel {w.shape}, "
                         f"stride {stride}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [N, Ho, Wo, Cin*kh*kw] column matrix, saved for the weight gradient.
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wm = w.data.reshape(cout, -1)
    y = cols @ wm.T
    if b is not None:
        if b.shape != (cout,):
            raise _shape_err("conv2d bias", b.shape, (cout,))
        y = y + b.data
    out = Tensor(np.ascontiguousarray(y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)))

    def fn(g):
        gr = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        _accum(w, (gr.T @ cols).reshape(w.shape))
        if b is not None:
            _accum(b, gr.sum(axis=0))
        dcols = (gr @ wm).reshape(n, ho, wo, cin, kh, kw)
        dxp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                    dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        _accum(x, dxp)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Affine transform: [N, D] @ [D, M] + [M]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _shape_err("linear", x.shape, w.shape)
    y = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise _shape_err("linear bias", b.shape, (w.shape[1],))
        y = y + b.data
    out = Tensor(y)

    def fn(g):
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, fn)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial extents must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2: extents must be even, got {x.shape}")
    ho, wo = h // 2, w // 2
    win = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def fn(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        _accum(x, gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    return _record(out, (x,), fn)


def roi_align(fm: Tensor, boxes, stride: int, output_size: tuple[int, int]) -> Tensor:
    """Bilinear ROI feature extraction.

    ``fm`` is [C, H, W]; ``boxes`` is [N, 4] in image coordinates (x_min,
    y_min, x_max, y_max). Boxes are clipped to the image, divided by
    ``stride``, and sampled once per output cell at the cell center. Returns
    [N, C, h, w]; differentiable with respect to ``fm`` only.
    """
    if fm.data.ndim != 3:
        raise ValueError(f"roi_align: expected [C, H, W] feature map, got {fm.shape}")
    c, h, w = fm.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    nb = boxes.shape[0]
    oh, ow = output_size
    clipped = boxes.copy()
    clipped[:, 0::2] = np.clip(clipped[:, 0::2], 0.0, w * stride)
    clipped[:, 1::2] = np.clip(clipped[:, 1::2], 0.0, h * stride)
    widths = clipped[:, 2] - clipped[:, 0]
    heights = clipped[:, 3] - clipped[:, 1]
    if np.any(widths <= 0) or np.any(heights <= 0):
        bad = int(np.argmax((widths <= 0) | (heights <= 0)))
        raise ValueError(f"roi_align: box {boxes[bad].tolist()} has zero area after clipping")
    fb = clipped / stride
    ys = fb[:, 1, None] + (np.arange(oh) + 0.5)[None, :] * (heights / stride)[:, None] / oh
    xs = fb[:, 0, None] + (np.arange(ow) + 0.5)[None, :] * (widths / stride)[:, None] / ow
    ys = np.clip(ys - 0.5, 0.0, h - 1.0)  # -0.5: sample positions are cell centers
    xs = np.clip(xs - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.minimum(y0, h - 2) if h > 1 else y0
    x0 = np.minimum(x0, w - 2) if w > 1 else x0
    ly = (ys - y0).astype(fm.dtype)
    lx = (xs - x0).astype(fm.dtype)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)

    # Corner index/weight grids, all [N, oh, ow].
    y0g, x0g = y0[:, :, None], x0[:, None, :]
    y1g, x1g = y1[:, :, None], x1[:, None, :]
    lyg, lxg = ly[:, :, None], lx[:, None, :]
    w00 = (1 - lyg) * (1 - lxg)
    w01 = (1 - lyg) * lxg
    w10 = lyg * (1 - lxg)
    w11 = lyg * lxg

    d = fm.data
    vals = (d[:, y0g, x0g] * w00 + d[:, y0g, x1g] * w01 +
            d[:, y1g, x0g] * w10 + d[:, y1g, x1g] * w11)
    out = Tensor(np.ascontiguousarray(vals.transpose(1, 0, 2, 3)))

    def fn(g):
        gc = g.transpose(1, 0, 2, 3)  # [C, N, oh, ow]
        buf = np.zeros((h * w, c), dtype=g.dtype)
        for wgt, yg, xg in ((w00, y0g, x0g), (w01, y0g, x1g), (w10, y1g, x0g), (w11, y1g, x1g)):
            contrib = (gc * wgt).reshape(c, -1).T  # [N*oh*ow, C]
            flat = (yg * w + xg).reshape(-1)
            np.add.at(buf, flat, contrib)
        _accum(fm, buf.T.reshape(c, h, w))

    return _record(out, (fm,), fn)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def binary_cross_entropy(prob: Tensor, label) -> Tensor:
    """Mean of -[y*ln(p) + (1-y)*ln(1-p)], probabilities clamped at EPS."""
    if prob.data.size == 0:
        log.warning("binary_cross_entropy: empty input, contributing 0")
        return constant(0.0, prob.dtype)
    y = np.broadcast_to(np.asarray(label, dtype=prob.dtype), prob.shape)
    p = np.clip(prob.data, EPS, 1.0 - EPS)
    losses = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    out = Tensor(np.asarray(losses.mean(), dtype=prob.dtype))
    inside = (prob.data > EPS) & (prob.data < 1.0 - EPS)
    n = prob.data.size

    def fn(g):
        dp = np.where(inside, (p - y) / (p * (1.0 - p)), 0.0).astype(prob.dtype)
        _accum(prob, g * dp / n)

    return _record(out, (prob,), fn)


def softmax_cross_entropy(logits: Tensor, class_index) -> Tensor:
    """Mean over rows of -ln softmax(logits)[class], max-subtracted."""
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: expected [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    idx = np.asarray(class_index, dtype=np.intp).reshape(-1)
    if idx.shape[0] != n:
        raise _shape_err("softmax_cross_entropy", logits.shape, idx.shape)
    if np.any(idx < 0) or np.any(idx >= k):
        raise ValueError(f"softmax_cross_entropy: class index out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    out = Tensor(np.asarray(-logp[np.arange(n), idx].mean(), dtype=logits.dtype))
    sm = ez / denom

    def fn(g):
        d = sm.copy()
        d[np.arange(n), idx] -= 1.0
        _accum(logits, g * d / n)

    return _record(out, (logits,), fn)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Mean Huber loss: 0.5*d^2 for |d| < 1, else |d| - 0.5."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise _shape_err("smooth_l1", pred.shape, t.shape)
    d = pred.data - t
    ad = np.abs(d)
    losses = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    out = Tensor(np.asarray(losses.mean(), dtype=pred.dtype))
    n = pred.data.size

    def fn(g):
        _accum(pred, g * np.clip(d, -1.0, 1.0) / n)

    return _record(out, (pred,), fn)


# ---------------------------------------------------------------------------
# Parameters, initialization, optimizer
# ---------------------------------------------------------------------------


def init_uniform(shape: tuple[int, ...], fan_in: int, name: str, seed: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Centered uniform with scale 1/sqrt(fan_in), seeded by (seed, name)."""
    rng = np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class SGD:
    """SGD with momentum and L2 weight decay:
    v <- mu*v + (g + wd*p); p <- p - lr*v; grads zeroed after."""

    def __init__(self, params: list[Parameter], learning_rate: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        if learning_rate < 0:
            raise ValueError(f"SGD: learning rate must be nonnegative, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"SGD: momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"SGD: weight decay must be nonnegative, got {weight_decay}")
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("SGD: duplicate parameter names")
        self.params = list(params)
        self.lr = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {p.name: np.zeros_like(p.tensor.data) for p in params}

    def step(self) -> None:
        for p in self.params:
            t = p.tensor
            if t.grad is None or not t._fresh:
                raise RuntimeError(f"SGD.step: no gradient populated for parameter '{p.name}'")
        for p in self.params:
            t = p.tensor
            v = self._velocity[p.name]
            v *= self.momentum
            v += t.grad
            if self.weight_decay:
                v += t.dtype.type(self.weight_decay) * t.data
            t.data -= (t.dtype.type(self.lr)) * v
            t.zero_grad()


# ---------------------------------------------------------------------------
# Checkpoint snapshot format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"BGDT"
CHECKPOINT_VERSION = 1


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named arrays: magic, version, count, then per tensor
    name (u32 length + UTF-8), rank u32, extents u32, float32 LE row-major."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
        for name, arr in named.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            # ascontiguousarray would promote rank-0 to rank-1
            a = np.asarray(arr, dtype="<f4", order="C")
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path}: unsupported version {version}")
    off = 12
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        named[name] = arr.astype(np.float32)
    return named
