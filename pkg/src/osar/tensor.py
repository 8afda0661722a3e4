"""Dense tensors, reverse-mode autodiff, Adam, and Xavier initialization.

Just enough network math for the two models in this package: a ``Tensor``
wraps a numpy array plus an optional gradient buffer, differentiable ops
record pull-back closures onto a ``Tape``, and ``Tape.backward`` replays them
in reverse to accumulate dLoss/dParam into every tensor that requires grad.

4-d tensors follow the batch x channels x height x width convention.
"""

from __future__ import annotations

import numpy as np

from . import kernels

# conv2d backward reuses the forward column buffer only below this size
_COL_CACHE_LIMIT = 64 * 2**20


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class Tensor:
    """Numpy array with an optional same-shaped gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Execution-ordered record of differentiable operations.

    Each entry is a closure that pushes the output tensor's gradient onto the
    op's inputs. Because ops are appended in execution order, replaying the
    entries backwards visits every output after all of its consumers, so
    gradients accumulate correctly without an explicit topological sort.
    """

    def __init__(self):
        self._entries = []

    def record(self, out, pull):
        out.requires_grad = True
        self._entries.append((out, pull))

    def backward(self, loss):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, pull in reversed(self._entries):
            if out.grad is not None:
                pull(out.grad)

    def __len__(self):
        return len(self._entries)


def backward(loss, tape):
    """Populate gradients of everything on ``tape`` that feeds ``loss``."""
    tape.backward(loss)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _wants_grad(tape, *tensors):
    return tape is not None and any(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def conv2d(tape, x, w, b, stride=1, padding=0):
    """2-d convolution with zero padding, lowered to im2col + matmul.

    x: (B, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.data.ndim}-d and {w.data.ndim}-d")
    bsz, cin, h, wd = x.shape
    cout, cin_k, kh, kw = w.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d channel mismatch: input has {cin}, kernel expects {cin_k}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d input {h}x{wd} (pad {padding}) smaller than kernel {kh}x{kw}")

    oh = kernels.conv_out_size(h, kh, stride, padding)
    ow = kernels.conv_out_size(wd, kw, stride, padding)
    col = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(cout, -1)
    out_nc = wmat @ col + b.data[:, None]
    out = Tensor(out_nc.reshape(cout, bsz, oh, ow).transpose(1, 0, 2, 3))

    if _wants_grad(tape, x, w, b):
        # keep small column buffers for the backward pass; large ones are
        # rebuilt there, since retaining every layer's buffer dominates
        # peak memory at training batch sizes
        col_kept = col if col.nbytes <= _COL_CACHE_LIMIT else None

        def pull(g):
            g_nc = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
            if w.requires_grad:
                col_b = col_kept
                if col_b is None:
                    col_b = kernels.im2col(x.data, kh, kw, stride, padding)
                _accumulate(w, (g_nc @ col_b.T).reshape(w.shape))
            if b.requires_grad:
                _accumulate(b, g_nc.sum(axis=1))
            if x.requires_grad:
                _accumulate(x, kernels.col2im(wmat.T @ g_nc, bsz, cin, h, wd,
                                              kh, kw, stride, padding))

        tape.record(out, pull)
    return out


def fully_connected(tape, x, w, b):
    """x: (B, N), w: (M, N), b: (M,) -> (B, M)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("fully_connected expects 2-d input and weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"fully_connected inner dims disagree: input {x.shape} vs weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"fully_connected bias must have shape ({w.shape[0]},), got {b.shape}")
    out = Tensor(x.data @ w.data.T + b.data)

    if _wants_grad(tape, x, w, b):
        def pull(g):
            if x.requires_grad:
                _accumulate(x, g @ w.data)
            if w.requires_grad:
                _accumulate(w, g.T @ x.data)
            if b.requires_grad:
                _accumulate(b, g.sum(axis=0))

        tape.record(out, pull)
    return out


def relu(tape, x):
    out = Tensor(np.maximum(x.data, 0))
    if _wants_grad(tape, x):
        mask = x.data > 0

        def pull(g):
            _accumulate(x, g * mask)

        tape.record(out, pull)
    return out


def _stable_sigmoid(z):
    # exp only ever sees non-positive arguments, so no overflow either way
    pos = z >= 0
    e = np.exp(np.where(pos, -z, z))
    return np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(tape, x):
    s = _stable_sigmoid(x.data)
    out = Tensor(s)
    if _wants_grad(tape, x):
        def pull(g):
            _accumulate(x, g * s * (1.0 - s))

        tape.record(out, pull)
    return out


def upsample_nearest_2x(tape, x):
    """Replicate every pixel 2x2. x: (B, C, H, W) -> (B, C, 2H, 2W)."""
    if x.data.ndim != 4:
        raise ShapeError("upsample_nearest_2x expects a 4-d tensor")
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3))
    if _wants_grad(tape, x):
        bsz, c, h, w = x.shape

        def pull(g):
            _accumulate(x, g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)))

        tape.record(out, pull)
    return out


def concat_channels(tape, a, b):
    """Concatenate two (B, C, H, W) tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-d tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels spatial/batch mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    if _wants_grad(tape, a, b):
        def pull(g):
            if a.requires_grad:
                _accumulate(a, g[:, :ca])
            if b.requires_grad:
                _accumulate(b, g[:, ca:])

        tape.record(out, pull)
    return out


def add(tape, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if _wants_grad(tape, a, b):
        def pull(g):
            _accumulate(a, g)
            _accumulate(b, g)

        tape.record(out, pull)
    return out


def scale(tape, x, c):
    """Multiply by a python scalar."""
    out = Tensor(x.data * c)
    if _wants_grad(tape, x):
        def pull(g):
            _accumulate(x, g * c)

        tape.record(out, pull)
    return out


def reshape(tape, x, shape):
    out = Tensor(x.data.reshape(shape))
    if _wants_grad(tape, x):
        old = x.shape

        def pull(g):
            _accumulate(x, g.reshape(old))

        tape.record(out, pull)
    return out


def mse_loss(tape, pred, target):
    """Mean over all elements of (pred - target)^2, as a scalar tensor."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.asarray((diff * diff).sum() / n))

    if _wants_grad(tape, pred, target):
        def pull(g):
            gd = g * (2.0 / n) * diff
            if pred.requires_grad:
                _accumulate(pred, gd)
            if target.requires_grad:
                _accumulate(target, -gd)

        tape.record(out, pull)
    return out


def softmax_cross_entropy(tape, logits, labels):
    """Mean of -log softmax(logits)[label] over the batch.

    logits: (B, K); labels: int array of length B.
    """
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (B, K) logits")
    labels = np.asarray(labels)
    bsz, k = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"labels must have shape ({bsz},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label out of range for {k} classes")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    nll = np.log(ez.sum(axis=1)) - z[np.arange(bsz), labels]
    out = Tensor(np.asarray(nll.mean()))

    if _wants_grad(tape, logits):
        def pull(g):
            gl = p.copy()
            gl[np.arange(bsz), labels] -= 1.0
            _accumulate(logits, g * gl / bsz)

        tape.record(out, pull)
    return out


# ---------------------------------------------------------------------------
# initialization and optimization
# ---------------------------------------------------------------------------

def xavier_fans(shape):
    """(fan_in, fan_out) for FC (M, N) or conv (Cout, Cin, kh, kw) weights."""
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    raise ShapeError(f"xavier_init needs a 2-d or 4-d shape, got {shape}")


def xavier_init(shape, rng, dtype=np.float64):
    """Uniform draw in +/- sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = xavier_fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    def __init__(self, params, lr=0.0005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
