"""Dense fp64 tensors with reverse-mode automatic differentiation.

Every differentiable operation computes its forward value eagerly with NumPy
and, when a Tape is active on the current thread, appends a node holding the
backward rule. `backward(tape, loss)` replays the nodes in reverse, seeding
the loss gradient with 1 and accumulating additively into every tensor that
needs a gradient. Feature maps are laid out N x H x W x C, row-major.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._kernels import col2im, im2col


class Tensor:
    """A dense fp64 value buffer with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._needs_grad = self.requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    """One recorded operation: inputs, output, and the backward rule."""

    kind: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], None]


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager; ops executed inside record themselves here.
    A tape and its tensors belong to one thread for the duration of a
    forward+backward pass.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        assert popped is self, "tape context exited out of order"
        return False


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(kind: str, inputs: Sequence[Tensor], output: Tensor,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    tape = active_tape()
    needs = any(t._needs_grad for t in inputs)
    output._needs_grad = needs and tape is not None
    if tape is not None and needs:
        tape.nodes.append(TapeNode(kind, tuple(inputs), output, backward_fn))
    return output


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grad buffers of all grad-requiring leaves reachable from `loss`.

    Gradients accumulate additively across fan-out. Raises if `loss` is not a
    scalar output recorded on `tape`.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not any(node.output is loss for node in tape.nodes):
        raise ValueError("loss tensor is not an output recorded on this tape")
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        node.backward_fn(g)


# ---------------------------------------------------------------------------
# elementwise maps

def _relu(v):
    return np.maximum(v, 0.0)


def _relu_square(v):
    r = np.maximum(v, 0.0)
    return r * r


_EWISE = {
    # kind -> (forward, backward(value, upstream)); relu subgradient at 0 is 0
    "relu": (_relu, lambda v, g: g * (v > 0.0)),
    "square": (lambda v: v * v, lambda v, g: 2.0 * v * g),
    "relu_square": (_relu_square, lambda v, g: 2.0 * np.maximum(v, 0.0) * g),
    "negate": (lambda v: -v, lambda v, g: -g),
}


def ewise_apply(kind: str, x: Tensor) -> Tensor:
    """Apply an elementwise map: relu, square (t^2), relu_square ((max(0,t))^2), negate."""
    try:
        fwd, bwd = _EWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    xd = x.data
    out = Tensor(fwd(xd))

    def backward_fn(g):
        if x._needs_grad:
            _accum(x, bwd(xd, g))

    return _record(f"ewise_{kind}", (x,), out, backward_fn)


def relu(x: Tensor) -> Tensor:
    return ewise_apply("relu", x)


def square(x: Tensor) -> Tensor:
    return ewise_apply("square", x)


def relu_square(x: Tensor) -> Tensor:
    return ewise_apply("relu_square", x)


def negate(x: Tensor) -> Tensor:
    return ewise_apply("negate", x)


# ---------------------------------------------------------------------------
# linear algebra

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        if a._needs_grad:
            _accum(a, g)
        if b._needs_grad:
            _accum(b, g)

    return _record("add", (a, b), out, backward_fn)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Batched affine map: (B,Din) @ (Din,Dout) + (Dout,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("affine expects x:(B,Din), w:(Din,Dout), b:(Dout,)")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def backward_fn(g):
        if x._needs_grad:
            _accum(x, g @ w.data.T)
        if w._needs_grad:
            _accum(w, x.data.T @ g)
        if b._needs_grad:
            _accum(b, g.sum(axis=0))

    return _record("affine", (x, w, b), out, backward_fn)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NHWC input with a (k,k,Cin,Cout) kernel, zero padding."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects x:(N,H,W,Cin), kernel:(k,k,Cin,Cout)")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kh}x{kw}")
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1 and pad >= 0")
    k = kh
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d non-positive output extent {oh}x{ow}")

    xpad = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = im2col(xpad, k, stride, oh, ow)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = Tensor((cols @ kmat).reshape(n, oh, ow, cout))
    hp, wp = h + 2 * pad, w + 2 * pad

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.reshape(n * oh * ow, cout))
        if kernel._needs_grad:
            _accum(kernel, (cols.T @ g2).reshape(kernel.shape))
        if x._needs_grad:
            gcols = g2 @ kmat.T
            gxp = col2im(gcols, n, hp, wp, cin, k, stride, oh, ow)
            _accum(x, gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp)

    return _record("conv2d", (x, kernel), out, backward_fn)


# ---------------------------------------------------------------------------
# normalization, pooling, regularization

@dataclass
class BatchNormState:
    """Per-channel running statistics plus the normalize mode."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "training"

    @classmethod
    def for_channels(cls, c: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(c), np.ones(c), momentum, epsilon)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState) -> Tensor:
    """Batch normalization over (N,H,W) per channel.

    Training mode normalizes by batch statistics and updates the running
    stats; inference mode normalizes by the running stats.
    """
    if x.data.ndim != 4:
        raise ValueError("batchnorm2d expects an NHWC tensor")
    n, h, w, c = x.shape
    if gamma.size != c or beta.size != c or state.running_mean.size != c:
        raise ValueError(f"batchnorm2d channel mismatch for C={c}")
    m = n * h * w
    if m == 0:
        raise ValueError("batchnorm2d over an empty batch")
    if state.mode not in ("training", "inference"):
        raise ValueError(f"unknown batchnorm mode {state.mode!r}")

    training = state.mode == "training"
    if training:
        mu = x.data.mean(axis=(0, 1, 2))
        var = x.data.var(axis=(0, 1, 2))
        mom = state.momentum
        state.running_mean = (1.0 - mom) * state.running_mean + mom * mu
        state.running_var = (1.0 - mom) * state.running_var + mom * var
    else:
        mu = state.running_mean
        var = state.running_var
    invstd = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x.data - mu) * invstd
    out = Tensor(gamma.data * xhat + beta.data)

    def backward_fn(g):
        if gamma._needs_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 1, 2)))
        if beta._needs_grad:
            _accum(beta, g.sum(axis=(0, 1, 2)))
        if x._needs_grad:
            if training:
                dxhat = g * gamma.data
                dx = (invstd / m) * (m * dxhat
                                     - dxhat.sum(axis=(0, 1, 2))
                                     - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
            else:
                dx = g * (gamma.data * invstd)
            _accum(x, dx)

    return _record("batchnorm2d", (x, gamma, beta), out, backward_fn)


def gap(x: Tensor) -> Tensor:
    """Global average pooling: per-channel spatial mean, NHWC -> NC."""
    if x.data.ndim != 4:
        raise ValueError("gap expects an NHWC tensor")
    n, h, w, c = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)))
    hw = h * w

    def backward_fn(g):
        if x._needs_grad:
            _accum(x, np.broadcast_to(g[:, None, None, :] / hw, x.data.shape))

    return _record("gap", (x,), out, backward_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, mode: str) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by 1/(1-rate)."""
    if mode not in ("training", "inference"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if mode == "inference" or rate == 0.0:
        out = Tensor(x.data.copy())

        def backward_id(g):
            if x._needs_grad:
                _accum(x, g)

        return _record("dropout", (x,), out, backward_id)

    scale = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * scale)

    def backward_fn(g):
        if x._needs_grad:
            _accum(x, g * scale)

    return _record("dropout", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# broadcasted scaling

def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of an NHWC tensor by a per-sample, per-channel factor (N,C)."""
    if x.data.ndim != 4 or s.data.ndim != 2:
        raise ValueError("scale_channels expects x:(N,H,W,C), s:(N,C)")
    if x.shape[0] != s.shape[0] or x.shape[3] != s.shape[1]:
        raise ValueError(f"scale_channels shape mismatch: x{x.shape} s{s.shape}")
    sb = s.data[:, None, None, :]
    out = Tensor(x.data * sb)

    def backward_fn(g):
        if x._needs_grad:
            _accum(x, g * sb)
        if s._needs_grad:
            _accum(s, (g * x.data).sum(axis=(1, 2)))

    return _record("scale_channels", (x, s), out, backward_fn)


def scale_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a single learnable scalar."""
    if s.size != 1:
        raise ValueError(f"scale_scalar expects a scalar parameter, got shape {s.shape}")
    sval = s.data.reshape(-1)[0]
    out = Tensor(x.data * sval)

    def backward_fn(g):
        if x._needs_grad:
            _accum(x, g * sval)
        if s._needs_grad:
            _accum(s, np.full(s.data.shape, (g * x.data).sum()))

    return _record("scale_scalar", (x, s), out, backward_fn)


def weighted_sum(x: Tensor, v: np.ndarray) -> Tensor:
    """Scalarize a tensor as sum(x * v) for a constant weight array."""
    vv = np.asarray(v, dtype=np.float64)
    if vv.shape != x.data.shape:
        raise ValueError(f"weighted_sum shape mismatch: {x.shape} vs {vv.shape}")
    out = Tensor(np.sum(x.data * vv))

    def backward_fn(g):
        if x._needs_grad:
            _accum(x, float(g) * vv)

    return _record("weighted_sum", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# losses

def softmax_ce(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target], max-subtracted for stability."""
    if logits.data.ndim != 2:
        raise ValueError("softmax_ce expects logits of shape (B,K)")
    bsz, k = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != bsz:
        raise ValueError(f"softmax_ce got {t.shape[0]} targets for batch {bsz}")
    if t.min(initial=0) < 0 or t.max(initial=0) >= k:
        raise ValueError(f"softmax_ce target out of range [0,{k})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    rows = np.arange(bsz)
    out = Tensor(-logp[rows, t].mean())
    probs = ez / sez

    def backward_fn(g):
        if logits._needs_grad:
            gl = probs.copy()
            gl[rows, t] -= 1.0
            _accum(logits, gl * (float(g) / bsz))

    return _record("softmax_ce", (logits,), out, backward_fn)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target array."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {t.shape}")
    d = pred.data - t
    out = Tensor(np.mean(d * d))

    def backward_fn(g):
        if pred._needs_grad:
            _accum(pred, (2.0 * float(g) / d.size) * d)

    return _record("mse", (pred,), out, backward_fn)
