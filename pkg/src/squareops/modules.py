"""The four square-operator modules and their pooling relatives.

square_pool    per-channel spatial mean of squared activations (the second
               order origin moment; equals channel mean^2 + channel variance)
moment_pool    origin moments of order 1..6 (order 1 is gap, order 2 is
               square_pool)
gem_pool       generalized-mean pooling; p=2 is square_pool followed by a
               guarded square root
square_softmin head producing nonpositive logits y_k = -s_k * x_k^2
scale_proportion  channel gate s_k = G_k / (G_k + alpha^2), no exponentials
square_excitation rescales each channel of a feature map by the
               scale_proportion of its square-pooled energy
square_encoding_wrap  inserts a square layer before the last spatial conv of
               a block's main branch
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _accum, _record, scale_channels

EPS_ROOT = 1e-12  # guards the gem root's gradient at zero

MOMENT_ORDERS = range(1, 7)


@dataclass
class SoftminParams:
    """Learnable pre-scales for square_softmin; effective scale is raw^2 >= 0."""

    raw: Tensor
    shared: bool = False

    @classmethod
    def init(cls, channels: int, shared: bool = False) -> "SoftminParams":
        n = 1 if shared else channels
        return cls(Tensor(np.ones(n), requires_grad=True), shared)


@dataclass
class ExcitationParams:
    """Single learnable scalar shared by all channels of a square_excitation gate."""

    alpha: Tensor

    @classmethod
    def init(cls) -> "ExcitationParams":
        return cls(Tensor(np.ones(1), requires_grad=True))


def square_pool(f: Tensor) -> Tensor:
    """Per-channel spatial mean of squared activations, NHWC -> NC."""
    if f.data.ndim != 4:
        raise ValueError("square_pool expects an NHWC tensor")
    n, h, w, c = f.shape
    d = f.data
    out = Tensor((d * d).mean(axis=(1, 2)))
    hw = h * w

    def backward_fn(g):
        if f._needs_grad:
            _accum(f, (2.0 / hw) * d * g[:, None, None, :])

    return _record("square_pool", (f,), out, backward_fn)


def moment_pool(f: Tensor, order: int) -> Tensor:
    """Per-channel spatial mean of activations raised to `order` (1..6)."""
    if f.data.ndim != 4:
        raise ValueError("moment_pool expects an NHWC tensor")
    if int(order) != order or order not in MOMENT_ORDERS:
        raise ValueError(f"moment order must be an integer in [1,6], got {order}")
    order = int(order)
    n, h, w, c = f.shape
    d = f.data
    if order == 1:
        powered = d
    elif order == 2:
        powered = d * d
    else:
        powered = d ** order
    out = Tensor(powered.mean(axis=(1, 2)))
    hw = h * w

    def backward_fn(g):
        gb = g[:, None, None, :] / hw
        if f._needs_grad:
            if order == 1:
                _accum(f, np.broadcast_to(gb, d.shape))
            elif order == 2:
                _accum(f, 2.0 * d * gb)
            else:
                _accum(f, order * d ** (order - 1) * gb)

    return _record(f"moment_pool_{order}", (f,), out, backward_fn)


def gem_pool(f: Tensor, p: float) -> Tensor:
    """Generalized-mean pooling ((1/HW) sum F^p)^(1/p) over nonnegative inputs.

    For p != 1 the root takes mean + EPS_ROOT, keeping the gradient finite
    when a channel is entirely zero; p = 1 reduces to gap exactly.
    """
    if f.data.ndim != 4:
        raise ValueError("gem_pool expects an NHWC tensor")
    if p <= 0:
        raise ValueError(f"gem exponent must be positive, got {p}")
    d = f.data
    if np.any(d < 0.0):
        raise ValueError("gem_pool requires nonnegative inputs")
    n, h, w, c = f.shape
    hw = h * w
    m = (d ** p).mean(axis=(1, 2))
    if p == 1:
        out = Tensor(m)
    else:
        out = Tensor((m + EPS_ROOT) ** (1.0 / p))

    def backward_fn(g):
        if f._needs_grad:
            if p == 1:
                douter = g
            else:
                douter = g * (1.0 / p) * (m + EPS_ROOT) ** (1.0 / p - 1.0)
            _accum(f, douter[:, None, None, :] * (p * d ** (p - 1.0)) / hw)

    return _record("gem_pool", (f,), out, backward_fn)


def square_softmin(x: Tensor, params: SoftminParams) -> Tensor:
    """Map pre-logits x to nonpositive logits y_k = -(raw_k^2) * x_k^2.

    The winning class under softmax is the one whose scaled pre-logit is
    closest to zero; logits are invariant to any per-coordinate sign flip
    of x. A shared single raw parameter broadcasts over all channels.
    """
    if x.data.ndim != 2:
        raise ValueError("square_softmin expects logits of shape (B,K)")
    raw = params.raw
    k = x.shape[1]
    expected = 1 if params.shared else k
    if raw.size != expected:
        raise ValueError(
            f"softmin raw parameter has size {raw.size}, expected {expected}")
    rv = raw.data.reshape(-1)
    s = rv * rv
    xd = x.data
    out = Tensor(-(s * (xd * xd)))

    def backward_fn(g):
        if x._needs_grad:
            _accum(x, -2.0 * s * xd * g)
        if raw._needs_grad:
            gr = -2.0 * rv * (xd * xd) * g
            if params.shared:
                _accum(raw, np.full(raw.data.shape, gr.sum()))
            else:
                _accum(raw, gr.sum(axis=0).reshape(raw.data.shape))

    return _record("square_softmin", (x, raw), out, backward_fn)


def scale_proportion(g_in: Tensor, params: ExcitationParams) -> Tensor:
    """Channel gate s_k = G_k / (G_k + alpha^2) over nonnegative energies G.

    Outputs lie in [0,1]. At G_k = 0 with alpha = 0 both the value and the
    gradient are defined as 0 (the limit along G -> 0 for fixed alpha > 0).
    """
    alpha = params.alpha
    if alpha.size != 1:
        raise ValueError("scale_proportion expects a single scalar alpha")
    a = alpha.data.reshape(-1)[0]
    a2 = a * a
    gd = g_in.data
    denom = gd + a2
    zero = denom == 0.0
    safe = np.where(zero, 1.0, denom)
    out = Tensor(np.where(zero, 0.0, gd / safe))

    def backward_fn(g):
        inv2 = 1.0 / (safe * safe)
        if g_in._needs_grad:
            _accum(g_in, g * np.where(zero, 0.0, a2 * inv2))
        if alpha._needs_grad:
            da = g * np.where(zero, 0.0, -2.0 * a * gd * inv2)
            _accum(alpha, np.full(alpha.data.shape, da.sum()))

    return _record("scale_proportion", (g_in, alpha), out, backward_fn)


def square_excitation(f: Tensor, params: ExcitationParams) -> Tensor:
    """Rescale each channel of F by scale_proportion(square_pool(F)).

    Applied to a block's main-branch output before it joins the shortcut.
    Contains no exponential nonlinearity.
    """
    return scale_channels(f, scale_proportion(square_pool(f), params))


def square_encoding_wrap(block: dict) -> dict:
    """Return a copy of a block with a square layer inserted immediately
    before the last spatial (k > 1) convolution of its main branch.

    Rejects blocks without a spatial convolution and blocks already wrapped
    (a second square would change the semantics).
    """
    if not isinstance(block, dict) or block.get("kind") != "block":
        raise ValueError("square_encoding_wrap expects a block descriptor")
    main = block["main"]
    idx = None
    for i, layer in enumerate(main):
        if layer.get("kind") == "conv" and layer.get("k", 1) > 1:
            idx = i
    if idx is None:
        raise ValueError("block main branch has no spatial convolution")
    if idx > 0 and main[idx - 1].get("kind") == "square":
        raise ValueError("block is already square-encoded")
    new_main = [dict(l) for l in main[:idx]] + [{"kind": "square"}] + [dict(l) for l in main[idx:]]
    wrapped = dict(block)
    wrapped["main"] = new_main
    return wrapped
