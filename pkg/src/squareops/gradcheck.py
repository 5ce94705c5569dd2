"""Finite-difference certification of every backward rule in the package.

`grad_check` compares the analytic gradient of a scalarized tensor function
against central differences. `suite` runs it over a registry covering all
differentiable operations and returns per-op worst-case relative errors.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import modules
from .tensor import (Tape, Tensor, add, affine, backward, batchnorm2d,
                     BatchNormState, conv2d, dropout, ewise_apply, gap, mse,
                     scale_channels, scale_scalar, softmax_ce, weighted_sum)

DEFAULT_STEP = 1e-5
SUITE_TOLERANCE = 1e-4


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = DEFAULT_STEP,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients of f at x.

    `f` must be a pure tensor-valued function of one tensor. Non-scalar
    outputs are scalarized by a fixed random projection so the whole Jacobian
    is exercised. The error at each coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = f(Tensor(x0.copy()))
    v = np.random.default_rng(seed).standard_normal(probe.data.shape)

    def scalar_loss(values: np.ndarray) -> float:
        return float(np.sum(f(Tensor(values)).data * v))

    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = weighted_sum(f(xt), v)
    backward(tape, loss)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = scalar_loss(x0)
        flat[i] = orig - h
        down = scalar_loss(x0)
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# op registry: name -> callable(seed) -> worst error over that op's inputs

def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _check_ewise(kind):
    def run(seed):
        rng = np.random.default_rng(seed)
        return grad_check(lambda t: ewise_apply(kind, t), _rand(rng, 3, 7), seed=seed)
    return run


def _check_affine(seed):
    rng = np.random.default_rng(seed)
    x0, w0, b0 = _rand(rng, 4, 3), _rand(rng, 3, 4), _rand(rng, 4)
    errs = [
        grad_check(lambda t: affine(t, Tensor(w0), Tensor(b0)), x0, seed=seed),
        grad_check(lambda t: affine(Tensor(x0), t, Tensor(b0)), w0, seed=seed),
        grad_check(lambda t: affine(Tensor(x0), Tensor(w0), t), b0, seed=seed),
    ]
    return max(errs)


def _check_conv2d(seed):
    rng = np.random.default_rng(seed)
    x0 = _rand(rng, 1, 5, 5, 2)
    k0 = _rand(rng, 3, 3, 2, 3)
    errs = [
        grad_check(lambda t: conv2d(t, Tensor(k0), stride=2, pad=1), x0, seed=seed),
        grad_check(lambda t: conv2d(Tensor(x0), t, stride=2, pad=1), k0, seed=seed),
    ]
    return max(errs)


def _check_batchnorm(seed):
    rng = np.random.default_rng(seed)
    x0 = _rand(rng, 2, 3, 3, 2)
    g0, b0 = 1.0 + 0.1 * _rand(rng, 2), 0.1 * _rand(rng, 2)

    def fresh_state():
        return BatchNormState.for_channels(2)

    errs = [
        grad_check(lambda t: batchnorm2d(t, Tensor(g0), Tensor(b0), fresh_state()), x0, seed=seed),
        grad_check(lambda t: batchnorm2d(Tensor(x0), t, Tensor(b0), fresh_state()), g0, seed=seed),
        grad_check(lambda t: batchnorm2d(Tensor(x0), Tensor(g0), t, fresh_state()), b0, seed=seed),
    ]
    return max(errs)


def _check_gap(seed):
    rng = np.random.default_rng(seed)
    return grad_check(gap, _rand(rng, 2, 3, 4, 3), seed=seed)


def _check_dropout(seed):
    rng = np.random.default_rng(seed)
    x0 = _rand(rng, 4, 6)

    def f(t):
        # identical mask on every call makes the map deterministic
        return dropout(t, 0.4, np.random.default_rng(seed + 1), mode="training")

    return grad_check(f, x0, seed=seed)


def _check_softmax_ce(seed):
    rng = np.random.default_rng(seed)
    z0 = _rand(rng, 4, 10)
    t = rng.integers(0, 10, size=4)
    return grad_check(lambda z: softmax_ce(z, t), z0, seed=seed)


def _check_mse(seed):
    rng = np.random.default_rng(seed)
    y = _rand(rng, 5, 2)
    return grad_check(lambda t: mse(t, y), _rand(rng, 5, 2), seed=seed)


def _check_add(seed):
    rng = np.random.default_rng(seed)
    b0 = _rand(rng, 3, 4)
    return grad_check(lambda t: add(t, Tensor(b0)), _rand(rng, 3, 4), seed=seed)


def _check_scale_channels(seed):
    rng = np.random.default_rng(seed)
    x0, s0 = _rand(rng, 2, 3, 3, 4), _rand(rng, 2, 4)
    errs = [
        grad_check(lambda t: scale_channels(t, Tensor(s0)), x0, seed=seed),
        grad_check(lambda t: scale_channels(Tensor(x0), t), s0, seed=seed),
    ]
    return max(errs)


def _check_scale_scalar(seed):
    rng = np.random.default_rng(seed)
    x0, s0 = _rand(rng, 3, 5), _rand(rng, 1)
    errs = [
        grad_check(lambda t: scale_scalar(t, Tensor(s0)), x0, seed=seed),
        grad_check(lambda t: scale_scalar(Tensor(x0), t), s0, seed=seed),
    ]
    return max(errs)


def _check_square_pool(seed):
    rng = np.random.default_rng(seed)
    return grad_check(modules.square_pool, _rand(rng, 2, 3, 3, 4), seed=seed)


def _check_moment_pool(order):
    def run(seed):
        rng = np.random.default_rng(seed)
        return grad_check(lambda t: modules.moment_pool(t, order),
                          _rand(rng, 2, 3, 3, 2), seed=seed)
    return run


def _check_gem_pool(seed):
    rng = np.random.default_rng(seed)
    x0 = 0.5 + rng.random((2, 3, 3, 2))
    return grad_check(lambda t: modules.gem_pool(t, 2.0), x0, seed=seed)


def _check_square_softmin(seed):
    rng = np.random.default_rng(seed)
    x0 = _rand(rng, 3, 5)
    raw0 = 0.5 + rng.random(5)
    errs = [
        grad_check(lambda t: modules.square_softmin(
            t, modules.SoftminParams(Tensor(raw0), shared=False)), x0, seed=seed),
        grad_check(lambda t: modules.square_softmin(
            Tensor(x0), modules.SoftminParams(t, shared=False)), raw0, seed=seed),
        grad_check(lambda t: modules.square_softmin(
            Tensor(x0), modules.SoftminParams(t, shared=True)), np.array([0.7]), seed=seed),
    ]
    return max(errs)


def _check_scale_proportion(seed):
    rng = np.random.default_rng(seed)
    g0 = rng.random((3, 4)) + 0.1
    a0 = np.array([0.8])
    errs = [
        grad_check(lambda t: modules.scale_proportion(
            t, modules.ExcitationParams(Tensor(a0))), g0, seed=seed),
        grad_check(lambda t: modules.scale_proportion(
            Tensor(g0), modules.ExcitationParams(t)), a0, seed=seed),
    ]
    return max(errs)


def _check_square_excitation(seed):
    rng = np.random.default_rng(seed)
    f0 = _rand(rng, 1, 3, 3, 4)
    a0 = np.array([0.9])
    errs = [
        grad_check(lambda t: modules.square_excitation(
            t, modules.ExcitationParams(Tensor(a0))), f0, seed=seed),
        grad_check(lambda t: modules.square_excitation(
            Tensor(f0), modules.ExcitationParams(t)), a0, seed=seed),
    ]
    return max(errs)


def _check_excite_of_pool(seed):
    # scale_proportion composed on square_pool output, end to end through F
    rng = np.random.default_rng(seed)
    f0 = _rand(rng, 2, 3, 3, 4)
    alpha = modules.ExcitationParams(Tensor(np.array([1.1])))
    return grad_check(lambda t: modules.scale_proportion(modules.square_pool(t), alpha),
                      f0, seed=seed)


OPS: dict[str, Callable[[int], float]] = {
    "relu": _check_ewise("relu"),
    "square": _check_ewise("square"),
    "relu_square": _check_ewise("relu_square"),
    "negate": _check_ewise("negate"),
    "add": _check_add,
    "affine": _check_affine,
    "conv2d": _check_conv2d,
    "batchnorm2d": _check_batchnorm,
    "gap": _check_gap,
    "dropout": _check_dropout,
    "softmax_ce": _check_softmax_ce,
    "mse": _check_mse,
    "scale_channels": _check_scale_channels,
    "scale_scalar": _check_scale_scalar,
    "square_pool": _check_square_pool,
    "moment_pool_3": _check_moment_pool(3),
    "moment_pool_4": _check_moment_pool(4),
    "moment_pool_5": _check_moment_pool(5),
    "moment_pool_6": _check_moment_pool(6),
    "gem_pool_p2": _check_gem_pool,
    "square_softmin": _check_square_softmin,
    "scale_proportion": _check_scale_proportion,
    "square_excitation": _check_square_excitation,
    "scale_proportion_of_square_pool": _check_excite_of_pool,
}


def suite(ops=None, seeds: int = 5, tolerance: float = SUITE_TOLERANCE):
    """Run the certification suite; returns a list of (op, max_error, passed)."""
    names = list(OPS) if ops is None else list(ops)
    unknown = [n for n in names if n not in OPS]
    if unknown:
        raise ValueError(f"unknown gradcheck ops: {unknown}")
    results = []
    for name in names:
        err = max(OPS[name](seed) for seed in range(seeds))
        results.append((name, err, err < tolerance))
    return results
