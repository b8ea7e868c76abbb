"""Minimal differentiable layer library with reverse-mode gradients.

Exactly the operations the surrogate network needs: unpadded or zero-padded
2-D convolution, 3x3 max pooling, dense layers, ReLU/sigmoid, and a
bias-corrected ADAM optimizer.  Every forward returns ``(output, backward)``
where ``backward(output_gradient)`` yields the input and parameter gradients.

Conventions: images are ``(H, W, C)`` or batched ``(N, H, W, C)``; kernels are
``(k, k, C_in, C_out)``; dense weights are ``(m, n)`` mapping n -> m.  All
internal arithmetic is double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, OptimizerError


def _as_batch(x, ndim):
    x = np.asarray(x, dtype=float)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim == ndim:
        return x, False
    raise DimensionError(f"expected a {ndim - 1}-D or {ndim}-D array, got shape {x.shape}")


def _im2col(x, k):
    """(N, H, W, C) -> (N*Ho*Wo, k*k*C) patch matrix, rows in scan order."""
    n, h, w, c = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    # (N, Ho, Wo, C, k, k) -> (N, Ho, Wo, k, k, C)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    ho, wo = h - k + 1, w - k + 1
    return win.reshape(n * ho * wo, k * k * c), ho, wo


def conv2d(x, kernels, bias, padding="valid"):
    """2-D convolution (cross-correlation), stride 1.

    ``padding="valid"`` shrinks the map to (H-k+1, W-k+1); ``"same"``
    zero-pads so the spatial size is preserved.  Returns the output and a
    backward function mapping the output gradient to
    ``(input_grad, kernel_grad, bias_grad)``.
    """
    x, single = _as_batch(x, 4)
    shown_shape = x.shape[1:] if single else x.shape
    kernels = np.asarray(kernels, dtype=float)
    bias = np.asarray(bias, dtype=float)
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise DimensionError(f"kernels must be (k, k, C_in, C_out), got {kernels.shape}")
    k = kernels.shape[0]
    if k % 2 != 1:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if kernels.shape[2] != x.shape[3]:
        raise DimensionError(
            f"input channels {shown_shape} incompatible with kernels {kernels.shape}")
    if bias.shape != (kernels.shape[3],):
        raise DimensionError(f"bias shape {bias.shape} does not match C_out={kernels.shape[3]}")
    if padding == "same":
        p = (k - 1) // 2
        nb, hb, wb, cb = x.shape
        xp = np.zeros((nb, hb + 2 * p, wb + 2 * p, cb))
        xp[:, p:p + hb, p:p + wb, :] = x
    elif padding == "valid":
        p = 0
        xp = x
    else:
        raise ValueError(f"unknown padding {padding!r}")
    if xp.shape[1] < k or xp.shape[2] < k:
        raise DimensionError(f"input {shown_shape} smaller than kernel {kernels.shape}")

    n, c_in, c_out = x.shape[0], kernels.shape[2], kernels.shape[3]
    cols, ho, wo = _im2col(xp, k)
    wmat = kernels.reshape(k * k * c_in, c_out)
    y = (cols @ wmat + bias).reshape(n, ho, wo, c_out)

    def backward(gy):
        gy = np.asarray(gy, dtype=float)
        if single and gy.ndim == 3:
            gy = gy[None]
        if gy.shape != y.shape:
            raise DimensionError(f"output gradient {gy.shape} does not match output {y.shape}")
        g2 = gy.reshape(n * ho * wo, c_out)
        gb = g2.sum(axis=0)
        gk = (cols.T @ g2).reshape(k, k, c_in, c_out)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, c_in)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, ki:ki + ho, kj:kj + wo, :] += gcols[:, :, :, ki, kj, :]
        gx = gxp[:, p:p + x.shape[1], p:p + x.shape[2], :] if p else gxp
        if single:
            gx = gx[0]
        return gx, gk, gb

    return (y[0] if single else y), backward


def maxpool3(x):
    """Non-overlapping 3x3 max pooling; remainder rows/columns are dropped.

    The backward pass routes each output gradient to exactly one input
    position (the first maximum in row-major window order on ties).
    """
    x, single = _as_batch(x, 4)
    n, h, w, c = x.shape
    if h < 3 or w < 3:
        raise DimensionError(f"input {x.shape} smaller than the 3x3 pooling window")
    h3, w3 = h // 3, w // 3
    v = x[:, :h3 * 3, :w3 * 3, :].reshape(n, h3, 3, w3, 3, c)
    v = v.transpose(0, 1, 3, 2, 4, 5).reshape(n, h3, w3, 9, c)
    am = v.argmax(axis=3)
    y = np.take_along_axis(v, am[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward(gy):
        gy = np.asarray(gy, dtype=float)
        if single and gy.ndim == 3:
            gy = gy[None]
        if gy.shape != y.shape:
            raise DimensionError(f"output gradient {gy.shape} does not match output {y.shape}")
        buf = np.zeros((n, h3, w3, 9, c))
        np.put_along_axis(buf, am[:, :, :, None, :], gy[:, :, :, None, :], axis=3)
        gx = np.zeros_like(x)
        gx[:, :h3 * 3, :w3 * 3, :] = (
            buf.reshape(n, h3, w3, 3, 3, c).transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, h3 * 3, w3 * 3, c))
        if single:
            gx = gx[0]
        return gx

    return (y[0] if single else y), backward


def dense(x, weights, bias):
    """Affine map ``y = weights @ x + bias`` with weights of shape (m, n)."""
    x, single = _as_batch(x, 2)
    weights = np.asarray(weights, dtype=float)
    bias = np.asarray(bias, dtype=float)
    if weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise DimensionError(f"input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias {bias.shape} does not match weights {weights.shape}")
    y = x @ weights.T + bias

    def backward(gy):
        gy = np.asarray(gy, dtype=float)
        if single and gy.ndim == 1:
            gy = gy[None]
        if gy.shape != y.shape:
            raise DimensionError(f"output gradient {gy.shape} does not match output {y.shape}")
        gx = gy @ weights
        gw = gy.T @ x
        gb = gy.sum(axis=0)
        return (gx[0] if single else gx), gw, gb

    return (y[0] if single else y), backward


def relu(x):
    """Elementwise max(x, 0); the subgradient at exactly 0 is 0."""
    x = np.asarray(x, dtype=float)
    mask = x > 0
    y = np.where(mask, x, 0.0)

    def backward(gy):
        return np.asarray(gy, dtype=float) * mask

    return y, backward


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(gy):
        return np.asarray(gy, dtype=float) * y * (1.0 - y)

    return y, backward


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter ADAM moment accumulators and hyperparameters."""

    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_adam(params: dict, alpha=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(alpha=alpha, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected ADAM update.  Mutates ``params`` and ``state`` in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for tensor '{name}' at step {t}")
        if g.shape != params[name].shape:
            raise DimensionError(
                f"gradient {g.shape} does not match parameter {params[name].shape} ('{name}')")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.alpha * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


# -- verification harness ----------------------------------------------------


def grad_check(f, tensors: dict, rng: np.random.Generator, h: float = 1e-5,
               rel_tol: float = 1e-5, max_coords: int = 40, floor: float = 1e-5) -> dict:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f(tensors) -> (scalar, grads_dict)`` must be a pure function of the
    tensors.  For each tensor, up to ``max_coords`` coordinates are sampled;
    coordinates whose +/-h interval visibly brackets a derivative
    discontinuity (detected by a large second difference) are skipped and
    counted, since central differences are meaningless across a kink.

    Returns ``{name: {"max_rel_dev", "n_checked", "n_skipped", "ok"}}`` plus
    an ``"ok"`` aggregate under the key ``"__all__"``.
    """
    f0, grads = f(tensors)
    report = {}
    all_ok = True
    for name in sorted(tensors):
        t = tensors[name]
        size = t.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        flat = t.reshape(-1)
        gflat = np.asarray(grads[name]).reshape(-1)
        max_dev = 0.0
        skipped = 0
        checked = 0
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f(tensors)[0]
            flat[idx] = orig - h
            fm = f(tensors)[0]
            flat[idx] = orig
            fd = (fp - fm) / (2.0 * h)
            an = gflat[idx]
            denom = h * max(abs(fd), abs(an), 1e-6)
            if abs(fp + fm - 2.0 * f0) / denom > 0.1:
                skipped += 1
                continue
            dev = abs(fd - an) / max(abs(fd), abs(an), floor)
            max_dev = max(max_dev, dev)
            checked += 1
        ok = max_dev <= rel_tol
        all_ok = all_ok and ok
        report[name] = {"max_rel_dev": max_dev, "n_checked": checked,
                        "n_skipped": skipped, "ok": ok}
    report["__all__"] = {"ok": all_ok}
    return report
