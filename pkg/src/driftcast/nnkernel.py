"""Minimal deterministic neural substrate: layers, exact gradients, Adam.

Everything runs in float64 on plain numpy arrays.  Each operation has an
explicit backward rule (the model graphs are fixed and small, so no tape is
needed).  Layer inputs may carry arbitrary leading batch dimensions; the
documented shapes are for the trailing axes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


def dense(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x @ W + b for x (..., n_in), W (n_in, n_out), b (n_out,)."""
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(
            f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}"
        )
    return x @ W + b


def dense_backward(x, W, grad_y):
    """Gradients of dense w.r.t. (x, W, b) given upstream grad_y."""
    xf = x.reshape(-1, x.shape[-1])
    gf = grad_y.reshape(-1, grad_y.shape[-1])
    grad_x = grad_y @ W.T
    grad_W = xf.T @ gf
    grad_b = gf.sum(axis=0)
    return grad_x, grad_W, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x, grad_y):
    # Subgradient at exactly 0 is 0.
    return grad_y * (x > 0)


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis, stable under constant shifts."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, grad_y):
    """Backward through softmax given its output y."""
    inner = (grad_y * y).sum(axis=-1, keepdims=True)
    return y * (grad_y - inner)


def _conv_cols(x: np.ndarray, width: int) -> np.ndarray:
    """Causal patch matrix: cols[..., t, i, dt] = x[..., t - width + 1 + dt, i]."""
    pad = [(0, 0)] * x.ndim
    pad[-2] = (width - 1, 0)
    xp = np.pad(x, pad)
    return np.lib.stride_tricks.sliding_window_view(xp, width, axis=-2)


def conv1d_causal(x: np.ndarray, K: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Causal 1-D convolution.

    x is (..., time, c_in), K is (c_out, c_in, width), b is (c_out,).  The
    input is left-padded with width-1 zero rows, so output[t] depends only on
    x[t-width+1 .. t] and the output length equals the input length.
    """
    c_out, c_in, width = K.shape
    if x.shape[-1] != c_in or b.shape[0] != c_out:
        raise ValueError(
            f"conv1d shape mismatch: x {x.shape}, K {K.shape}, b {b.shape}"
        )
    cols = _conv_cols(x, width)                      # (..., T, c_in, width)
    kmat = K.transpose(1, 2, 0).reshape(c_in * width, c_out)
    flat = cols.reshape(*cols.shape[:-2], c_in * width)
    return flat @ kmat + b


def conv1d_causal_backward(x, K, grad_y):
    """Gradients of conv1d_causal w.r.t. (x, K, b)."""
    c_out, c_in, width = K.shape
    t = x.shape[-2]
    cols = _conv_cols(x, width).reshape(-1, c_in * width)
    gf = grad_y.reshape(-1, c_out)
    kmat = K.transpose(1, 2, 0).reshape(c_in * width, c_out)

    grad_b = gf.sum(axis=0)
    grad_K = (cols.T @ gf).reshape(c_in, width, c_out).transpose(2, 0, 1)

    gcols = (gf @ kmat.T).reshape(*grad_y.shape[:-1], c_in, width)
    pad_shape = list(x.shape)
    pad_shape[-2] = t + width - 1
    gxp = np.zeros(pad_shape)
    for dt in range(width):
        gxp[..., dt : dt + t, :] += gcols[..., dt]
    grad_x = gxp[..., width - 1 :, :]
    return grad_x, grad_K, grad_b


def global_avg_pool_time(x: np.ndarray) -> np.ndarray:
    """Per-channel mean over the time axis: (..., time, c) -> (..., c)."""
    if x.shape[-2] < 1:
        raise ValueError("cannot pool over an empty time axis")
    return x.mean(axis=-2)


def global_avg_pool_time_backward(x, grad_y):
    t = x.shape[-2]
    return np.broadcast_to(grad_y[..., None, :], x.shape) / t


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    """Per-parameter Adam moments plus hyperparameters."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    learning_rate: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, param: np.ndarray, learning_rate: float) -> "AdamState":
        return cls(
            first_moment=np.zeros_like(param),
            second_moment=np.zeros_like(param),
            step_count=0,
            learning_rate=learning_rate,
        )


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState):
    """One Adam update with bias correction; returns (new_param, new_state)."""
    if param.shape != grad.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_param = param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, replace(state, first_moment=m, second_moment=v, step_count=t)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform weights scaled by 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# --------------------------------------------------------------------------
# Finite-difference gradient checking
# --------------------------------------------------------------------------


def grad_check(f, x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(x)`` must return ``(scalar_value, gradient_wrt_x)``.  The relative
    error per coordinate is |num - ana| / max(1, |num|, |ana|), which behaves
    as an absolute error for near-zero gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError("analytic gradient shape mismatch")
    worst = 0.0
    flat = x.ravel().copy()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up, _ = f(flat.reshape(x.shape))
        flat[i] = orig - eps
        down, _ = f(flat.reshape(x.shape))
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        ana = analytic.ravel()[i]
        err = abs(numeric - ana) / max(1.0, abs(numeric), abs(ana))
        worst = max(worst, err)
    return worst
