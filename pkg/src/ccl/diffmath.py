"""Hand-written forward/backward kernels, Adam, gradient checking, checkpoints.

Every layer is a pair of functions. ``*_forward`` returns the output and
whatever the matching ``*_backward`` needs; the backward takes the upstream
gradient and returns gradients for its inputs. Arrays are float64 numpy
arrays throughout; leading axes are treated as batch axes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

FORMAT_NAME = "ccl-params"
FORMAT_VERSION = 1


class DiffMathError(ValueError):
    pass


def check_finite(array, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise FloatingPointError(f"{where}: {bad} non-finite value(s)")
    return array


# ---------------------------------------------------------------------------
# dense

def dense_forward(x, W, b):
    """``out[..., i] = sum_j W[i, j] * x[..., j] + b[i]``."""
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DiffMathError(f"dense shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W.T + b


def dense_backward(dout, x, W):
    """Returns ``(dx, dW, db)``."""
    dx = dout @ W
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dx, d2.T @ x2, d2.sum(axis=0)


# ---------------------------------------------------------------------------
# dilated causal convolution
#
# Tap j of the kernel looks j*dilation steps into the past:
#     out[b, o, t] = sum_{i, j} K[o, i, j] * x[b, i, t - j*dilation]
# with zeros before the start of the sequence.

def _conv_columns(x, k, dilation):
    # unfolded input laid out as one (C*k, B*N) matrix so the conv is one GEMM
    B, C, N = x.shape
    xt = x.transpose(1, 0, 2)
    cols = np.zeros((C, k, B, N))
    for j in range(k):
        shift = j * dilation
        if shift < N:
            cols[:, j, :, shift:] = xt[:, :, :N - shift]
    return cols.reshape(C * k, B * N)


def causal_conv1d_forward(x, kernel, dilation: int = 1, bias=None):
    """Causal conv over the last axis. ``x`` is (C, N) or (B, C, N).

    Returns ``(out, cols)``; ``cols`` is the unfolded input the backward needs.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if dilation < 1 or int(dilation) != dilation:
        raise DiffMathError(f"dilation must be a positive integer, got {dilation!r}")
    if kernel.ndim != 3 or x.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise DiffMathError(f"conv shape mismatch: x{x.shape} kernel{kernel.shape}")
    B, _, N = x.shape
    C_out, C_in, k = kernel.shape
    cols = _conv_columns(x, k, dilation)
    out = kernel.reshape(C_out, C_in * k) @ cols
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(C_out, B, N).transpose(1, 0, 2)
    return (out[0] if squeeze else out), cols


def causal_conv1d_backward(dout, cols, kernel, dilation: int = 1):
    """Returns ``(dx, dkernel, dbias)`` for :func:`causal_conv1d_forward`."""
    squeeze = dout.ndim == 2
    if squeeze:
        dout = dout[None]
    C_out, C_in, k = kernel.shape
    B, _, N = dout.shape
    d2 = np.ascontiguousarray(dout.transpose(1, 0, 2)).reshape(C_out, B * N)
    dkernel = (d2 @ cols.T).reshape(kernel.shape)
    dbias = d2.sum(axis=1)
    dcols = (kernel.reshape(C_out, C_in * k).T @ d2).reshape(C_in, k, B, N)
    dxt = dcols[:, 0].copy()
    for j in range(1, k):
        shift = j * dilation
        if shift < N:
            dxt[:, :, :N - shift] += dcols[:, j, :, shift:]
    dx = dxt.transpose(1, 0, 2)
    return (dx[0] if squeeze else dx), dkernel, dbias


# ---------------------------------------------------------------------------
# pointwise, pooling, normalization

def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    # subgradient at exactly 0 is 0
    return dout * (x > 0)


def global_mean_pool_forward(x):
    """Mean over the last (time) axis."""
    return x.mean(axis=-1)


def global_mean_pool_backward(dout, length: int):
    return np.repeat(dout[..., None] / length, length, axis=-1)


def l2_normalize_forward(x):
    """Scale each vector on the last axis to unit norm. Returns ``(y, norm)``."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DiffMathError("cannot normalize a zero-norm vector")
    return x / norm, norm


def l2_normalize_backward(dout, y, norm):
    return (dout - y * np.sum(y * dout, axis=-1, keepdims=True)) / norm


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DiffMathError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DiffMathError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_similarity_backward(dout: float, a, b):
    """Gradients of ``dout * cos(a, b)`` with respect to ``a`` and ``b``."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    c = np.dot(a, b) / (na * nb)
    da = b / (na * nb) - c * a / na**2
    db = a / (na * nb) - c * b / nb**2
    return dout * da, dout * db


def mse_forward(pred, target) -> float:
    return float(np.mean((pred - target) ** 2))


def mse_backward(pred, target):
    return 2.0 * (pred - target) / pred.size


# ---------------------------------------------------------------------------
# parameters and Adam

class Parameter:
    """A trainable array with its gradient and Adam moment buffers."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy(self) -> "Parameter":
        p = Parameter(self.name, self.value)
        p.grad = self.grad.copy()
        p.m = self.m.copy()
        p.v = self.v.copy()
        return p

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def adam_step(param: Parameter, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, step: int = 1) -> None:
    """One bias-corrected Adam update of ``param`` using ``param.grad``."""
    if step < 1:
        raise DiffMathError(f"Adam step index starts at 1, got {step}")
    g = param.grad
    if g.shape != param.value.shape:
        raise DiffMathError(f"{param.name}: gradient shape {g.shape} != {param.value.shape}")
    param.m = beta1 * param.m + (1.0 - beta1) * g
    param.v = beta2 * param.v + (1.0 - beta2) * g * g
    m_hat = param.m / (1.0 - beta1**step)
    v_hat = param.v / (1.0 - beta2**step)
    param.value = param.value - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, params, lr=None):
        self.t += 1
        lr = self.lr if lr is None else lr
        for p in params:
            adam_step(p, lr, self.beta1, self.beta2, self.eps, self.t)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numeric_gradient(fn: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def grad_check(fn, x, analytic, h: float = 1e-5, tolerance: float = 1e-4,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare an analytic gradient with central differences of ``fn`` at ``x``.

    The error per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries that are zero on both sides from dominating with round-off.
    """
    numeric = numeric_gradient(fn, x, h)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise DiffMathError(f"analytic gradient shape {analytic.shape} != {numeric.shape}")
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = np.abs(analytic - numeric) / scale
    return GradCheckReport(float(err.max(initial=0.0)), tolerance, int(err.size))


# ---------------------------------------------------------------------------
# checkpoints

def save_params(params: Mapping[str, np.ndarray], path, meta=None) -> None:
    """Write named arrays as versioned JSON; floats keep full precision."""
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta or {},
        "params": [
            {"name": name, "shape": list(np.shape(v)),
             "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for name, v in params.items()
        ],
    }
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_params(path):
    """Inverse of :func:`save_params`. Returns ``(params, meta)``."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != FORMAT_NAME:
        raise DiffMathError(f"{path}: not a {FORMAT_NAME} file")
    if payload.get("version") != FORMAT_VERSION:
        raise DiffMathError(f"{path}: unsupported version {payload.get('version')!r}")
    params = {}
    for entry in payload["params"]:
        arr = np.asarray(entry["values"], dtype=np.float64)
        params[entry["name"]] = arr.reshape(entry["shape"])
    return params, payload.get("meta", {})


# ---------------------------------------------------------------------------
# residual TCN stack shared by the forecaster and the contrastive encoder

class TemporalConvStack:
    """1x1 input projection followed by residual dilated causal blocks.

    Each block computes ``relu(h + conv(relu(conv(h, d)), d))`` with both
    convolutions at the block's dilation ``d``.
    """

    def __init__(self, in_channels: int, channels: int, dilations=(1, 2, 4),
                 kernel_size: int = 3, rng=None, prefix: str = "tcn"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dilations = tuple(int(d) for d in dilations)
        self.kernel_size = kernel_size
        self.params: dict[str, Parameter] = {}

        def add(name, value):
            self.params[name] = Parameter(f"{prefix}.{name}", value)

        add("in.w", rng.normal(0.0, 1.0 / np.sqrt(in_channels), (channels, in_channels, 1)))
        add("in.b", np.zeros(channels))
        fan_in = channels * kernel_size
        for i, _ in enumerate(self.dilations):
            add(f"b{i}.w1", rng.normal(0.0, np.sqrt(2.0 / fan_in), (channels, channels, kernel_size)))
            add(f"b{i}.b1", np.zeros(channels))
            # small second conv keeps the residual path close to identity at init
            add(f"b{i}.w2", rng.normal(0.0, 0.5 / np.sqrt(fan_in), (channels, channels, kernel_size)))
            add(f"b{i}.b2", np.zeros(channels))

    def forward(self, x):
        p = self.params
        h, cols_in = causal_conv1d_forward(x, p["in.w"].value, 1, p["in.b"].value)
        cache = [cols_in]
        for i, d in enumerate(self.dilations):
            a, cols1 = causal_conv1d_forward(h, p[f"b{i}.w1"].value, d, p[f"b{i}.b1"].value)
            r = relu_forward(a)
            c, cols2 = causal_conv1d_forward(r, p[f"b{i}.w2"].value, d, p[f"b{i}.b2"].value)
            s = h + c
            cache.append((a, cols1, cols2, s))
            h = relu_forward(s)
        return h, cache

    def backward(self, dh, cache):
        """Accumulates parameter gradients; returns the input gradient."""
        p = self.params
        for i in reversed(range(len(self.dilations))):
            d = self.dilations[i]
            a, cols1, cols2, s = cache[i + 1]
            ds = relu_backward(dh, s)
            dr, dw2, db2 = causal_conv1d_backward(ds, cols2, p[f"b{i}.w2"].value, d)
            p[f"b{i}.w2"].grad += dw2
            p[f"b{i}.b2"].grad += db2
            da = relu_backward(dr, a)
            dh_in, dw1, db1 = causal_conv1d_backward(da, cols1, p[f"b{i}.w1"].value, d)
            p[f"b{i}.w1"].grad += dw1
            p[f"b{i}.b1"].grad += db1
            dh = ds + dh_in
        dx, dw, db = causal_conv1d_backward(dh, cache[0], p["in.w"].value, 1)
        p["in.w"].grad += dw
        p["in.b"].grad += db
        return dx
