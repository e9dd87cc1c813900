"""Minimal deterministic NN engine: conv2d, ReLU, L1 loss, Adam, checkpoints.

Everything is plain numpy. Convolutions run as im2col plus one BLAS
matmul; the backward pass reuses the same machinery (the input gradient
of a convolution is itself a convolution with flipped, transposed
filters). Public entry points take (B, C, H, W) arrays; the *_cl
variants work channels-last, which is the layout the hot paths use.

All ops preserve the input dtype, so the same code runs in float32 for
training and float64 for gradient checking.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"SLFCKPT1"


class Tensor:
    """Contiguous nd-array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray, grad: np.ndarray | None = None):
        self.data = np.ascontiguousarray(data)
        if grad is not None and grad.shape != self.data.shape:
            raise ValueError("grad shape does not match data shape")
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)


# ===================================================================
# Initialization
# ===================================================================


def xavier_init(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Uniform on [-a, a] with a = sqrt(6 / (fan_in + fan_out)).

    For conv kernels (out, in, kh, kw) the fans include the receptive
    field: fan_in = in*kh*kw, fan_out = out*kh*kw.
    """
    if len(shape) == 4:
        o, i, kh, kw = shape
        fan_in, fan_out = i * kh * kw, o * kh * kw
    elif len(shape) == 2:
        fan_out, fan_in = shape
    else:
        raise ValueError(f"unsupported shape {shape} for xavier init")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Conv2DLayer:
    """3x3 (or 1x1) convolution with same-size zero padding and bias."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if kernel_size not in (1, 3):
            raise ValueError("kernel_size must be 1 or 3")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = kernel_size // 2
        if rng is None:
            rng = np.random.default_rng(0)
        k = xavier_init((out_channels, in_channels, kernel_size, kernel_size), rng)
        self.kernel = Tensor(k.astype(dtype))
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype))

    def params(self) -> list[Tensor]:
        return [self.kernel, self.bias]


# ===================================================================
# Convolution, channels-last fast path
# ===================================================================


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, H, W, C) -> (B*H*W, k*k*C) patch matrix for a same-size conv."""
    b, h, w, c = x.shape
    if k == 1:
        return x.reshape(b * h * w, c)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B,H,W,C,k,k)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    """(O, C, k, k) kernel -> (k*k*C, O) matrix matching _im2col columns."""
    o, c, kh, kw = w.shape
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o))


def conv2d_forward_cl(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, keep_col: bool = False
):
    """Channels-last conv: x (B,H,W,C) -> (y (B,H,W,O), col or None)."""
    bs, h, wd, c = x.shape
    o, ci, k, _ = w.shape
    if ci != c:
        raise ValueError(f"input has {c} channels, kernel expects {ci}")
    col = _im2col(x, k)
    y = col @ _weight_matrix(w)
    y += b
    y = y.reshape(bs, h, wd, o)
    return y, (col if keep_col else None)


def conv2d_backward_cl(
    grad_out: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    col: np.ndarray | None = None,
    need_grad_input: bool = True,
):
    """Gradients of conv2d_forward_cl: returns (gx or None, gw, gb)."""
    bs, h, wd, o = grad_out.shape
    oc, c, k, _ = w.shape
    if o != oc:
        raise ValueError(f"grad_out has {o} channels, kernel produces {oc}")
    gy = grad_out.reshape(bs * h * wd, o)
    gb = gy.sum(axis=0)
    if col is None:
        col = _im2col(x, k)
    gwm = col.T @ gy  # (k*k*C, O)
    gw = np.ascontiguousarray(gwm.reshape(k, k, c, o).transpose(3, 2, 0, 1))
    gx = None
    if need_grad_input:
        if k == 1:
            gx = (gy @ w.reshape(o, c)).reshape(bs, h, wd, c)
        else:
            # input gradient is a same-size conv of grad_out with the
            # spatially flipped, channel-transposed kernel
            w_flip = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gcol = _im2col(grad_out, k)
            gx = (gcol @ _weight_matrix(w_flip)).reshape(bs, h, wd, c)
    return gx, gw, gb


# ===================================================================
# Public channels-first API
# ===================================================================


def conv2d_forward(x: np.ndarray, layer: Conv2DLayer) -> np.ndarray:
    """Cross-correlate x (B, C, H, W) with the layer's 3x3 kernel, pad 1."""
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ValueError(
            f"input shape {x.shape} does not match in_channels {layer.in_channels}"
        )
    xc = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    y, _ = conv2d_forward_cl(xc, layer.kernel.data, layer.bias.data)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(
    grad_out: np.ndarray, cached_input: np.ndarray, layer: Conv2DLayer
):
    """Gradients for conv2d_forward; returns (grad_input, grad_kernel, grad_bias)."""
    if grad_out.shape[1] != layer.out_channels:
        raise ValueError(
            f"grad shape {grad_out.shape} does not match out_channels {layer.out_channels}"
        )
    if cached_input.shape[1] != layer.in_channels:
        raise ValueError("cached input does not match layer in_channels")
    gy = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1))
    xc = np.ascontiguousarray(cached_input.transpose(0, 2, 3, 1))
    gx, gw, gb = conv2d_backward_cl(gy, xc, layer.kernel.data)
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Pass gradient where x > 0; subgradient 0 at x == 0."""
    return np.where(x > 0, grad_out, 0)


def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its gradient sign(pred - target) / N."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return loss, grad.astype(pred.dtype, copy=False)


# ===================================================================
# Adam with staircase learning-rate decay
# ===================================================================


@dataclass
class AdamState:
    """Adam moments plus the staircase exponential LR schedule."""

    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_initial: float = 0.0005
    decay_rate: float = 0.9
    decay_steps: int = 10_000

    @classmethod
    def for_params(cls, params: list, **kwargs) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kwargs,
        )

    def learning_rate(self) -> float:
        """Staircase decay evaluated at the current (pre-increment) step."""
        return self.lr_initial * self.decay_rate ** (self.step // self.decay_steps)


def adam_step(params: list, grads: list, state: AdamState) -> list:
    """One Adam update in place; returns the parameter list."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads, and state sizes disagree")
    lr = state.learning_rate()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params


# ===================================================================
# Gradient checking
# ===================================================================


def grad_check(
    model_fn,
    params: list,
    x: np.ndarray,
    tolerance: float = 1e-4,
    n_coords: int = 200,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> dict:
    """Compare analytic parameter gradients against central differences.

    model_fn(params, x) must return (loss, grads). Checks at least
    n_coords randomly chosen parameter coordinates (all of them when the
    model is smaller than that) and reports the maximum relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params = [np.asarray(p, dtype=np.float64).copy() for p in params]
    _, grads = model_fn(params, x)
    sizes = [p.size for p in params]
    total = sum(sizes)
    n = min(n_coords, total)
    flat_choice = rng.choice(total, size=n, replace=False)
    max_rel = 0.0
    worst = None
    for flat in sorted(flat_choice.tolist()):
        pi = 0
        while flat >= sizes[pi]:
            flat -= sizes[pi]
            pi += 1
        idx = np.unravel_index(flat, params[pi].shape)
        orig = params[pi][idx]
        params[pi][idx] = orig + h
        lp, _ = model_fn(params, x)
        params[pi][idx] = orig - h
        lm, _ = model_fn(params, x)
        params[pi][idx] = orig
        numeric = (lp - lm) / (2 * h)
        analytic = float(grads[pi][idx])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        if rel > max_rel:
            max_rel = rel
            worst = (pi, tuple(int(i) for i in idx), analytic, numeric)
    return {
        "max_rel_err": max_rel,
        "n_checked": n,
        "passed": max_rel < tolerance,
        "tolerance": tolerance,
        "worst": worst,
    }


# ===================================================================
# Checkpoint serialization
# ===================================================================


def _write_tensor(f, arr: np.ndarray) -> None:
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_tensor(f) -> np.ndarray:
    (ndim,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
    return data.astype(np.float32)


def save_checkpoint(
    path: str, config: dict, params: list, adam: AdamState | None = None
) -> None:
    """Binary checkpoint: magic, canonical JSON header, float32 tensors.

    Parameter tensors are written in declaration order, each preceded by
    its shape. Adam moments and step follow when provided.
    """
    header = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(params)))
        for p in params:
            _write_tensor(f, p)
        if adam is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", adam.step))
            for arr in adam.m:
                _write_tensor(f, arr)
            for arr in adam.v:
                _write_tensor(f, arr)


def load_checkpoint(path: str):
    """Read a checkpoint; returns (config, params, adam_state_or_None)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(hlen).decode())
        (n,) = struct.unpack("<I", f.read(4))
        params = [_read_tensor(f) for _ in range(n)]
        (has_adam,) = struct.unpack("<B", f.read(1))
        adam = None
        if has_adam:
            (step,) = struct.unpack("<Q", f.read(8))
            m = [_read_tensor(f) for _ in range(n)]
            v = [_read_tensor(f) for _ in range(n)]
            adam = AdamState(m=m, v=v, step=step)
    return config, params, adam
