"""RefocusNet: two parallel conv trajectories with summed residuals.

Trajectory A stacks 3x3 conv+ReLU layers; each layer also feeds a
linear 1x1 projection in trajectory B back to input-channel width. The
projections are summed into a residual R, and the head combines a
per-view average of R with a 3x3 convolution of R into the output RGB.

The 1x1 projections keep the default model at roughly 234k parameters;
3x3 projections would overshoot the parameter budget by about 18%.

Variants:
  final     out = view_average(R) + conv3x3(R)
  variant1  out = view_average(input views) + conv3x3(R)
  variant2  out = view_average(R)
  no_skip   no trajectory B; out = conv3x3(last A feature map)

forward/backward are pure functions of (config, params, input), so the
gradient checker exercises exactly the arithmetic training uses.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import (
    Conv2DLayer,
    conv2d_backward_cl,
    conv2d_forward_cl,
    l1_loss,
)

VARIANTS = ("final", "variant1", "variant2", "no_skip")

_VIEWS_PER_CONFIG = {
    "two_horizontal": 2,
    "four_rect": 4,
    "four_rhombus": 4,
    "eight": 8,
}


@dataclass(frozen=True)
class NetworkConfig:
    """Topology description; the checkpoint header serializes this."""

    depth: int = 7
    width: int = 64
    in_channels: int = 12
    variant: str = "final"
    input_config: str = "four_rhombus"

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")
        if self.in_channels % 3 != 0:
            raise ValueError("in_channels must be divisible by 3")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        expected = 3 * _VIEWS_PER_CONFIG[self.input_config]
        if self.in_channels != expected:
            raise ValueError(
                f"{self.input_config} supplies {expected} channels, "
                f"config says {self.in_channels}"
            )

    @property
    def n_views(self) -> int:
        return self.in_channels // 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    @classmethod
    def for_input(cls, input_config: str, **kwargs) -> "NetworkConfig":
        views = _VIEWS_PER_CONFIG[input_config]
        return cls(in_channels=3 * views, input_config=input_config, **kwargs)


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form weight+bias count for a config."""
    d, w, c = config.depth, config.width, config.in_channels
    traj_a = (9 * c * w + w) + (d - 1) * (9 * w * w + w)
    traj_b = d * (w * c + c)
    head = 9 * c * 3 + 3
    if config.variant == "no_skip":
        return traj_a + (9 * w * 3 + 3)
    if config.variant == "variant2":
        return traj_a + traj_b
    return traj_a + traj_b + head


# ===================================================================
# Model container
# ===================================================================


class RefocusNetModel:
    """Built layers plus the flat parameter list, in declaration order."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        c, w = config.in_channels, config.width
        self.layers_a = [Conv2DLayer(c, w, 3, rng=rng)]
        for _ in range(config.depth - 1):
            self.layers_a.append(Conv2DLayer(w, w, 3, rng=rng))
        self.layers_b = []
        self.head = None
        if config.variant == "no_skip":
            self.head = Conv2DLayer(w, 3, 3, rng=rng)
        else:
            for _ in range(config.depth):
                self.layers_b.append(Conv2DLayer(w, c, 1, rng=rng))
            if config.variant != "variant2":
                self.head = Conv2DLayer(c, 3, 3, rng=rng)

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers_a + self.layers_b:
            out.extend(layer.params())
        if self.head is not None:
            out.extend(self.head.params())
        return out

    def param_arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.params()]

    def set_params(self, arrays: list[np.ndarray]) -> None:
        mine = self.params()
        if len(mine) != len(arrays):
            raise ValueError("parameter list length mismatch")
        for t, a in zip(mine, arrays):
            if t.data.shape != a.shape:
                raise ValueError(f"shape mismatch {t.data.shape} vs {a.shape}")
            t.data = np.ascontiguousarray(a, dtype=t.data.dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Inference on (B, in_channels, H, W); returns (B, 3, H, W)."""
        xc = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        y, _ = forward_pass(self.config, self.param_arrays(), xc, keep_ctx=False)
        return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def build(config: NetworkConfig, rng: np.random.Generator) -> RefocusNetModel:
    """Construct a model with Xavier-initialized weights."""
    return RefocusNetModel(config, rng)


# ===================================================================
# Functional forward / backward (channels-last)
# ===================================================================


def _split_params(config: NetworkConfig, params: list):
    """Group the flat parameter list into ((wA,bA)..., (wB,bB)..., head)."""
    d = config.depth
    n_b = 0 if config.variant == "no_skip" else d
    has_head = config.variant != "variant2"
    expected = 2 * (d + n_b) + (2 if has_head else 0)
    if len(params) != expected:
        raise ValueError(f"expected {expected} parameter tensors, got {len(params)}")
    a = [(params[2 * i], params[2 * i + 1]) for i in range(d)]
    b = [(params[2 * d + 2 * i], params[2 * d + 2 * i + 1]) for i in range(n_b)]
    head = (params[-2], params[-1]) if has_head else None
    return a, b, head


def view_average(x: np.ndarray, n_views: int) -> np.ndarray:
    """(B, H, W, 3n) -> (B, H, W, 3), averaging RGB triples across views."""
    b, h, w, c = x.shape
    return x.reshape(b, h, w, n_views, 3).mean(axis=3)


def _view_average_grad(gy: np.ndarray, n_views: int) -> np.ndarray:
    b, h, w, _ = gy.shape
    g = np.broadcast_to((gy / n_views)[:, :, :, None, :], (b, h, w, n_views, 3))
    return g.reshape(b, h, w, n_views * 3)


def forward_pass(
    config: NetworkConfig,
    params: list,
    x: np.ndarray,
    keep_ctx: bool = True,
    keep_cols: bool = True,
):
    """Channels-last forward. Returns (output, ctx for backward or None)."""
    if x.shape[-1] != config.in_channels:
        raise ValueError(
            f"input has {x.shape[-1]} channels, config wants {config.in_channels}"
        )
    layers_a, layers_b, head = _split_params(config, params)
    skip = config.variant != "no_skip"
    h = x
    ctx_a = []  # (layer_input, col, preactivation)
    acts = []  # relu outputs, inputs to trajectory B
    residual = None
    for i, (w, b) in enumerate(layers_a):
        pre, col = conv2d_forward_cl(h, w, b, keep_col=keep_ctx and keep_cols)
        act = np.maximum(pre, 0)
        if keep_ctx:
            ctx_a.append((h, col, pre))
            acts.append(act)
        if skip:
            wb, bb = layers_b[i]
            r, _ = conv2d_forward_cl(act, wb, bb)
            residual = r if residual is None else residual + r
        h = act
    if config.variant == "no_skip":
        out, _ = conv2d_forward_cl(h, head[0], head[1])
    elif config.variant == "final":
        conv_r, _ = conv2d_forward_cl(residual, head[0], head[1])
        out = view_average(residual, config.n_views) + conv_r
    elif config.variant == "variant1":
        conv_r, _ = conv2d_forward_cl(residual, head[0], head[1])
        out = view_average(x, config.n_views) + conv_r
    else:  # variant2
        out = view_average(residual, config.n_views)
    ctx = (x, ctx_a, acts, residual) if keep_ctx else None
    return out, ctx


def backward_pass(
    config: NetworkConfig, params: list, ctx, grad_out: np.ndarray
) -> list:
    """Parameter gradients for forward_pass, aligned with the param list."""
    layers_a, layers_b, head = _split_params(config, params)
    x, ctx_a, acts, residual = ctx
    d = config.depth
    grads_a = [None] * d
    grads_b = [None] * len(layers_b)
    grad_head = None
    grad_into_a = None  # gradient wrt the last A activation
    grad_r = None  # gradient wrt the residual sum

    if config.variant == "no_skip":
        grad_into_a, gw, gb = conv2d_backward_cl(grad_out, acts[-1], head[0])
        grad_head = (gw, gb)
    elif config.variant == "final":
        g_conv, gw, gb = conv2d_backward_cl(grad_out, residual, head[0])
        grad_head = (gw, gb)
        grad_r = _view_average_grad(grad_out, config.n_views) + g_conv
    elif config.variant == "variant1":
        grad_r, gw, gb = conv2d_backward_cl(grad_out, residual, head[0])
        grad_head = (gw, gb)
    else:  # variant2
        grad_r = _view_average_grad(grad_out, config.n_views)

    for i in range(d - 1, -1, -1):
        ga = grad_into_a  # None at the top layer except for no_skip
        if grad_r is not None:
            gb_in, gwb, gbb = conv2d_backward_cl(grad_r, acts[i], layers_b[i][0])
            grads_b[i] = (gwb, gbb)
            ga = gb_in if ga is None else ga + gb_in
        h_in, col, pre = ctx_a[i]
        gpre = np.where(pre > 0, ga, 0)
        gx, gw, gb = conv2d_backward_cl(
            gpre, h_in, layers_a[i][0], col=col, need_grad_input=(i > 0)
        )
        grads_a[i] = (gw, gb)
        grad_into_a = gx
    out = []
    for gw, gb in grads_a:
        out.extend([gw, gb])
    for gw, gb in grads_b:
        out.extend([gw, gb])
    if grad_head is not None:
        out.extend(list(grad_head))
    return out


def loss_and_grads(
    config: NetworkConfig,
    params: list,
    x: np.ndarray,
    target: np.ndarray,
    keep_cols: bool = True,
):
    """L1 loss and parameter gradients for one channels-last batch."""
    y, ctx = forward_pass(config, params, x, keep_ctx=True, keep_cols=keep_cols)
    loss, gy = l1_loss(y, target)
    grads = backward_pass(config, params, ctx, gy)
    return loss, grads, y
