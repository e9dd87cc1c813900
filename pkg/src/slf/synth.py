"""Synthetic layered-scene light fields with analytic refocus ground truth.

Scenes are ordered stacks of textured layers, each moving with its own
disparity (pixels per unit angular step). Views are rendered by
translating every layer with the same bilinear shifter the refocuser
uses, so refocusing at a layer's disparity recovers that layer exactly
in integer-shift configurations.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .lightfield import (
    ApertureMask,
    FocusParameter,
    LightField,
    RefocusedImage,
    circular_mask,
    input_view_selection,
    refocus_shift_average,
    save_image,
    save_lightfield,
    shift_image,
)

# Disparities live on the quarter-pixel lattice spanning the focus range.
# 1.0 is excluded: pixels == 1 has no alpha, so that plane can never be
# brought into focus.
DISPARITY_POOL = tuple(
    k * 0.25 for k in range(-6, 6) if k != 4
)


@dataclass(frozen=True)
class Layer:
    """One scene layer: texture, binary coverage mask, and disparity."""

    texture: np.ndarray
    alpha_mask: np.ndarray
    disparity: float


@dataclass(frozen=True)
class LayeredScene:
    """Ordered back-to-front layer stack; the first layer covers the frame."""

    layers: tuple
    height: int
    width: int
    seed: int

    def __post_init__(self):
        if not self.layers:
            raise ValueError("scene needs at least one layer")
        back = self.layers[0]
        if not bool(back.alpha_mask.all()):
            raise ValueError("backmost layer must cover the full frame")


@dataclass(frozen=True)
class DatasetSpec:
    """Scene counts and sampling ranges for dataset generation."""

    n_train: int
    n_val: int
    n_test: int
    height: int = 128
    width: int = 192
    angular: int = 17
    focus_lo: float = -1.50
    focus_hi: float = 1.30
    focus_step: float = 0.05
    noise_lo: float = 0.0
    noise_hi: float = 0.08
    patch_size: int = 100
    input_config: str = "four_rhombus"

    def __post_init__(self):
        n = (self.focus_hi - self.focus_lo) / self.focus_step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("focus step does not divide the focus range")
        if self.noise_lo < 0:
            raise ValueError("noise range lower bound must be >= 0")
        if self.noise_hi < self.noise_lo:
            raise ValueError("noise range is inverted")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.angular - 1) / 2, (self.angular - 1) / 2)


def focus_values(spec: DatasetSpec) -> np.ndarray:
    """All stops lo, lo+step, ..., hi of the discrete focus grid."""
    n = int(round((spec.focus_hi - spec.focus_lo) / spec.focus_step))
    return np.round(spec.focus_lo + np.arange(n + 1) * spec.focus_step, 9)


def valid_focus_values(spec: DatasetSpec) -> np.ndarray:
    """Focus stops excluding the pixels == 1 pole."""
    vals = focus_values(spec)
    return vals[np.abs(vals - 1.0) > 1e-9]


# ===================================================================
# Scene construction
# ===================================================================


def _noise_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Band-limited colored noise in [0, 1], smooth but non-constant."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    radius = np.hypot(fy, fx)
    cutoff = rng.uniform(0.03, 0.15)
    lowpass = np.exp(-((radius / cutoff) ** 2))
    tex = np.empty((h, w, 3))
    for c in range(3):
        spec = np.fft.rfft2(rng.standard_normal((h, w))) * lowpass
        tex[:, :, c] = np.fft.irfft2(spec, s=(h, w))
    tex -= tex.min()
    peak = tex.max()
    if peak > 0:
        tex /= peak
    return 0.1 + 0.8 * tex


def _stamp_shapes(rng: np.random.Generator, tex: np.ndarray, count: int) -> None:
    """Draw random solid rectangles, ellipses, and glyph blocks in place."""
    h, w = tex.shape[:2]
    for _ in range(count):
        color = rng.uniform(0.05, 0.95, size=3)
        kind = rng.integers(0, 3)
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        ry = int(rng.integers(3, max(4, h // 6)))
        rx = int(rng.integers(3, max(4, w // 6)))
        if kind == 0:  # rectangle
            tex[max(0, cy - ry) : cy + ry, max(0, cx - rx) : cx + rx] = color
        elif kind == 1:  # ellipse
            yy = np.arange(h)[:, None] - cy
            xx = np.arange(w)[None, :] - cx
            inside = (yy / ry) ** 2 + (xx / rx) ** 2 <= 1.0
            tex[inside] = color
        else:  # glyph: coarse random bitmap, upscaled blockily
            cell = int(rng.integers(2, 5))
            bits = rng.random((5, 7)) < 0.45
            block = np.kron(bits, np.ones((cell, cell), dtype=bool))
            by, bx = block.shape
            y0 = max(0, min(cy, h - by))
            x0 = max(0, min(cx, w - bx))
            region = tex[y0 : y0 + by, x0 : x0 + bx]
            region[block[: region.shape[0], : region.shape[1]]] = color


def _coverage_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Union of 1-3 random rectangles/ellipses; binary {0, 1}."""
    mask = np.zeros((h, w))
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        ry = int(rng.integers(h // 8, h // 3))
        rx = int(rng.integers(w // 8, w // 3))
        if rng.random() < 0.5:
            mask[max(0, cy - ry) : cy + ry, max(0, cx - rx) : cx + rx] = 1.0
        else:
            yy = np.arange(h)[:, None] - cy
            xx = np.arange(w)[None, :] - cx
            mask[(yy / ry) ** 2 + (xx / rx) ** 2 <= 1.0] = 1.0
    if not mask.any():
        mask[h // 3 : 2 * h // 3, w // 3 : 2 * w // 3] = 1.0
    return mask


def make_scene(
    seed: int,
    height: int,
    width: int,
    n_layers: int | None = None,
    disparities: list[float] | None = None,
) -> LayeredScene:
    """Build a seeded scene of 2-5 layers with distinct disparities."""
    rng = np.random.default_rng(seed)
    if n_layers is None:
        n_layers = int(rng.integers(2, 6))
    if disparities is None:
        disparities = list(
            rng.choice(DISPARITY_POOL, size=n_layers, replace=False)
        )
    elif len(disparities) != n_layers:
        raise ValueError("need one disparity per layer")
    layers = []
    for i in range(n_layers):
        tex = _noise_texture(rng, height, width)
        _stamp_shapes(rng, tex, count=int(rng.integers(3, 9)))
        np.clip(tex, 0.0, 1.0, out=tex)
        alpha = np.ones((height, width)) if i == 0 else _coverage_mask(rng, height, width)
        layers.append(Layer(texture=tex, alpha_mask=alpha, disparity=float(disparities[i])))
    return LayeredScene(layers=tuple(layers), height=height, width=width, seed=seed)


# ===================================================================
# Rendering
# ===================================================================


def render_view(
    scene: LayeredScene, view_index: tuple[int, int], center: tuple[float, float]
) -> np.ndarray:
    """Composite the layers back-to-front for one angular position.

    Each layer is translated by disparity * (u - u_c, v - v_c); its mask
    travels with it, so occlusion follows the layer.
    """
    u, v = view_index
    u_c, v_c = center
    img = np.zeros((scene.height, scene.width, 3))
    for layer in scene.layers:
        dy = layer.disparity * (u - u_c)
        dx = layer.disparity * (v - v_c)
        tex = shift_image(layer.texture, dy, dx)
        a = shift_image(layer.alpha_mask, dy, dx)[..., None]
        img = a * tex + (1.0 - a) * img
    return np.clip(img, 0.0, 1.0)


def render_lightfield(scene: LayeredScene, grid_rows: int, grid_cols: int) -> LightField:
    """Render the full angular grid of views."""
    center = ((grid_rows - 1) / 2, (grid_cols - 1) / 2)
    views = np.empty((grid_rows, grid_cols, scene.height, scene.width, 3), dtype=np.float32)
    for u in range(grid_rows):
        for v in range(grid_cols):
            views[u, v] = render_view(scene, (u, v), center)
    return LightField.from_views(views)


def ground_truth_refocus(
    scene: LayeredScene,
    focus: FocusParameter,
    crop_margin: int = 6,
    angular: int = 17,
    lf: LightField | None = None,
) -> RefocusedImage:
    """Dense reference refocus: 17x17 render, circular 241-view average.

    A pre-rendered light field can be passed to skip the render.
    """
    if lf is None:
        lf = render_lightfield(scene, angular, angular)
    mask = circular_mask(lf.grid_rows, lf.grid_cols)
    return refocus_shift_average(lf, mask, focus, crop_margin=crop_margin)


# ===================================================================
# Training examples
# ===================================================================


def shifted_input_views(
    lf: LightField, input_mask: ApertureMask, focus: FocusParameter
) -> np.ndarray:
    """Masked views pre-shifted to the requested focus, stacked row-major.

    Returns (n_views, H, W, 3) float32. The network consumes these
    directly; shifting is the only geometry it is spared.
    """
    from .lightfield import view_shift  # local import keeps module header lean

    center = lf.center
    idx = input_mask.indices()
    out = np.empty((len(idx), lf.height, lf.width, 3), dtype=np.float32)
    for i, (u, v) in enumerate(idx):
        dy, dx = view_shift((u, v), center, focus.pixels)
        out[i] = shift_image(lf.views[u, v], -dy, -dx)
    return out


def make_training_example(
    scene: LayeredScene,
    focus: FocusParameter,
    input_mask: ApertureMask,
    noise_sigma: float,
    rng: np.random.Generator,
    lf: LightField | None = None,
    target: RefocusedImage | None = None,
) -> tuple[np.ndarray, RefocusedImage]:
    """Noisy pre-shifted input views plus the clean dense ground truth.

    Noise is i.i.d. Gaussian on the inputs only, clamped back to [0, 1];
    the target never sees it. Cached renders can be passed in.
    """
    if noise_sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if lf is None:
        lf = render_lightfield(scene, input_mask.grid_rows, input_mask.grid_cols)
    inputs = shifted_input_views(lf, input_mask, focus)
    if noise_sigma > 0:
        inputs = inputs + rng.normal(0.0, noise_sigma, size=inputs.shape).astype(np.float32)
        np.clip(inputs, 0.0, 1.0, out=inputs)
    if target is None:
        target = ground_truth_refocus(scene, focus, lf=lf)
    return inputs, target


def stack_views_to_channels(views: np.ndarray) -> np.ndarray:
    """(n, H, W, 3) view stack -> (3n, H, W) with channel 3i+c = view i color c."""
    n, h, w, _ = views.shape
    return views.transpose(0, 3, 1, 2).reshape(n * 3, h, w)


def sample_patches(
    example: tuple[np.ndarray, RefocusedImage],
    patch_size: int,
    count: int,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Aligned (input, target) patch pairs at uniform random positions.

    Input patches are (3*n_views, P, P), targets (3, P, P). Positions are
    drawn in target coordinates, so input windows sit crop_margin pixels
    further in and never touch the replicated border band.
    """
    inputs, target = example
    m = target.crop_margin
    th, tw = target.image.shape[:2]
    if th < patch_size or tw < patch_size:
        raise ValueError(
            f"target {th}x{tw} smaller than patch size {patch_size}"
        )
    stacked = stack_views_to_channels(inputs)
    tgt = target.image.transpose(2, 0, 1)
    pairs = []
    for _ in range(count):
        y = int(rng.integers(0, th - patch_size + 1))
        x = int(rng.integers(0, tw - patch_size + 1))
        ip = stacked[:, m + y : m + y + patch_size, m + x : m + x + patch_size]
        tp = tgt[:, y : y + patch_size, x : x + patch_size]
        pairs.append((np.ascontiguousarray(ip), np.ascontiguousarray(tp)))
    return pairs


# ===================================================================
# Dataset on disk
# ===================================================================

_SPLIT_CODES = {"train": 1, "val": 2, "test": 3}


def scene_seed_for(master_seed: int, split: str, index: int) -> int:
    """Stable per-scene seed derived from the master seed."""
    ss = np.random.SeedSequence((master_seed, _SPLIT_CODES[split], index))
    return int(ss.generate_state(1)[0])


def generate_dataset(spec: DatasetSpec, seed: int, out_dir: str) -> dict:
    """Materialize the dataset tree and return the manifest.

    Layout: one directory per example with the masked input container,
    the clean refocused target, and example.json; dataset.json at the
    root records the spec and split membership. Regeneration with the
    same seed is byte-identical.
    """
    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    if counts["train"] < 1:
        raise ValueError("need at least one training scene")
    input_mask = input_view_selection(spec.input_config, spec.angular, spec.angular)
    valid = valid_focus_values(spec)
    splits: dict = {name: [] for name in counts}
    os.makedirs(out_dir, exist_ok=True)
    for split, n in counts.items():
        rng = np.random.default_rng(np.random.SeedSequence((seed, _SPLIT_CODES[split], 0xD5)))
        for i in range(n):
            sseed = scene_seed_for(seed, split, i)
            pixels = float(valid[rng.integers(0, len(valid))])
            sigma = float(np.round(rng.uniform(spec.noise_lo, spec.noise_hi), 6))
            name = f"{split}_{i:03d}"
            scene = make_scene(sseed, spec.height, spec.width)
            lf = render_lightfield(scene, spec.angular, spec.angular)
            focus = FocusParameter(pixels)
            target = ground_truth_refocus(scene, focus, lf=lf)
            exdir = os.path.join(out_dir, name)
            save_lightfield(lf, exdir, mask=input_mask)
            save_image(target.image, os.path.join(exdir, f"target_{pixels:+.2f}.png"))
            meta = {"scene_seed": sseed, "focus_pixels": pixels, "noise_sigma": sigma}
            with open(os.path.join(exdir, "example.json"), "w") as f:
                json.dump(meta, f, indent=2, sort_keys=True)
                f.write("\n")
            splits[split].append({"name": name, **meta})
    manifest = {"spec": asdict(spec), "seed": seed, "splits": splits}
    with open(os.path.join(out_dir, "dataset.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_dataset(path: str) -> dict:
    with open(os.path.join(path, "dataset.json")) as f:
        return json.load(f)
