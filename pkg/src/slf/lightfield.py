"""Light field representation and the classical shift-and-average refocuser.

A light field is stored as a 4D stack of sub-aperture views indexed by
angular position (u, v), each view an RGB image with values in [0, 1].
Refocusing translates every selected view proportionally to its angular
offset from the grid center and averages the results.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

VIEW_PATTERN = "view_{u:02d}_{v:02d}.png"

VIEW_CONFIGS = ("two_horizontal", "four_rect", "four_rhombus", "eight")


class FocusDomainError(ValueError):
    """Raised when the focus parameter has no valid alpha (pixels == 1)."""


# ===================================================================
# Domain types
# ===================================================================


@dataclass(frozen=True)
class FocusParameter:
    """Refocus shift in sensor pixels per unit angular step.

    ``alpha`` is the derived focal-plane scale factor 1 / (1 - pixels).
    """

    pixels: float
    alpha: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "alpha", pixels_to_alpha(self.pixels))


@dataclass(frozen=True)
class ApertureMask:
    """Boolean selection over a grid_rows x grid_cols angular grid."""

    grid_rows: int
    grid_cols: int
    selected: np.ndarray

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=bool)
        if sel.shape != (self.grid_rows, self.grid_cols):
            raise ValueError(
                f"mask shape {sel.shape} does not match grid "
                f"({self.grid_rows}, {self.grid_cols})"
            )
        if not sel.any():
            raise ValueError("aperture mask selects no views")
        object.__setattr__(self, "selected", sel)

    @property
    def count(self) -> int:
        return int(self.selected.sum())

    def indices(self) -> list[tuple[int, int]]:
        """Selected (u, v) pairs in row-major order."""
        us, vs = np.nonzero(self.selected)
        return list(zip(us.tolist(), vs.tolist()))


@dataclass(frozen=True)
class LightField:
    """4D sub-aperture view stack, indexed (u, v, y, x) with RGB triples."""

    views: np.ndarray
    grid_rows: int
    grid_cols: int
    height: int
    width: int

    def __post_init__(self):
        v = np.asarray(self.views)
        expect = (self.grid_rows, self.grid_cols, self.height, self.width, 3)
        if v.shape != expect:
            raise ValueError(f"views shape {v.shape}, expected {expect}")
        if min(self.grid_rows, self.grid_cols, self.height, self.width) < 1:
            raise ValueError("degenerate light field dimensions")
        lo, hi = float(v.min()), float(v.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values outside [0, 1]: min {lo}, max {hi}")
        object.__setattr__(self, "views", v)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.grid_rows - 1) / 2, (self.grid_cols - 1) / 2)

    @classmethod
    def from_views(cls, views: np.ndarray) -> "LightField":
        u, v, h, w, _ = views.shape
        return cls(views=views, grid_rows=u, grid_cols=v, height=h, width=w)


@dataclass(frozen=True)
class RefocusedImage:
    """Result of refocusing: cropped RGB image plus the parameters used."""

    pixels_param: FocusParameter
    image: np.ndarray
    crop_margin: int


# ===================================================================
# Focus algebra and shifting
# ===================================================================


def pixels_to_alpha(pixels: float) -> float:
    """Convert the per-step shift to the focal-plane scale alpha = 1/(1-pixels).

    Raises:
        FocusDomainError: if pixels == 1 (focal plane at infinity).
    """
    if pixels == 1:
        raise FocusDomainError("pixels == 1 puts the focal plane at infinity")
    return 1.0 / (1.0 - pixels)


def view_shift(
    view_index: tuple[int, int], center: tuple[float, float], pixels: float
) -> tuple[float, float]:
    """Per-view displacement (dy, dx) = pixels * (u - u_c, v - v_c)."""
    u, v = view_index
    u_c, v_c = center
    return (pixels * (u - u_c), pixels * (v - v_c))


def _shift_axis(img: np.ndarray, delta: float, axis: int) -> np.ndarray:
    """Translate along one axis by delta with linear interpolation.

    Out-of-range samples clamp to the nearest edge (edge replication).
    """
    n = img.shape[axis]
    pos = np.arange(n, dtype=np.float64) - delta
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    lo = np.take(img, np.clip(i0, 0, n - 1), axis=axis)
    if not frac.any():
        return lo
    hi = np.take(img, np.clip(i0 + 1, 0, n - 1), axis=axis)
    shape = [1] * img.ndim
    shape[axis] = n
    frac = frac.reshape(shape).astype(img.dtype, copy=False)
    return lo + (hi - lo) * frac

def shift_image(image: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Translate an image by (dy, dx) pixels with bilinear interpolation.

    Positive dy moves content down, positive dx moves it right. Samples
    falling outside the source are filled by edge replication. Integer
    offsets reproduce exact pixel relocation. Translation is separable,
    so the bilinear resample is applied one axis at a time.
    """
    if image.size == 0:
        raise ValueError("empty image")
    out = image
    if dy != 0:
        out = _shift_axis(out, dy, 0)
    if dx != 0:
        out = _shift_axis(out, dx, 1)
    return out if out is not image else image.copy()


# ===================================================================
# Refocusing
# ===================================================================


def crop_image(image: np.ndarray, margin: int) -> np.ndarray:
    """Remove margin pixels from each side of the first two axes."""
    if margin == 0:
        return image
    if margin < 0 or 2 * margin >= min(image.shape[0], image.shape[1]):
        raise ValueError(f"crop margin {margin} too large for {image.shape}")
    return image[margin:-margin, margin:-margin]


def refocus_shift_average(
    lf: LightField,
    mask: ApertureMask,
    focus: FocusParameter,
    crop_margin: int = 6,
) -> RefocusedImage:
    """Classical digital refocus: shift each selected view, then average.

    Each selected view (u, v) is resampled at (y + dy, x + dx) with
    (dy, dx) = view_shift((u, v), center, pixels), i.e. translated by
    (-dy, -dx), then all shifted views are averaged with equal weights
    and crop_margin pixels are removed from each side.

    Accumulation runs in float64 over views in row-major (u, v) order,
    so results are independent of any view-level parallelism.
    """
    if (mask.grid_rows, mask.grid_cols) != (lf.grid_rows, lf.grid_cols):
        raise ValueError("mask dimensions do not match light field grid")
    center = lf.center
    acc = np.zeros((lf.height, lf.width, 3), dtype=np.float64)
    indices = mask.indices()
    for u, v in indices:
        dy, dx = view_shift((u, v), center, focus.pixels)
        acc += shift_image(lf.views[u, v].astype(np.float64, copy=False), -dy, -dx)
    acc /= len(indices)
    np.clip(acc, 0.0, 1.0, out=acc)
    return RefocusedImage(
        pixels_param=focus, image=crop_image(acc, crop_margin), crop_margin=crop_margin
    )


# ===================================================================
# Aperture masks
# ===================================================================


def circular_mask(grid_rows: int, grid_cols: int) -> ApertureMask:
    """The 241-view circular aperture on the 17x17 grid.

    Selects all (u, v) with (u-8)^2 + (v-8)^2 <= r^2 for the smallest r
    reaching at least 241 views; if that disc overshoots, cells are
    dropped from the largest radius inward, preferring larger |u-8|,
    then larger |v-8|, then larger (u, v). On the 17x17 grid the disc
    at r^2 = 74 lands on exactly 241, so no trimming occurs.
    """
    if (grid_rows, grid_cols) != (17, 17):
        raise ValueError("circular mask is defined for the 17x17 grid only")
    cu = cv = 8
    uu, vv = np.meshgrid(np.arange(17), np.arange(17), indexing="ij")
    r2 = (uu - cu) ** 2 + (vv - cv) ** 2
    radii = np.unique(r2)
    counts = np.array([(r2 <= r).sum() for r in radii])
    k = int(np.searchsorted(counts, 241))
    sel = r2 <= radii[k]
    excess = int(sel.sum()) - 241
    if excess > 0:
        ring = [
            (r2[u, v], abs(u - cu), abs(v - cv), u, v)
            for u, v in zip(*np.nonzero(r2 == radii[k]))
        ]
        ring.sort(reverse=True)
        for _, _, _, u, v in ring[:excess]:
            sel[u, v] = False
    return ApertureMask(grid_rows=17, grid_cols=17, selected=sel)


def dense_mask(grid_rows: int, grid_cols: int) -> ApertureMask:
    """Mask selecting every view on the grid."""
    return ApertureMask(
        grid_rows, grid_cols, np.ones((grid_rows, grid_cols), dtype=bool)
    )


def input_view_selection(
    config: str, grid_rows: int, grid_cols: int, radius: int = 2
) -> ApertureMask:
    """Sparse input-view patterns around the grid center.

    four_rhombus places views at the midpoints of the four half-axes
    (up/down/left/right at the given radius), four_rect at the corners
    of the axis-aligned square of the same radius, eight is their
    union, and two_horizontal is the left/right pair.
    """
    if config not in VIEW_CONFIGS:
        raise ValueError(f"unknown view config {config!r}, expected one of {VIEW_CONFIGS}")
    if grid_rows % 2 == 0 or grid_cols % 2 == 0:
        raise ValueError("input view patterns need an odd grid with an integer center")
    cu, cv = (grid_rows - 1) // 2, (grid_cols - 1) // 2
    r = int(radius)
    if r < 1 or cu - r < 0 or cv - r < 0 or cu + r >= grid_rows or cv + r >= grid_cols:
        raise ValueError(f"pattern radius {r} exceeds grid {grid_rows}x{grid_cols}")
    rhombus = [(cu - r, cv), (cu, cv - r), (cu, cv + r), (cu + r, cv)]
    rect = [(cu - r, cv - r), (cu - r, cv + r), (cu + r, cv - r), (cu + r, cv + r)]
    chosen = {
        "two_horizontal": [(cu, cv - r), (cu, cv + r)],
        "four_rhombus": rhombus,
        "four_rect": rect,
        "eight": rhombus + rect,
    }[config]
    sel = np.zeros((grid_rows, grid_cols), dtype=bool)
    for u, v in chosen:
        sel[u, v] = True
    return ApertureMask(grid_rows, grid_cols, sel)


# ===================================================================
# Container I/O
# ===================================================================


def _to_uint8(image: np.ndarray) -> np.ndarray:
    # round half-up, not banker's rounding, so saving is reproducible
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(image: np.ndarray, path: str) -> None:
    """Write an RGB [0,1] array as an 8-bit non-interlaced PNG."""
    Image.fromarray(_to_uint8(image), mode="RGB").save(path, format="PNG")


def load_image(path: str) -> np.ndarray:
    """Read an 8-bit PNG back to float32 RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_lightfield(lf: LightField, path: str, mask: ApertureMask | None = None) -> None:
    """Write a light field container: manifest.json plus one PNG per view.

    With a mask, only the selected views are written (sparse container).
    """
    os.makedirs(path, exist_ok=True)
    manifest = {
        "grid_rows": lf.grid_rows,
        "grid_cols": lf.grid_cols,
        "height": lf.height,
        "width": lf.width,
        "color_space": "srgb8",
        "view_pattern": "view_{u:02}_{v:02}.png",
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for u in range(lf.grid_rows):
        for v in range(lf.grid_cols):
            if mask is not None and not mask.selected[u, v]:
                continue
            save_image(lf.views[u, v], os.path.join(path, VIEW_PATTERN.format(u=u, v=v)))


def load_lightfield(path: str) -> tuple[LightField, ApertureMask]:
    """Read a light field container; absent views come back zero-filled.

    Returns the light field and the mask of views actually present.
    """
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    rows, cols = manifest["grid_rows"], manifest["grid_cols"]
    h, w = manifest["height"], manifest["width"]
    views = np.zeros((rows, cols, h, w, 3), dtype=np.float32)
    present = np.zeros((rows, cols), dtype=bool)
    for u in range(rows):
        for v in range(cols):
            p = os.path.join(path, VIEW_PATTERN.format(u=u, v=v))
            if os.path.exists(p):
                img = load_image(p)
                if img.shape != (h, w, 3):
                    raise ValueError(f"view {u},{v} has shape {img.shape}, manifest says {(h, w)}")
                views[u, v] = img
                present[u, v] = True
    if not present.any():
        raise ValueError(f"no views found in container {path}")
    lf = LightField(views=views, grid_rows=rows, grid_cols=cols, height=h, width=w)
    return lf, ApertureMask(rows, cols, present)
