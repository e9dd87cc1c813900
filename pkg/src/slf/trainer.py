"""Training and evaluation loops at configurable scale.

Batches are drawn on the fly: pick a training scene, a focus stop, a
noise level, then cut aligned patches from the pre-shifted input views
and the clean dense ground truth. Scene renders and per-focus targets
are cached, so after the first epoch batch assembly is just gather,
noise, and crop.

The RNG is split into named streams (init, scene, focus, sigma, noise,
patch) derived from one master seed, so the sampled sequence does not
depend on how batch assembly is scheduled.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .lightfield import (
    ApertureMask,
    FocusParameter,
    LightField,
    crop_image,
    input_view_selection,
)
from .metrics import psnr, ssim
from .nn import AdamState, adam_step, load_checkpoint, save_checkpoint
from .refocusnet import (
    NetworkConfig,
    RefocusNetModel,
    build,
    forward_pass,
    loss_and_grads,
)
from .synth import (
    DatasetSpec,
    ground_truth_refocus,
    make_scene,
    render_lightfield,
    shifted_input_views,
    valid_focus_values,
)

CROP = 6
_COL_CACHE_LIMIT = 1_200_000_000  # bytes of im2col buffers worth keeping


@dataclass
class TrainConfig:
    """Schedule and sampling knobs; defaults follow the full recipe."""

    epochs: int = 300
    batch_size: int = 32
    patches_per_epoch: int = 9600
    patch_size: int = 100
    noise_lo: float = 0.0
    noise_hi: float = 0.08
    seed: int = 0
    eval_every: int = 1
    checkpoint_dir: str = "checkpoints"
    examples_per_batch: int = 4
    lr_initial: float = 0.0005
    lr_decay_rate: float = 0.9
    lr_decay_epochs: int = 10

    def __post_init__(self):
        if self.patches_per_epoch % self.batch_size != 0:
            raise ValueError("patches_per_epoch must be divisible by batch_size")
        if self.batch_size % self.examples_per_batch != 0:
            raise ValueError("batch_size must be divisible by examples_per_batch")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Reduced profile sized for a laptop CPU run."""
        base = dict(epochs=30, patches_per_epoch=960, patch_size=48)
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainResult:
    model: RefocusNetModel
    checkpoint_path: str
    log_path: str
    best_val_psnr: float
    history: list = field(default_factory=list)
    train_seconds: float = 0.0


@dataclass
class EvalRow:
    sigma: float
    psnr: float
    ssim: float
    seconds: float
    psnr_classical4: float
    ssim_classical4: float


# ===================================================================
# Scene cache
# ===================================================================


class SceneCache:
    """Renders scenes lazily and caches light fields, targets, inputs."""

    def __init__(self, spec: DatasetSpec, input_mask: ApertureMask, rescale: float = 1.0):
        self.spec = spec
        self.mask = input_mask
        self.rescale = rescale
        self._lf: dict[int, LightField] = {}
        self._gt: dict[tuple, np.ndarray] = {}
        self._inputs: dict[tuple, np.ndarray] = {}

    def lightfield(self, seed: int) -> LightField:
        if seed not in self._lf:
            scene = make_scene(seed, self.spec.height, self.spec.width)
            lf = render_lightfield(scene, self.spec.angular, self.spec.angular)
            if self.rescale != 1.0:
                lf = _rescale_lightfield(lf, self.rescale)
            self._lf[seed] = lf
        return self._lf[seed]

    def ground_truth(self, seed: int, pixels: float) -> np.ndarray:
        key = (seed, round(pixels, 9))
        if key not in self._gt:
            lf = self.lightfield(seed)
            gt = ground_truth_refocus(None, FocusParameter(pixels), lf=lf)
            self._gt[key] = gt.image.astype(np.float32)
        return self._gt[key]

    def inputs(self, seed: int, pixels: float) -> np.ndarray:
        """Clean pre-shifted views, stacked channels-last (H, W, 3n)."""
        key = (seed, round(pixels, 9))
        if key not in self._inputs:
            lf = self.lightfield(seed)
            views = shifted_input_views(lf, self.mask, FocusParameter(pixels))
            self._inputs[key] = np.ascontiguousarray(
                np.concatenate(list(views), axis=-1)
            )
        return self._inputs[key]


def _rescale_lightfield(lf: LightField, s: float) -> LightField:
    from .lightfield import resize_image

    nh = max(16, int(round(lf.height * s)))
    nw = max(16, int(round(lf.width * s)))
    views = np.empty((lf.grid_rows, lf.grid_cols, nh, nw, 3), dtype=np.float32)
    for u in range(lf.grid_rows):
        for v in range(lf.grid_cols):
            views[u, v] = resize_image(lf.views[u, v], nh, nw)
    return LightField.from_views(views)


# ===================================================================
# Training
# ===================================================================


def _streams(seed: int) -> dict:
    names = ("init", "scene", "focus", "sigma", "noise", "patch", "eval")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(ss) for n, ss in zip(names, children)}


def _noisy(inputs: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma <= 0:
        return inputs
    out = inputs + rng.normal(0.0, sigma, size=inputs.shape).astype(np.float32)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def _assemble_batch(cache, scenes, foci, config, rngs, keep_positions=None):
    """One (x, target) channels-last batch drawn per the sampling contract."""
    per_example = config.batch_size // config.examples_per_batch
    p = config.patch_size
    xs, ts = [], []
    for _ in range(config.examples_per_batch):
        seed = scenes[int(rngs["scene"].integers(len(scenes)))]
        pixels = float(foci[int(rngs["focus"].integers(len(foci)))])
        sigma = float(rngs["sigma"].uniform(config.noise_lo, config.noise_hi))
        inputs = _noisy(cache.inputs(seed, pixels), sigma, rngs["noise"])
        target = cache.ground_truth(seed, pixels)
        th, tw = target.shape[:2]
        if th < p or tw < p:
            raise ValueError(f"patch size {p} exceeds target {th}x{tw}")
        for _ in range(per_example):
            y = int(rngs["patch"].integers(0, th - p + 1))
            x = int(rngs["patch"].integers(0, tw - p + 1))
            xs.append(inputs[CROP + y : CROP + y + p, CROP + x : CROP + x + p])
            ts.append(target[y : y + p, x : x + p])
    return np.stack(xs), np.stack(ts)


def _validate(model_arrays, net_config, cache, entries):
    """Mean PSNR/SSIM at sigma = 0 over the validation examples."""
    ps, ss_ = [], []
    for e in entries:
        x = cache.inputs(e["scene_seed"], e["focus_pixels"])[None]
        y, _ = forward_pass(net_config, model_arrays, x, keep_ctx=False)
        pred = np.clip(crop_image(y[0], CROP), 0.0, 1.0)
        gt = cache.ground_truth(e["scene_seed"], e["focus_pixels"])
        ps.append(psnr(pred, gt))
        ss_.append(ssim(pred, gt))
    return float(np.mean(ps)), float(np.mean(ss_))


def train(dataset: dict, config: TrainConfig, net_config: NetworkConfig) -> TrainResult:
    """Run the training loop; returns the best-validation model.

    Writes best.ckpt, model.json, and metrics.jsonl into
    config.checkpoint_dir. Fully reproducible from config.seed.
    """
    spec = DatasetSpec(**dataset["spec"])
    train_entries = dataset["splits"]["train"]
    val_entries = dataset["splits"]["val"] or train_entries
    if not train_entries:
        raise ValueError("empty training split")
    scenes = [e["scene_seed"] for e in train_entries]
    mask = input_view_selection(net_config.input_config, spec.angular, spec.angular)
    foci = valid_focus_values(spec)
    cache = SceneCache(spec, mask)
    rngs = _streams(config.seed)

    model = build(net_config, rngs["init"])
    arrays = model.param_arrays()
    steps_per_epoch = config.patches_per_epoch // config.batch_size
    adam = AdamState.for_params(
        arrays,
        lr_initial=config.lr_initial,
        decay_rate=config.lr_decay_rate,
        decay_steps=max(1, steps_per_epoch * config.lr_decay_epochs),
    )
    col_bytes = (
        4 * config.batch_size * config.patch_size**2 * 9 * net_config.width
        * net_config.depth
    )
    keep_cols = col_bytes < _COL_CACHE_LIMIT

    os.makedirs(config.checkpoint_dir, exist_ok=True)
    ckpt_path = os.path.join(config.checkpoint_dir, "best.ckpt")
    log_path = os.path.join(config.checkpoint_dir, "metrics.jsonl")
    with open(os.path.join(config.checkpoint_dir, "model.json"), "w") as f:
        json.dump(net_config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")

    best = -np.inf
    history = []
    step = 0
    t0 = time.perf_counter()
    with open(log_path, "w") as log:
        for epoch in range(1, config.epochs + 1):
            losses = []
            for _ in range(steps_per_epoch):
                x, t = _assemble_batch(cache, scenes, foci, config, rngs)
                loss, grads, _ = loss_and_grads(
                    net_config, arrays, x, t, keep_cols=keep_cols
                )
                adam_step(arrays, grads, adam)
                losses.append(loss)
                step += 1
            record = {
                "epoch": epoch,
                "step": step,
                "train_l1": float(np.mean(losses)),
                "val_psnr": None,
                "val_ssim": None,
                "lr": adam.learning_rate(),
            }
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                vp, vs = _validate(arrays, net_config, cache, val_entries)
                record["val_psnr"] = vp
                record["val_ssim"] = vs
                if vp > best:
                    best = vp
                    save_checkpoint(ckpt_path, net_config.to_dict(), arrays)
            log.write(json.dumps(record) + "\n")
            history.append(record)
    elapsed = time.perf_counter() - t0
    config_dict, best_arrays, _ = load_checkpoint(ckpt_path)
    model.set_params(best_arrays)
    return TrainResult(
        model=model,
        checkpoint_path=ckpt_path,
        log_path=log_path,
        best_val_psnr=float(best),
        history=history,
        train_seconds=elapsed,
    )


# ===================================================================
# Evaluation
# ===================================================================


def load_model(checkpoint_path: str) -> RefocusNetModel:
    config_dict, arrays, _ = load_checkpoint(checkpoint_path)
    net_config = NetworkConfig.from_dict(config_dict)
    model = build(net_config, np.random.default_rng(0))
    model.set_params(arrays)
    return model


def evaluate(
    model: RefocusNetModel,
    dataset: dict,
    focus_list: list[float],
    noise_sigmas: list[float],
    split: str = "test",
    rescale: float = 1.0,
    seed: int = 0,
) -> list[EvalRow]:
    """Full-image metrics per noise level, against clean dense ground truth.

    Every (sigma, scene, focus) triple gets its own derived RNG, so
    results do not depend on evaluation order. The classical4 columns
    score the plain average of the same noisy input views - the
    traditional shift-and-average refocuser on the sparse views.
    """
    spec = DatasetSpec(**dataset["spec"])
    entries = dataset["splits"][split]
    if not entries:
        raise ValueError(f"empty split {split!r}")
    cfg = model.config
    mask = input_view_selection(cfg.input_config, spec.angular, spec.angular)
    cache = SceneCache(spec, mask, rescale=rescale)
    arrays = model.param_arrays()
    rows = []
    for si, sigma in enumerate(noise_sigmas):
        ps, ss_, base_ps, base_ss, secs = [], [], [], [], []
        for ei, e in enumerate(entries):
            for fi, pixels in enumerate(focus_list):
                rng = np.random.default_rng(
                    np.random.SeedSequence((seed, si, ei, fi))
                )
                clean = cache.inputs(e["scene_seed"], pixels)
                noisy = _noisy(clean, sigma, rng)
                t0 = time.perf_counter()
                y, _ = forward_pass(cfg, arrays, noisy[None], keep_ctx=False)
                secs.append(time.perf_counter() - t0)
                pred = np.clip(crop_image(y[0], CROP), 0.0, 1.0)
                gt = cache.ground_truth(e["scene_seed"], pixels)
                ps.append(psnr(pred, gt))
                ss_.append(ssim(pred, gt))
                h, w, _c = noisy.shape
                views = noisy.reshape(h, w, cfg.n_views, 3)
                naive = crop_image(views.mean(axis=2), CROP)
                base_ps.append(psnr(naive, gt))
                base_ss.append(ssim(naive, gt))
        rows.append(
            EvalRow(
                sigma=float(sigma),
                psnr=float(np.mean(ps)),
                ssim=float(np.mean(ss_)),
                seconds=float(np.mean(secs)),
                psnr_classical4=float(np.mean(base_ps)),
                ssim_classical4=float(np.mean(base_ss)),
            )
        )
    return rows
