"""Synthetic degradation pipeline: paired (clean, degraded) samples.

Five task families (gaussian noise, rain streaks, haze, gaussian blur,
low light) applied to a procedural clean-image corpus (or user PNGs).
Generators are pure given (spec, index), so the sample stream is
reproducible element-for-element and safe to parallelize.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .autodiff import Tensor

TASKS = ("noise", "rain", "haze", "blur", "lowlight")


# ---------------------------------------------------------------------------
# degradation generators (numpy in / numpy out, values in [0, 1])


def add_gaussian_noise(clean: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Additive i.i.d. gaussian noise; sigma is on the 0-255 scale."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    clean = np.asarray(clean, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = rng.normal(0.0, sigma / 255.0, size=clean.shape)
    return np.clip(clean + n, 0.0, 1.0)


def synth_haze(clean: np.ndarray, t: float, airlight: float) -> np.ndarray:
    """Atmospheric scattering: clean*t + A*(1-t)."""
    if not 0.0 < t <= 1.0:
        raise ValueError(f"transmission t must be in (0,1], got {t}")
    if not 0.0 <= airlight <= 1.0:
        raise ValueError(f"airlight must be in [0,1], got {airlight}")
    clean = np.asarray(clean, dtype=np.float64)
    return np.clip(clean * t + airlight * (1.0 - t), 0.0, 1.0)


def synth_rain(clean: np.ndarray, streak_count: int, angle_deg: float,
               intensity: float, seed) -> np.ndarray:
    """Additive bright line segments, angle measured from vertical."""
    if streak_count < 0:
        raise ValueError(f"streak_count must be >= 0, got {streak_count}")
    if intensity < 0:
        raise ValueError(f"intensity must be >= 0, got {intensity}")
    clean = np.asarray(clean, dtype=np.float64)
    h, w = clean.shape[-2], clean.shape[-1]
    rain = np.zeros((h, w))
    rng = np.random.default_rng(seed)
    theta = math.radians(angle_deg)
    dr, dc = math.cos(theta), math.sin(theta)
    for _ in range(streak_count):
        r = rng.uniform(-0.2 * h, h - 1)
        c = rng.uniform(0, w - 1)
        length = rng.uniform(h / 8, h / 3)
        bright = intensity * rng.uniform(0.5, 1.0)
        for step in np.arange(0.0, length, 0.5):
            ri, ci = int(round(r + step * dr)), int(round(c + step * dc))
            if 0 <= ri < h and 0 <= ci < w:
                rain[ri, ci] = max(rain[ri, ci], bright)
    return np.clip(clean + rain, 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """2-D gaussian kernel normalized to sum 1; radius 3*sigma."""
    radius = max(1, int(math.ceil(3.0 * sigma)))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def synth_blur(clean: np.ndarray, kernel_sigma: float, seed=None) -> np.ndarray:
    """Gaussian blur; seed accepted for generator-signature uniformity."""
    if kernel_sigma < 0:
        raise ValueError(f"kernel_sigma must be >= 0, got {kernel_sigma}")
    clean = np.asarray(clean, dtype=np.float64)
    if kernel_sigma < 1e-8:
        return clean.copy()
    # nearest-edge padding keeps constant images exactly constant
    axes = (clean.ndim - 2, clean.ndim - 1)
    sigmas = [kernel_sigma if ax in axes else 0.0 for ax in range(clean.ndim)]
    out = gaussian_filter(clean, sigma=sigmas, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def synth_lowlight(clean: np.ndarray, gamma: float, scale: float) -> np.ndarray:
    """Dimming: scale * clean**gamma."""
    if gamma < 1.0:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must be in (0,1], got {scale}")
    clean = np.asarray(clean, dtype=np.float64)
    return np.clip(scale * np.power(clean, gamma), 0.0, 1.0)


# ---------------------------------------------------------------------------
# pairs, cropping, augmentation


@dataclass
class ImagePair:
    clean: Tensor       # [1,3,H,W] in [0,1]
    degraded: Tensor    # [1,3,H,W] in [0,1]
    task_label: str     # diagnostic only, never fed to the model

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise ValueError(
                f"pair shape mismatch: {self.clean.shape} vs {self.degraded.shape}")
        if self.task_label not in TASKS:
            raise ValueError(f"unknown task {self.task_label!r}")


def _to_image_tensor(arr: np.ndarray, dtype) -> Tensor:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(np.clip(arr, 0.0, 1.0).astype(dtype), requires_grad=False)


def random_crop_flip(pair: ImagePair, crop: int, seed, flip: bool = True) -> ImagePair:
    """Same crop window and flips applied to both members of the pair."""
    _, _, h, w = pair.clean.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} exceeds image size {h}x{w}")
    rng = np.random.default_rng(seed)
    r = int(rng.integers(0, h - crop + 1))
    c = int(rng.integers(0, w - crop + 1))
    out = [t.data[:, :, r:r + crop, c:c + crop] for t in (pair.clean, pair.degraded)]
    if flip:
        fh, fv = rng.random() < 0.5, rng.random() < 0.5  # one draw for both members
        if fh:
            out = [a[:, :, :, ::-1] for a in out]
        if fv:
            out = [a[:, :, ::-1, :] for a in out]
    dtype = pair.clean.dtype
    return ImagePair(
        clean=Tensor(np.ascontiguousarray(out[0], dtype=dtype), requires_grad=False),
        degraded=Tensor(np.ascontiguousarray(out[1], dtype=dtype), requires_grad=False),
        task_label=pair.task_label)


# ---------------------------------------------------------------------------
# PNG I/O


def load_image(path) -> Tensor:
    """8-bit PNG (or any PIL-readable file) -> [1,3,H,W] in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None], requires_grad=False)


def save_image(img, path) -> None:
    arr = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {arr.shape}")
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0)).save(path, format="PNG")


# ---------------------------------------------------------------------------
# procedural clean corpus and the sample stream


def make_clean_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural (3, size, size) image: checkers, gradients, blobs, shapes,
    overlaid with band-limited grain so every image carries fine detail the
    way photographs do. Restoration is ill-posed on piecewise-flat content.
    """
    kind = int(rng.integers(4))
    col = lambda: rng.uniform(0.0, 1.0, size=(3, 1, 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    if kind == 0:
        cell = int(rng.integers(3, max(4, size // 4)))
        mask = ((np.arange(size)[:, None] // cell + np.arange(size)[None, :] // cell) % 2)
        img = col() * mask + col() * (1 - mask)
    elif kind == 1:
        a, b = rng.uniform(-1, 1, size=2)
        ramp = a * yy + b * xx
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        img = col() * ramp + col() * (1 - ramp)
    elif kind == 2:
        img = rng.uniform(0, 1, size=(3, size, size))
        img = gaussian_filter(img, sigma=(0, rng.uniform(1, 4), rng.uniform(1, 4)))
        lo, hi = img.min(), img.max()
        img = (img - lo) / max(hi - lo, 1e-9)
    else:
        img = np.broadcast_to(col(), (3, size, size)).copy()
        for _ in range(int(rng.integers(3, 8))):
            cy, cx = rng.uniform(0, 1, size=2)
            rad = rng.uniform(0.05, 0.3)
            if rng.random() < 0.5:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2
            else:
                mask = (np.abs(yy - cy) < rad) & (np.abs(xx - cx) < rad)
            img = np.where(mask, col(), img)
    grain = rng.uniform(0, 1, size=(3, size, size))
    g_sig = rng.uniform(0.4, 1.0)
    grain = gaussian_filter(grain, sigma=(0, g_sig, g_sig))
    lo, hi = grain.min(), grain.max()
    grain = (grain - lo) / max(hi - lo, 1e-9)
    amp = rng.uniform(0.15, 0.35)
    return np.clip((1.0 - amp) * img + amp * grain, 0.0, 1.0)


@dataclass(frozen=True)
class DatasetSpec:
    tasks: tuple = TASKS
    source: str = "procedural"   # directory of PNGs, or the procedural corpus
    image_size: int = 64
    crop: int = 64
    seed: int = 0
    corpus_size: int = 0         # >0: cycle a fixed corpus of that many images
    augment: bool = True         # random flips
    noise_sigmas: tuple = (5.0, 25.0, 50.0)
    rain_streaks: int = 40
    rain_angle: float = 15.0     # degrees from vertical, jittered per sample
    rain_intensity: float = 0.35
    haze_t: tuple = (0.4, 0.8)
    haze_airlight: tuple = (0.8, 1.0)
    blur_sigma: tuple = (1.0, 2.5)
    lowlight_gamma: tuple = (1.8, 3.0)
    lowlight_scale: tuple = (0.25, 0.55)

    def __post_init__(self):
        if self.crop > self.image_size and self.source == "procedural":
            raise ValueError(
                f"crop {self.crop} exceeds image size {self.image_size}")
        if not self.tasks:
            raise ValueError("dataset needs at least one task")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")


def degrade_with_task(clean: np.ndarray, task: str, spec: DatasetSpec,
                      rng: np.random.Generator) -> np.ndarray:
    if task == "noise":
        sigma = float(spec.noise_sigmas[rng.integers(len(spec.noise_sigmas))])
        return add_gaussian_noise(clean, sigma, rng)
    if task == "haze":
        t = rng.uniform(*spec.haze_t)
        return synth_haze(clean, t, rng.uniform(*spec.haze_airlight))
    if task == "rain":
        angle = spec.rain_angle + rng.uniform(-10.0, 10.0)
        return synth_rain(clean, spec.rain_streaks, angle, spec.rain_intensity, rng)
    if task == "blur":
        return synth_blur(clean, rng.uniform(*spec.blur_sigma))
    if task == "lowlight":
        gamma = rng.uniform(*spec.lowlight_gamma)
        return synth_lowlight(clean, gamma, rng.uniform(*spec.lowlight_scale))
    raise ValueError(f"unknown task {task!r}")


def _clean_source(spec: DatasetSpec, index: int, rng: np.random.Generator) -> np.ndarray:
    if spec.source == "procedural":
        return make_clean_image(rng, spec.image_size)
    paths = sorted(Path(spec.source).glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no .png files under {spec.source}")
    return load_image(paths[index % len(paths)]).data[0].astype(np.float64)


def sample_pair(spec: DatasetSpec, index: int, dtype=np.float32) -> ImagePair:
    """Deterministic sample i of the stream. Content is keyed by the corpus
    index (so a fixed corpus repeats exactly); augmentation is keyed by the
    stream index."""
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")
    content_idx = index % spec.corpus_size if spec.corpus_size > 0 else index
    rng = np.random.default_rng((spec.seed, 0, content_idx))
    clean = _clean_source(spec, content_idx, rng)
    task = spec.tasks[rng.integers(len(spec.tasks))]
    degraded = degrade_with_task(clean, task, spec, rng)
    pair = ImagePair(clean=_to_image_tensor(clean, dtype),
                     degraded=_to_image_tensor(degraded, dtype),
                     task_label=task)
    h = pair.clean.shape[2]
    if spec.crop < h or spec.augment:
        pair = random_crop_flip(pair, min(spec.crop, h), (spec.seed, 1, index),
                                flip=spec.augment)
    return pair
