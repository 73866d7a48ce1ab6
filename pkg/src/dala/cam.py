"""Gradient-weighted class activation maps and the dynamic-threshold
pipeline built on top of them.

The base map weights each feature channel by the spatial mean of the
class-score gradient over that channel, sums, rectifies, and min-max
normalizes.  The dynamic-threshold variant averages such maps over
Gaussian-noised copies of the input with linearly decreasing weights,
picks a threshold by maximizing between-class variance over a 256-bin
histogram, keeps only values strictly above it, and cleans the surviving
support with a binary opening.

Resolution: the pipeline runs at feature-map resolution by default, which
makes the degenerate configuration (one member, zero noise, threshold and
morphology off) bitwise identical to the base map.  Passing
``upsample_to`` moves everything after the weighted average to the target
resolution, which is where thresholding and morphology belong when the
result will be compared against image-resolution masks.

Normalization rule used everywhere: an all-zero map stays all-zero; a
constant positive map becomes all-ones; anything else is (v-min)/(max-min).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import functional as F
from . import imageops
from .exceptions import ConfigurationError, InputError, UsageError
from .tensor import Tensor

__all__ = [
    "CamMap",
    "DtGradCamConfig",
    "DtGradCamResult",
    "noisy_inputs",
    "gradcam",
    "weight_schedule",
    "weighted_average",
    "otsu_threshold",
    "apply_threshold",
    "morphological_open",
    "upsample_bilinear",
    "dt_gradcam",
    "dt_gradcam_detailed",
    "render_heatmap",
    "cam_to_csv",
    "save_cam_csv",
    "load_cam_csv",
]


class CamMap:
    """A 2-D heatmap with values in [0,1]; support is strict positivity."""

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        values = np.asarray(values)
        if values.ndim != 2:
            raise InputError(f"heatmap must be 2-D, got shape {values.shape}")
        if values.size == 0:
            raise InputError("heatmap must be non-empty")
        if not np.all(np.isfinite(values)):
            raise InputError("heatmap contains non-finite values")
        if float(values.min()) < 0.0 or float(values.max()) > 1.0:
            raise InputError("heatmap values must lie in [0, 1]")
        self.values = values

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def support(self) -> np.ndarray:
        return self.values > 0

    def __repr__(self) -> str:
        return f"CamMap({self.width}x{self.height}, support={int(self.support.sum())})"


@dataclass(frozen=True)
class DtGradCamConfig:
    """Knobs of the dynamic-threshold pipeline."""

    ensemble_size: int = 10
    sigma: float = 0.1
    w_start: float = 1.0
    w_end: float = 0.5
    otsu_enabled: bool = True
    morphology_enabled: bool = True
    morph_kernel: int = 3
    seed: int = 0
    renormalize_average: bool = True
    otsu_bins: int = 256

    def validate(self) -> "DtGradCamConfig":
        if self.ensemble_size < 1:
            raise ConfigurationError("ensemble size must be >= 1")
        if self.sigma < 0:
            raise ConfigurationError("noise level sigma must be >= 0")
        if not self.w_start >= self.w_end > 0:
            raise ConfigurationError("weights must satisfy w_start >= w_end > 0")
        if self.morph_kernel < 1 or self.morph_kernel % 2 == 0:
            raise ConfigurationError("morphology kernel must be odd and >= 1")
        if self.otsu_bins < 2:
            raise ConfigurationError("otsu needs at least 2 histogram bins")
        return self


@dataclass
class DtGradCamResult:
    """Every intermediate of one dynamic-threshold run."""

    members: list[CamMap]
    weights: np.ndarray
    averaged: CamMap
    threshold: Optional[float]
    thresholded: CamMap
    final: CamMap


def _normalize(raw: np.ndarray) -> np.ndarray:
    lo = raw.min()
    hi = raw.max()
    if hi > lo:
        return (raw - lo) / (hi - lo)
    if hi > 0:
        return np.ones_like(raw)
    return np.zeros_like(raw)


@contextmanager
def _params_frozen(model):
    """Suspend gradient tracking for model parameters so CAM backward
    passes neither populate nor disturb their grad buffers."""
    params = model.parameters() if hasattr(model, "parameters") else []
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad = flag


def _as_single_image_batch(x: Tensor) -> Tensor:
    if x.ndim == 3:
        data = x.data[None]
    elif x.ndim == 4 and x.shape[0] == 1:
        data = x.data
    else:
        raise UsageError(f"expected one [3,H,W] image (or batch of 1), got {tuple(x.shape)}")
    return Tensor(data)


def noisy_inputs(x: Tensor, config: DtGradCamConfig) -> list[Tensor]:
    """N copies of x with i.i.d. Gaussian noise of scale sigma; member i
    draws from its own seed stream so members are order-independent."""
    config.validate()
    if config.sigma == 0.0:
        return [Tensor(x.data.copy()) for _ in range(config.ensemble_size)]
    out = []
    for i in range(config.ensemble_size):
        rng = np.random.default_rng([config.seed, i])
        noise = rng.standard_normal(x.shape)
        out.append(Tensor(x.data + (config.sigma * noise).astype(x.dtype)))
    return out


def gradcam(model, x: Tensor, target_class: int, target_layer=None) -> CamMap:
    """Rectified gradient-weighted sum of the target layer's channels,
    min-max normalized, at feature-map resolution.

    The channel weight is the spatial mean of d(class score)/d(channel).
    Use :func:`upsample_bilinear` for an input-resolution rendering.
    """
    batch = _as_single_image_batch(x)
    batch.requires_grad = True
    with _params_frozen(model):
        logits, features = model.forward_with_features(batch, training=False)
        num_classes = logits.shape[1]
        if not 0 <= int(target_class) < num_classes:
            raise UsageError(f"class {target_class} outside [0, {num_classes})")
        fmap = _resolve_stage(features, target_layer)
        fmap.retain_grad = True
        score = F.pick(logits, (0, int(target_class)))
        if score.requires_grad:
            score.backward()

    # a score constant in the feature map legitimately has zero gradient
    grads = fmap.grad if fmap.grad is not None else np.zeros_like(fmap.data)
    alpha = grads.mean(axis=(2, 3))  # Z-normalized spatial sum per channel
    raw = np.maximum((alpha[:, :, None, None] * fmap.data).sum(axis=1)[0], 0)
    return CamMap(_normalize(raw))


def _resolve_stage(features: dict[str, Tensor], stage) -> Tensor:
    if stage is None:
        return features[sorted(features)[-1]]
    name = f"stage{stage}" if isinstance(stage, (int, np.integer)) else str(stage)
    if name not in features:
        raise UsageError(f"unknown stage {stage!r}; available: {sorted(features)}")
    return features[name]


def weight_schedule(config: DtGradCamConfig) -> np.ndarray:
    """Linear ramp from w_start down to w_end across the ensemble."""
    config.validate()
    n = config.ensemble_size
    if n == 1:
        return np.array([config.w_start])
    steps = np.arange(n) / (n - 1)
    return config.w_start - (config.w_start - config.w_end) * steps


def weighted_average(
    maps: Sequence[CamMap], weights: np.ndarray, renormalize: bool = True
) -> CamMap:
    """Convex-style combination sum(w_i m_i)/sum(w_i), optionally min-max
    renormalized afterwards."""
    if len(maps) == 0:
        raise InputError("need at least one map to average")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(maps),):
        raise InputError(f"{len(maps)} maps but {weights.shape} weights")
    shape = maps[0].values.shape
    for m in maps[1:]:
        if m.values.shape != shape:
            raise InputError(f"map size mismatch: {m.values.shape} vs {shape}")
    total = float(weights.sum())
    if total <= 0:
        raise InputError("weights must sum to a positive value")
    acc = maps[0].values * float(weights[0])
    for m, w in zip(maps[1:], weights[1:]):
        acc = acc + m.values * float(w)
    averaged = acc / total
    if renormalize:
        return CamMap(_normalize(averaged))
    # accumulation rounding can tip an all-ones combination past 1 by an ulp
    return CamMap(np.clip(averaged, 0.0, 1.0))


def otsu_threshold(cam, bins: int = 256) -> float:
    """Boundary t/bins maximizing between-class variance of the quantized
    values; lowest boundary on ties; 0.0 for a constant map.

    Values quantize to bin lower edges; the boundary T classifies
    quantized levels as (<= T) versus (> T).
    """
    values = cam.values if isinstance(cam, CamMap) else np.asarray(cam)
    if values.size == 0:
        raise InputError("cannot threshold an empty map")
    if bins < 2:
        raise ConfigurationError("otsu needs at least 2 bins")
    v = values.astype(np.float64).ravel()
    idx = np.minimum((v * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    levels = np.arange(bins, dtype=np.float64) / bins

    n1 = np.cumsum(counts)  # pixels in bins 0..t
    s1 = np.cumsum(counts * levels)
    total = n1[-1]
    grand = s1[-1]
    n2 = total - n1
    with np.errstate(divide="ignore", invalid="ignore"):
        mu1 = np.where(n1 > 0, s1 / n1, 0.0)
        mu2 = np.where(n2 > 0, (grand - s1) / n2, 0.0)
    sigma_b = np.where(
        (n1 > 0) & (n2 > 0), (n1 / total) * (n2 / total) * (mu1 - mu2) ** 2, 0.0
    )
    best = int(np.argmax(sigma_b))  # argmax returns the lowest tie
    return best / bins


def apply_threshold(cam: CamMap, threshold: float) -> CamMap:
    """Keep heatmap values strictly above the threshold, zero the rest."""
    if not 0.0 <= threshold <= 1.0:
        raise InputError(f"threshold must be in [0, 1], got {threshold}")
    kept = np.where(cam.values > threshold, cam.values, 0.0).astype(cam.values.dtype)
    return CamMap(kept)


def morphological_open(cam: CamMap, kernel: int) -> CamMap:
    """Binary opening (erode then dilate, square element) of the support;
    values inside the cleaned support are untouched, the rest zeroed.
    Out-of-image pixels count as background."""
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigurationError(f"morphology kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return CamMap(cam.values.copy())
    mask = cam.support
    pad = kernel // 2
    padded = np.pad(mask, pad, mode="constant", constant_values=False)
    eroded = sliding_window_view(padded, (kernel, kernel)).all(axis=(2, 3))
    padded2 = np.pad(eroded, pad, mode="constant", constant_values=False)
    opened = sliding_window_view(padded2, (kernel, kernel)).any(axis=(2, 3))
    kept = np.where(opened, cam.values, 0.0).astype(cam.values.dtype)
    return CamMap(kept)


def upsample_bilinear(cam: CamMap, out_w: int, out_h: int) -> CamMap:
    """Bilinear resize with half-pixel centers, clamped back to [0,1]."""
    if out_w < 1 or out_h < 1:
        raise InputError(f"target size must be positive, got {out_w}x{out_h}")
    resized = imageops.bilinear_resize(cam.values, out_h, out_w)
    return CamMap(np.clip(resized, 0.0, 1.0).astype(cam.values.dtype))


def dt_gradcam_detailed(
    model,
    x: Tensor,
    target_class: int,
    target_layer=None,
    config: Optional[DtGradCamConfig] = None,
    upsample_to: Optional[tuple[int, int]] = None,
) -> DtGradCamResult:
    """Full pipeline with every intermediate retained.

    ``upsample_to`` is (width, height); when given, the averaged map is
    upsampled before thresholding and morphology.
    """
    config = (config or DtGradCamConfig()).validate()
    members = [
        gradcam(model, xn, target_class, target_layer)
        for xn in noisy_inputs(_as_single_image_batch(x), config)
    ]
    weights = weight_schedule(config)
    averaged = weighted_average(members, weights, renormalize=config.renormalize_average)
    if upsample_to is not None:
        averaged = upsample_bilinear(averaged, upsample_to[0], upsample_to[1])

    threshold = None
    thresholded = averaged
    if config.otsu_enabled:
        threshold = otsu_threshold(averaged, bins=config.otsu_bins)
        thresholded = apply_threshold(averaged, threshold)

    final = thresholded
    if config.morphology_enabled:
        final = morphological_open(thresholded, config.morph_kernel)

    return DtGradCamResult(
        members=members,
        weights=weights,
        averaged=averaged,
        threshold=threshold,
        thresholded=thresholded,
        final=final,
    )


def dt_gradcam(
    model,
    x: Tensor,
    target_class: int,
    target_layer=None,
    config: Optional[DtGradCamConfig] = None,
    upsample_to: Optional[tuple[int, int]] = None,
) -> CamMap:
    """Noise-ensembled, weight-averaged, threshold-masked, morphology-
    cleaned heatmap; see :func:`dt_gradcam_detailed` for intermediates."""
    return dt_gradcam_detailed(model, x, target_class, target_layer, config, upsample_to).final


def render_heatmap(
    cam: CamMap,
    gray_path,
    base_image: Optional[np.ndarray] = None,
    overlay_path=None,
) -> list[str]:
    """Write the 8-bit grayscale PNG and, given a base image, an overlay
    blended at alpha 0.5 with the fixed heat colormap."""
    written = []
    try:
        imageops.save_png(gray_path, imageops.to_uint8(cam.values))
        written.append(str(gray_path))
        if base_image is not None:
            if overlay_path is None:
                raise UsageError("overlay requested without an output path")
            if base_image.ndim == 2:
                base_image = np.stack([base_image] * 3, axis=-1)
            blended = imageops.overlay_heatmap(base_image, cam.values, alpha=0.5)
            imageops.save_png(overlay_path, blended)
            written.append(str(overlay_path))
    except OSError as exc:
        raise OSError(f"failed writing heatmap artifact: {exc}") from exc
    return written


def cam_to_csv(cam: CamMap) -> str:
    """Row-major CSV at 9 significant digits."""
    lines = [",".join(f"{v:.9g}" for v in row) for row in cam.values]
    return "\n".join(lines) + "\n"


def save_cam_csv(path, cam: CamMap) -> None:
    imageops.atomic_write_bytes(path, cam_to_csv(cam).encode("ascii"))


def load_cam_csv(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        rows = [[float(tok) for tok in line.split(",")] for line in fh if line.strip()]
    return np.asarray(rows, dtype=np.float64)
