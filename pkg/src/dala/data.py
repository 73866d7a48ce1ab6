"""Dataset ingestion, splitting, preprocessing, augmentation, and the
synthetic localization dataset generator.

Directory layout: ``root/<class_name>/*.png`` with an optional sibling
``root/<class_name>_masks/`` holding same-named 8-bit mask PNGs (nonzero
= foreground).  Manifests record paths relative to the root, are ordered
lexicographically, and carry a checksum of the listing so a rescan of an
unchanged tree is verifiably identical.

All randomness is derived from explicit seeds; there is no global
entropy source anywhere in the pipeline.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import imageops
from .exceptions import ConfigurationError, InputError
from .tensor import Tensor

__all__ = [
    "ManifestEntry",
    "DatasetManifest",
    "SplitSpec",
    "AugmentSpec",
    "SyntheticSpec",
    "scan_directory",
    "largest_remainder_counts",
    "stratified_split",
    "load_and_preprocess",
    "augment",
    "generate_synthetic",
    "load_mask",
]

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True)
class ManifestEntry:
    """One sample: image path, class label, optional mask path (all
    relative to the manifest root)."""

    image: str
    label: int
    mask: Optional[str] = None


@dataclass
class DatasetManifest:
    root: str
    class_names: list[str]
    entries: list[ManifestEntry]
    errors: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if not 0 <= e.label < len(self.class_names):
                raise InputError(f"label {e.label} outside class table for {e.image}")
            if e.image in seen:
                raise InputError(f"duplicate path in manifest: {e.image}")
            seen.add(e.image)

    def __len__(self) -> int:
        return len(self.entries)

    def image_path(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.image

    def mask_path(self, entry: ManifestEntry) -> Optional[Path]:
        return None if entry.mask is None else Path(self.root) / entry.mask

    @property
    def checksum(self) -> str:
        listing = "\n".join(
            f"{e.image}\t{e.label}\t{e.mask or ''}" for e in self.entries
        )
        return hashlib.sha256(listing.encode("utf-8")).hexdigest()

    def label_counts(self) -> list[int]:
        counts = [0] * len(self.class_names)
        for e in self.entries:
            counts[e.label] += 1
        return counts

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest(
            root=self.root,
            class_names=list(self.class_names),
            entries=[self.entries[i] for i in indices],
        )

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "class_names": list(self.class_names),
            "checksum": self.checksum,
            "entries": [
                {"image": e.image, "label": e.label, "mask": e.mask}
                for e in self.entries
            ],
            "errors": list(self.errors),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            root=d["root"],
            class_names=list(d["class_names"]),
            entries=[
                ManifestEntry(x["image"], int(x["label"]), x.get("mask"))
                for x in d["entries"]
            ],
            errors=list(d.get("errors", [])),
        )

    def relocated(self, new_root) -> "DatasetManifest":
        """Same listing under a different root (paths stay relative)."""
        return DatasetManifest(
            root=str(new_root),
            class_names=list(self.class_names),
            entries=list(self.entries),
            errors=list(self.errors),
        )

    def save(self, path) -> None:
        payload = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        imageops.atomic_write_bytes(path, payload.encode("utf-8"))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        """Read a manifest; a relative root is resolved against the
        manifest file's directory, so saved trees are relocatable."""
        with open(path, "r", encoding="utf-8") as fh:
            manifest = cls.from_dict(json.load(fh))
        if not Path(manifest.root).is_absolute():
            manifest.root = str((Path(path).parent / manifest.root).resolve())
        return manifest


def _readable_png(path: Path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(8) == _PNG_SIGNATURE
    except OSError:
        return False


def scan_directory(root) -> DatasetManifest:
    """Build a manifest from a class-directory tree, deterministically.

    Class names are the sorted non-mask subdirectory names; files inside
    each class are ordered lexicographically.  Unreadable or non-PNG
    files are excluded and listed in the manifest's error report.
    """
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset root does not exist: {root}")
    class_dirs = sorted(
        d for d in root.iterdir() if d.is_dir() and not d.name.endswith("_masks")
    )
    class_names = [d.name for d in class_dirs]
    entries: list[ManifestEntry] = []
    errors: list[str] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(class_dir.glob("*.png"))
        if not files:
            warnings.warn(f"class directory {class_dir} has no png files", stacklevel=2)
        mask_dir = root / f"{class_dir.name}_masks"
        for f in files:
            if not _readable_png(f):
                errors.append(str(f.relative_to(root)))
                continue
            mask_rel = None
            candidate = mask_dir / f.name
            if candidate.is_file():
                mask_rel = str(candidate.relative_to(root))
            entries.append(ManifestEntry(str(f.relative_to(root)), label, mask_rel))
    return DatasetManifest(
        root=str(root), class_names=class_names, entries=entries, errors=errors
    )


@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test ratios (defaults 6:1:3), seed, stratification."""

    train: float = 0.6
    val: float = 0.1
    test: float = 0.3
    seed: int = 0
    stratified: bool = True

    def validate(self) -> "SplitSpec":
        ratios = (self.train, self.val, self.test)
        if any(r <= 0 for r in ratios):
            raise ConfigurationError("split ratios must all be positive")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigurationError(f"split ratios must sum to 1, got {sum(ratios)}")
        return self

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train, self.val, self.test)


def largest_remainder_counts(n: int, ratios) -> list[int]:
    """Integer apportionment of n by ratios.  Leftover units go to the
    largest fractional remainders; ties prefer the larger ratio, then the
    earlier position."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(x)) for x in exact]
    leftover = n - sum(counts)
    order = sorted(
        range(len(ratios)),
        key=lambda i: (-(exact[i] - counts[i]), -ratios[i], i),
    )
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def stratified_split(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Per-class shuffle then contiguous cuts at largest-remainder counts.

    The three results are disjoint and cover the input exactly.
    """
    spec.validate()
    if len(manifest) == 0:
        raise ConfigurationError("cannot split an empty manifest")

    groups: list[list[int]]
    if spec.stratified:
        groups = [[] for _ in manifest.class_names]
        for i, e in enumerate(manifest.entries):
            groups[e.label].append(i)
        for label, g in enumerate(groups):
            if 0 < len(g) < 3:
                raise ConfigurationError(
                    f"class {manifest.class_names[label]!r} has {len(g)} samples; "
                    "stratified splitting needs at least 3 per class"
                )
        groups = [g for g in groups if g]
    else:
        groups = [list(range(len(manifest)))]

    picks: tuple[list[int], list[int], list[int]] = ([], [], [])
    for gi, group in enumerate(groups):
        rng = np.random.default_rng([spec.seed, gi])
        order = [group[i] for i in rng.permutation(len(group))]
        n_train, n_val, n_test = largest_remainder_counts(len(group), spec.ratios)
        picks[0].extend(order[:n_train])
        picks[1].extend(order[n_train : n_train + n_val])
        picks[2].extend(order[n_train + n_val : n_train + n_val + n_test])
    return tuple(manifest.subset(sorted(p)) for p in picks)  # type: ignore[return-value]


def load_and_preprocess(path, target_side: int = 224) -> Tensor:
    """Decode a PNG, replicate grayscale to 3 channels, bilinear-resize
    to target_side^2, and map byte values to [-1, 1] via v/127.5 - 1."""
    if target_side < 1:
        raise ConfigurationError("target side must be positive")
    try:
        raw = imageops.load_png(path)
    except (OSError, SyntaxError, ValueError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    if raw.ndim == 2:
        chw = np.stack([raw, raw, raw]).astype(np.float32)
    else:
        chw = np.moveaxis(raw, 2, 0).astype(np.float32)
    if chw.shape[1] != target_side or chw.shape[2] != target_side:
        chw = imageops.bilinear_resize(chw, target_side, target_side).astype(np.float32)
    return Tensor(chw / np.float32(127.5) - np.float32(1.0))


@dataclass(frozen=True)
class AugmentSpec:
    """Random rotation (degrees, symmetric range) then horizontal flip."""

    rotation_degrees: float = 15.0
    flip_probability: float = 0.5
    seed: int = 0

    def validate(self) -> "AugmentSpec":
        if self.rotation_degrees < 0:
            raise ConfigurationError("rotation range must be >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigurationError("flip probability must be in [0, 1]")
        return self


def augment(image: Tensor, spec: AugmentSpec, sample_index: int, epoch: int = 0) -> Tensor:
    """Training-time augmentation, deterministic per (seed, epoch, index).

    Rotation uses bilinear resampling with edge replication about the
    image center; the flip mirrors the width axis.
    """
    spec.validate()
    rng = np.random.default_rng([spec.seed, epoch, sample_index])
    angle = float(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees))
    data = image.data
    if angle != 0.0:
        data = imageops.rotate_bilinear(data, angle).astype(data.dtype)
    if rng.random() < spec.flip_probability:
        data = data[..., ::-1].copy()
    return Tensor(data)


@dataclass(frozen=True)
class SyntheticSpec:
    """Two-class localization dataset: 'lesion' images carry a bright
    Gaussian blob at a random position inside one designated quadrant
    (mask = the blob's half-maximum region); 'normal' images carry the
    same noisy background, optionally with sinusoidal stripes.

    For localization benchmarks keep ``stripes`` off: then the blob is
    the only evidence separating the classes, so a faithful saliency map
    has to land on it."""

    side: int = 32
    samples_per_class: int = 100
    noise: float = 0.08
    seed: int = 0
    base_level: float = 0.25
    blob_amplitude: float = 0.7
    blob_sigma_frac: tuple[float, float] = (0.09, 0.16)
    stripes: bool = True
    stripe_contrast: float = 0.2
    quadrant: int = 3  # 0=top-left, 1=top-right, 2=bottom-left, 3=bottom-right

    def validate(self) -> "SyntheticSpec":
        if self.side < 8:
            raise ConfigurationError("synthetic image side must be >= 8")
        if self.samples_per_class < 1:
            raise ConfigurationError("need at least one sample per class")
        if self.noise < 0:
            raise ConfigurationError("noise floor must be >= 0")
        if not 0 <= self.quadrant <= 3:
            raise ConfigurationError("quadrant must be in 0..3")
        if not 0 < self.blob_amplitude <= 1:
            raise ConfigurationError("blob amplitude must be in (0, 1]")
        return self


def _background_bytes(rng: np.random.Generator, spec: SyntheticSpec, stripes: bool) -> np.ndarray:
    side = spec.side
    base = np.full((side, side), spec.base_level, dtype=np.float64)
    if stripes:
        freq = int(rng.integers(2, 6))
        phase = float(rng.uniform(0, 2 * np.pi))
        axis = np.arange(side) / side
        wave = spec.stripe_contrast * np.sin(2 * np.pi * freq * axis + phase)
        base = base + (wave[:, None] if rng.random() < 0.5 else wave[None, :])
    if spec.noise > 0:
        base = base + spec.noise * rng.standard_normal((side, side))
    return imageops.to_uint8(base)


def _lesion_blob(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Integer blob contribution and its half-maximum mask.

    Built in byte space so that, on a noise-free background, every mask
    pixel is strictly brighter than every background pixel.
    """
    side = spec.side
    sigma = float(rng.uniform(*spec.blob_sigma_frac)) * side
    half_radius = sigma * np.sqrt(2.0 * np.log(2.0))
    half_w = side / 2.0
    qx = spec.quadrant % 2
    qy = spec.quadrant // 2
    x0, x1 = qx * half_w + half_radius, (qx + 1) * half_w - half_radius
    y0, y1 = qy * half_w + half_radius, (qy + 1) * half_w - half_radius
    cx = float(rng.uniform(min(x0, x1), max(x0, x1)))
    cy = float(rng.uniform(min(y0, y1), max(y0, y1)))

    ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dist2 = (xs - cx) ** 2 + (ys - cy) ** 2
    amp_byte = 255.0 * spec.blob_amplitude
    blob = np.rint(amp_byte * np.exp(-dist2 / (2.0 * sigma**2))).astype(np.int64)
    half = int(np.ceil(amp_byte / 2.0))
    return blob, blob >= half


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write the dataset tree (images + masks as PNG) and return its
    manifest.  Bit-identical across runs with the same spec."""
    spec.validate()
    out = Path(out_dir)
    for sub in ("lesion", "lesion_masks", "normal"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    digits = max(4, len(str(spec.samples_per_class - 1)))
    for i in range(spec.samples_per_class):
        name = f"lesion_{i:0{digits}d}.png"
        rng = np.random.default_rng([spec.seed, 0, i])
        background = _background_bytes(rng, spec, stripes=False)
        blob, mask = _lesion_blob(rng, spec)
        image = np.clip(background.astype(np.int64) + blob, 0, 255).astype(np.uint8)
        imageops.save_png(out / "lesion" / name, image)
        imageops.save_png(out / "lesion_masks" / name, mask.astype(np.uint8) * 255)

    # normals carry no evidence region, so they get no mask files
    for i in range(spec.samples_per_class):
        name = f"normal_{i:0{digits}d}.png"
        rng = np.random.default_rng([spec.seed, 1, i])
        background = _background_bytes(rng, spec, stripes=spec.stripes)
        imageops.save_png(out / "normal" / name, background)

    return scan_directory(out)


def load_mask(manifest: DatasetManifest, entry: ManifestEntry, target_side: int) -> np.ndarray:
    """Boolean foreground mask, nearest-resized to target_side if needed."""
    path = manifest.mask_path(entry)
    if path is None:
        raise InputError(f"entry {entry.image} has no mask")
    raw = imageops.load_png(path)
    if raw.ndim == 3:
        raw = raw[..., 0]
    mask = raw > 0
    if mask.shape != (target_side, target_side):
        resized = imageops.bilinear_resize(mask.astype(np.float64), target_side, target_side)
        mask = resized >= 0.5
    return mask
