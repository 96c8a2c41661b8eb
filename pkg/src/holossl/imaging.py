"""Particle images, synthetic oracle data and the contrastive augmentation pipeline.

All images are 200x200 single-channel float grids in [0, 1]. Every stochastic
operation takes an explicit integer seed and is a pure function of its inputs.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SIZE = 200
DEFAULT_PIXEL_PITCH_UM = 0.595
SPLITS = ("train", "test", "unlabelled")
MANIFEST_HEADER = ("path", "taxon", "instrument", "split")


@dataclass(frozen=True)
class ParticleImage:
    pixels: np.ndarray
    pixel_pitch_um: float = DEFAULT_PIXEL_PITCH_UM
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"image grid must be 2-D, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0 or not np.isfinite(px).all()):
            raise ValueError("intensities must lie in [0, 1]")
        if not self.pixel_pitch_um > 0:
            raise ValueError("pixel_pitch_um must be positive")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class DatasetRecord:
    image_path: str
    taxon: str
    instrument: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if (self.taxon == "") != (self.split == "unlabelled"):
            raise ValueError("taxon must be empty exactly when split is 'unlabelled'")
        if not self.instrument:
            raise ValueError("instrument tag must be non-empty")


@dataclass(frozen=True)
class AugmentPolicy:
    """Ranges for the view-generating augmentations.

    ``crop_scale_range`` is the fraction of the image *area* kept by the
    random crop, as in the usual resized-crop formulation.
    """

    rotation_max_deg: float = 180.0
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    blur_sigma_range: tuple[float, float] = (0.0, 1.5)
    gain_jitter_range: tuple[float, float] = (0.8, 1.25)
    flip_prob: float = 0.5

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0.0 <= self.rotation_max_deg <= 180.0:
            raise ValueError("rotation_max_deg must be in [0, 180]")
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale_range must satisfy 0 < lo <= hi <= 1")
        lo, hi = self.blur_sigma_range
        if not 0.0 <= lo <= hi:
            raise ValueError("blur_sigma_range must satisfy 0 <= lo <= hi")
        lo, hi = self.gain_jitter_range
        if not 0.0 < lo <= 1.0 <= hi:
            raise ValueError("gain_jitter_range must satisfy 0 < lo <= 1 <= hi")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, (1.0, 1.0), (0.0, 0.0), (1.0, 1.0), 0.0)


@dataclass(frozen=True)
class ClassShape:
    """Sampling ranges describing one synthetic taxon.

    Radii are in pixels, fringe frequency in cycles per pixel.
    """

    radius: tuple[float, float]
    eccentricity: tuple[float, float]
    fringe_freq: tuple[float, float]
    noise: float = 0.02


@dataclass(frozen=True)
class ShiftParams:
    """Mild perturbation emulating a second measurement instrument."""

    blur_sigma: float = 1.5
    gain: float = 0.90
    noise: float = 0.01
    instrument: str = "P4"


def default_class_shapes() -> tuple[ClassShape, ...]:
    """Five stock classes; a ``SyntheticSpec`` with ``n_classes=k`` uses the first k.

    The first two differ only in fringe spacing, the third mainly in size and
    elongation.
    """
    return (
        ClassShape((20.0, 26.0), (0.0, 0.45), (0.030, 0.045)),
        ClassShape((20.0, 26.0), (0.0, 0.45), (0.055, 0.075)),
        ClassShape((32.0, 42.0), (0.3, 0.6), (0.055, 0.075)),
        ClassShape((26.0, 34.0), (0.55, 0.8), (0.030, 0.045)),
        ClassShape((26.0, 34.0), (0.0, 0.45), (0.045, 0.060)),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 3
    per_class_count: int = 10
    shapes: tuple[ClassShape, ...] = field(default_factory=default_class_shapes)
    shift: ShiftParams | None = None
    test_fraction: float = 0.3
    unlabelled_fraction: float = 0.0
    instrument: str = "P5"
    taxon_prefix: str = "taxon"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.per_class_count < 1:
            raise ValueError("per_class_count must be >= 1")
        if len(self.shapes) < self.n_classes:
            raise ValueError(f"need {self.n_classes} class shapes, got {len(self.shapes)}")
        if not (0.0 <= self.test_fraction and 0.0 <= self.unlabelled_fraction
                and self.test_fraction + self.unlabelled_fraction <= 1.0):
            raise ValueError("split fractions must be non-negative and sum to <= 1")
        for s in self.shapes[: self.n_classes]:
            for lo, hi in (s.radius, s.eccentricity, s.fringe_freq):
                if lo > hi:
                    raise ValueError("class shape ranges must be well-ordered")
            if s.radius[0] <= 0 or s.eccentricity[1] >= 1.0 or s.noise < 0:
                raise ValueError("invalid class shape parameters")

    def taxon_names(self) -> list[str]:
        return [f"{self.taxon_prefix}{i:02d}" for i in range(self.n_classes)]


# ---------------------------------------------------------------------------
# file IO


def _fit_canvas(px: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Center-crop or zero-pad each axis to ``size``."""
    out = np.zeros((size, size), dtype=np.float64)
    src, dst = [], []
    for n in px.shape:
        if n >= size:
            start = (n - size) // 2
            src.append(slice(start, start + size))
            dst.append(slice(0, size))
        else:
            start = (size - n) // 2
            src.append(slice(0, n))
            dst.append(slice(start, start + n))
    out[dst[0], dst[1]] = px[src[0], src[1]]
    return out


def load_image(path: str | Path, pixel_pitch_um: float = DEFAULT_PIXEL_PITCH_UM) -> ParticleImage:
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ValueError(f"unreadable image file {path}: {exc}") from exc
    mode = img.mode
    if mode == "L":
        px = np.asarray(img, dtype=np.float64) / 255.0
    elif mode in ("I;16", "I;16L", "I;16B", "I"):
        arr = np.asarray(img)
        if arr.min() < 0 or arr.max() > 65535:
            raise ValueError(f"{path}: unsupported integer range")
        px = arr.astype(np.float64) / 65535.0
    else:
        raise ValueError(f"{path}: single-channel required (got mode {mode})")
    return ParticleImage(_fit_canvas(px), pixel_pitch_um, source_id=str(path))


def save_image(img: ParticleImage, path: str | Path) -> None:
    """Write an 8-bit grayscale PGM (binary P5) or PNG, chosen by suffix."""
    path = Path(path)
    data = np.round(img.pixels * 255.0).astype(np.uint8)
    fmt = "PPM" if path.suffix.lower() == ".pgm" else "PNG"
    Image.fromarray(data, mode="L").save(path, format=fmt)


def write_manifest(records: Sequence[DatasetRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in records:
            w.writerow([r.image_path, r.taxon, r.instrument, r.split])


def read_manifest(path: str | Path) -> list[DatasetRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != MANIFEST_HEADER:
            raise ValueError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        return [DatasetRecord(*row) for row in reader if row]


# ---------------------------------------------------------------------------
# synthetic oracle data


def _render_particle(shape: ClassShape, rng: np.random.Generator) -> np.ndarray:
    radius = rng.uniform(*shape.radius)
    ecc = rng.uniform(*shape.eccentricity)
    freq = rng.uniform(*shape.fringe_freq)
    theta = rng.uniform(0.0, math.pi)
    cy, cx = (IMAGE_SIZE - 1) / 2.0 + rng.uniform(-3.0, 3.0, size=2)
    background = 0.7 + rng.uniform(-0.02, 0.02)

    a = radius
    b = radius * math.sqrt(1.0 - ecc * ecc)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    # signed distance to the rim in pixels, using the mean semi-axis as scale
    dist = (rho - 1.0) * 0.5 * (a + b)

    body = 1.0 / (1.0 + np.exp(np.clip(dist / 1.5, -50, 50)))
    radial = rho * 0.5 * (a + b)
    fringes = np.cos(2.0 * math.pi * freq * radial)
    inside = 0.18 * fringes * body
    halo = 0.12 * np.cos(2.0 * math.pi * freq * dist) * np.exp(-np.maximum(dist, 0.0) / 12.0) * (1.0 - body)
    px = background - 0.35 * body + inside + halo
    px += rng.normal(0.0, shape.noise, size=px.shape)
    return np.clip(px, 0.0, 1.0)


def apply_shift(px: np.ndarray, shift: ShiftParams, rng: np.random.Generator) -> np.ndarray:
    out = ndimage.gaussian_filter(px, shift.blur_sigma, mode="reflect") if shift.blur_sigma > 0 else px.copy()
    out = out * shift.gain
    if shift.noise > 0:
        out = out + rng.normal(0.0, shift.noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def block_downsample(px: np.ndarray, size: int) -> np.ndarray:
    """Area-average a square grid down to ``size`` x ``size``."""
    m = _area_matrix(px.shape[0], size)
    return m @ px @ m.T


_AREA_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    key = (n_in, n_out)
    if key not in _AREA_CACHE:
        m = np.zeros((n_out, n_in))
        step = n_in / n_out
        for i in range(n_out):
            lo, hi = i * step, (i + 1) * step
            for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
                m[i, j] = min(hi, j + 1) - max(lo, j)
        m /= m.sum(axis=1, keepdims=True)
        m.setflags(write=False)
        _AREA_CACHE[key] = m
    return _AREA_CACHE[key]


def nearest_centroid_selfcheck(images: Sequence[np.ndarray], labels: Sequence[int], n_classes: int) -> float:
    """Resubstitution accuracy of a nearest class-mean classifier on coarse raw pixels."""
    x = np.stack([block_downsample(p, 25).ravel() for p in images])
    y = np.asarray(labels)
    centroids = np.stack([x[y == c].mean(axis=0) for c in range(n_classes)])
    d = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) == y).mean())


def _split_for(index: int, count: int, spec: SyntheticSpec) -> str:
    n_unl = int(round(count * spec.unlabelled_fraction))
    n_test = int(round(count * spec.test_fraction))
    if index < n_unl:
        return "unlabelled"
    if index < n_unl + n_test:
        return "test"
    return "train"


def generate_synthetic(spec: SyntheticSpec, seed: int) -> list[tuple[ParticleImage, DatasetRecord]]:
    """Render ``n_classes * per_class_count`` particle images, plus shifted copies.

    Shifted copies are produced only for labelled images, since the unlabelled
    pool is acquired on the primary instrument. Records are grouped by class,
    originals first; image paths are relative ``<instrument>/<taxon>_<index>.pgm``.
    """
    taxa = spec.taxon_names()
    out: list[tuple[ParticleImage, DatasetRecord]] = []
    shifted: list[tuple[ParticleImage, DatasetRecord]] = []
    raw, labels = [], []
    for c, taxon in enumerate(taxa):
        for i in range(spec.per_class_count):
            rng = np.random.default_rng([seed, c, i, 0])
            px = _render_particle(spec.shapes[c], rng)
            raw.append(px)
            labels.append(c)
            split = _split_for(i, spec.per_class_count, spec)
            label = "" if split == "unlabelled" else taxon
            name = f"{taxon}_{i:05d}"
            rec = DatasetRecord(f"{spec.instrument}/{name}.pgm", label, spec.instrument, split)
            out.append((ParticleImage(px, source_id=f"{spec.instrument}:{name}"), rec))
            if spec.shift is not None and split != "unlabelled":
                srng = np.random.default_rng([seed, c, i, 1])
                spx = apply_shift(px, spec.shift, srng)
                tag = spec.shift.instrument
                srec = DatasetRecord(f"{tag}/{name}.pgm", label, tag, split)
                shifted.append((ParticleImage(spx, source_id=f"{tag}:{name}"), srec))

    acc = nearest_centroid_selfcheck(raw, labels, spec.n_classes)
    if acc <= 1.0 / spec.n_classes + 0.2:
        raise ValueError(
            f"degenerate synthetic spec: nearest-centroid self-check accuracy {acc:.3f} "
            f"does not exceed chance + 0.2"
        )
    return out + shifted


# ---------------------------------------------------------------------------
# augmentation


def augment(img: ParticleImage, policy: AugmentPolicy, seed: int) -> ParticleImage:
    """Random rotation, resized crop, flip, blur and gain jitter, in that order.

    Rotation, crop-resize and flip are composed into a single bilinear
    resampling with reflect padding. Steps whose drawn parameters are the
    identity are skipped, so the identity policy returns the input bit-exactly.
    """
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-policy.rotation_max_deg, policy.rotation_max_deg)
    area = rng.uniform(*policy.crop_scale_range)
    off_frac = rng.uniform(-1.0, 1.0, size=2)
    flip = bool(rng.random() < policy.flip_prob)
    sigma = rng.uniform(*policy.blur_sigma_range)
    gain = rng.uniform(*policy.gain_jitter_range)

    px = img.pixels
    n = px.shape[0]
    side = math.sqrt(area)
    offset = off_frac * (1.0 - side) * n / 2.0
    if angle != 0.0 or side != 1.0 or flip or offset.any():
        t = math.radians(angle)
        # pull-back from output coordinates to input coordinates
        rot_inv = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        flip_m = np.diag([1.0, -1.0 if flip else 1.0])
        mat = rot_inv @ (side * flip_m)
        center = np.full(2, (n - 1) / 2.0)
        shift = center + rot_inv @ offset - mat @ center
        px = ndimage.affine_transform(px, mat, offset=shift, order=1, mode="reflect")
    if sigma > 0.0:
        px = ndimage.gaussian_filter(px, sigma, mode="reflect")
    if gain != 1.0:
        px = px * gain
    px = np.clip(px, 0.0, 1.0)
    return replace(img, pixels=px)


def make_view_pair(img: ParticleImage, policy: AugmentPolicy, seed: int) -> tuple[ParticleImage, ParticleImage]:
    s_a, s_b = np.random.SeedSequence(seed).generate_state(2)
    return augment(img, policy, int(s_a)), augment(img, policy, int(s_b))


GENERIC_SHAPES = (
    ClassShape((14.0, 24.0), (0.0, 0.4), (0.02, 0.09)),
    ClassShape((30.0, 46.0), (0.0, 0.4), (0.02, 0.09)),
    ClassShape((18.0, 40.0), (0.7, 0.9), (0.02, 0.09)),
)
GENERIC_STYLES = (
    ShiftParams(blur_sigma=0.0, gain=1.0, noise=0.0, instrument="sharp"),
    ShiftParams(blur_sigma=2.5, gain=0.75, noise=0.03, instrument="soft"),
)


def generate_generic_corpus(per_class: int, seed: int) -> tuple[list[ParticleImage], list[int]]:
    """Labelled stand-in for a general-purpose supervised pre-training corpus.

    Labels combine a coarse shape family with an acquisition style (sharp and
    bright vs. soft, dim and noisy). A classifier trained on it learns both
    object features and low-level image statistics, so its features respond to
    acquisition changes the way off-the-shelf supervised features do.
    """
    images, labels = [], []
    for si, shape in enumerate(GENERIC_SHAPES):
        for ai, style in enumerate(GENERIC_STYLES):
            label = si * len(GENERIC_STYLES) + ai
            for i in range(per_class):
                rng = np.random.default_rng([seed, si, ai, i, 7])
                px = apply_shift(_render_particle(shape, rng), style, rng)
                images.append(ParticleImage(px, source_id=f"generic:{label}:{i}"))
                labels.append(label)
    return images, labels
