"""Dataset manifests, stratified splitting, loading, and synthesis.

The manifest is a CSV with header ``path,kl_grade[,split][,patient]
[,laterality]``. Splitting allocates each grade's records to
train/test/val by largest-remainder rounding of the requested ratios, so
per-grade proportions are within one record of exact. The synthetic
generator produces knee-like phantoms whose joint gap narrows and whose
marginal blobs brighten monotonically with grade; it exists so the whole
pipeline can be exercised at desk scale without any cohort data.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DataError
from .imageio import bilinear_resize, read_pgm, write_pgm

logger = logging.getLogger(__name__)

NUM_GRADES = 5
SPLITS = ("train", "test", "val")
DEFAULT_RATIOS = (7, 2, 1)


@dataclass(frozen=True)
class GradeRecord:
    path: str
    kl_grade: int
    split: str = ""
    patient: str = ""
    laterality: str = ""

    def __post_init__(self):
        if not self.path:
            raise DataError("record has an empty path")
        if not 0 <= self.kl_grade < NUM_GRADES:
            raise DataError(f"{self.path}: grade {self.kl_grade} outside 0..{NUM_GRADES - 1}")
        if self.split and self.split not in SPLITS:
            raise DataError(f"{self.path}: unknown split {self.split!r}")
        if self.laterality and self.laterality not in ("left", "right"):
            raise DataError(f"{self.path}: unknown laterality {self.laterality!r}")


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[GradeRecord, ...]

    def __post_init__(self):
        seen: set[str] = set()
        for rec in self.records:
            if rec.path in seen:
                raise DataError(f"duplicate path in manifest: {rec.path}")
            seen.add(rec.path)

    def __len__(self) -> int:
        return len(self.records)

    def for_split(self, split: str) -> tuple[GradeRecord, ...]:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return tuple(r for r in self.records if r.split == split)

    def grade_counts(self, split: str | None = None) -> np.ndarray:
        recs = self.records if split is None else self.for_split(split)
        counts = np.zeros(NUM_GRADES, dtype=np.int64)
        for r in recs:
            counts[r.kl_grade] += 1
        return counts


_COLUMNS = ("path", "kl_grade", "split", "patient", "laterality")


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest CSV; duplicates and bad grades reject."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty manifest")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["path", "kl_grade"] or any(h not in _COLUMNS for h in header):
        raise DataError(f"{path}: manifest header must start with 'path,kl_grade', got {header}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        fields = dict(zip(header, (cell.strip() for cell in row)))
        try:
            grade = int(fields["kl_grade"])
        except ValueError as e:
            raise DataError(f"{path}:{lineno}: grade {fields['kl_grade']!r} is not an integer") from e
        try:
            records.append(
                GradeRecord(
                    path=fields["path"],
                    kl_grade=grade,
                    split=fields.get("split", ""),
                    patient=fields.get("patient", ""),
                    laterality=fields.get("laterality", ""),
                )
            )
        except DataError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    if not records:
        raise DataError(f"{path}: empty manifest")
    return DatasetManifest(tuple(records))


def save_manifest(manifest: DatasetManifest, path) -> None:
    with_patient = any(r.patient for r in manifest.records)
    with_lat = any(r.laterality for r in manifest.records)
    header = ["path", "kl_grade", "split"]
    if with_patient:
        header.append("patient")
    if with_lat:
        header.append("laterality")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for r in manifest.records:
            row = [r.path, str(r.kl_grade), r.split]
            if with_patient:
                row.append(r.patient)
            if with_lat:
                row.append(r.laterality)
            writer.writerow(row)


def _largest_remainder(n: int, weights: np.ndarray) -> np.ndarray:
    exact = n * weights
    base = np.floor(exact).astype(np.int64)
    frac = exact - base
    # Ties resolve by split order (stable sort on negated fraction).
    for idx in np.argsort(-frac, kind="stable")[: n - base.sum()]:
        base[idx] += 1
    return base


def stratified_split(
    records,
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    seed: int = 0,
    group_by_patient: bool = False,
    strict: bool = False,
) -> DatasetManifest:
    """Assign train/test/val per grade, proportions within one record.

    Membership depends only on (records-as-a-set, ratios, seed): records
    are canonically ordered by path before the seeded shuffle. With
    ``group_by_patient`` all records of one patient land in one split
    (grade proportions then only approximate).
    """
    recs = list(records.records if isinstance(records, DatasetManifest) else records)
    if not recs:
        raise DataError("cannot split an empty record list")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ConfigError(f"ratios must be three non-negative numbers, got {ratios}")
    weights = np.asarray(ratios, dtype=np.float64) / sum(ratios)
    recs.sort(key=lambda r: r.path)
    present = {r.kl_grade for r in recs}
    for g in range(NUM_GRADES):
        if g not in present:
            msg = f"grade {g} absent; stratification incomplete"
            if strict:
                raise DataError(msg)
            logger.warning(msg)
    rng = np.random.default_rng(seed)

    assigned: dict[str, str] = {}
    if group_by_patient:
        groups: dict[str, list[GradeRecord]] = {}
        for r in recs:
            groups.setdefault(r.patient or r.path, []).append(r)
        keys = sorted(groups)
        order = rng.permutation(len(keys))
        targets = _largest_remainder(len(recs), weights).astype(np.float64)
        filled = np.zeros(3)
        for gi in order:
            group = groups[keys[gi]]
            dest = int(np.argmax(targets - filled))
            for r in group:
                assigned[r.path] = SPLITS[dest]
            filled[dest] += len(group)
    else:
        by_grade: dict[int, list[GradeRecord]] = {}
        for r in recs:
            by_grade.setdefault(r.kl_grade, []).append(r)
        for g in sorted(by_grade):
            bucket = by_grade[g]
            order = rng.permutation(len(bucket))
            counts = _largest_remainder(len(bucket), weights)
            bounds = np.cumsum(counts)
            for pos, bi in enumerate(order):
                dest = int(np.searchsorted(bounds, pos, side="right"))
                assigned[bucket[bi].path] = SPLITS[dest]

    return DatasetManifest(tuple(replace(r, split=assigned[r.path]) for r in recs))


def load_image(source, target_size: int, channels: int = 3) -> Tensor:
    """Decode a grayscale PGM, resize, standardize, replicate channels.

    Intensities are scaled by the encoding's maxval, resized bilinearly to
    ``target_size`` square, then normalized to zero mean and unit variance
    (variance floored at 1e-6, so constant images come out all zero).
    """
    path = source.path if isinstance(source, GradeRecord) else source
    raw = read_pgm(path)
    maxval = 65535.0 if raw.dtype == np.uint16 else 255.0
    img = raw.astype(np.float64) / maxval
    if img.shape != (target_size, target_size):
        img = bilinear_resize(img, target_size, target_size)
    img = img - img.mean()
    img = img / np.sqrt(max(float(np.square(img).mean()), 1e-6))
    stacked = np.repeat(img[None].astype(np.float32), channels, axis=0)
    return Tensor(stacked)


@dataclass(frozen=True)
class AugmentationPolicy:
    enabled: bool = True
    flip_prob: float = 0.5
    rotation_deg: float = 10.0
    brightness: float = 0.1
    contrast: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.rotation_deg <= 15.0:
            raise ConfigError(f"rotation_deg must be in [0, 15], got {self.rotation_deg}")
        if self.brightness < 0 or self.contrast < 0:
            raise ConfigError("brightness/contrast jitter must be non-negative")


def _rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0.0:
        return img
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse rotation: sample source coordinates for each output pixel
    sy = cos_t * yy + sin_t * xx + cy
    sx = -sin_t * yy + cos_t * xx + cx
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.intp)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(sy, 0, h - 1) - y0
    fx = np.clip(sx, 0, w - 1) - x0
    return (
        (1 - fy) * (1 - fx) * img[y0, x0]
        + (1 - fy) * fx * img[y0, x1]
        + fy * (1 - fx) * img[y1, x0]
        + fy * fx * img[y1, x1]
    ).astype(img.dtype)


def augment(image: Tensor, policy: AugmentationPolicy, rng: np.random.Generator) -> Tensor:
    """Flip/rotate/jitter an image tensor; identity when policy is disabled.

    A fixed number of draws is consumed per call so the random stream stays
    aligned whatever the drawn values are.
    """
    if not policy.enabled:
        return image
    do_flip = rng.random() < policy.flip_prob
    angle = float(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
    delta = float(rng.uniform(-policy.brightness, policy.brightness))
    factor = 1.0 + float(rng.uniform(-policy.contrast, policy.contrast))

    data = image.data
    if do_flip:
        data = data[:, :, ::-1]
    if angle != 0.0:
        data = np.stack([_rotate_bilinear(ch, angle) for ch in data])
    data = (data * factor + delta).astype(image.data.dtype)
    return Tensor(data)


@dataclass(frozen=True)
class PhantomParams:
    grade: int
    gap_fraction: float
    osteophyte: float


# Per-grade means of the two generative parameters; jitters are small
# relative to the inter-grade steps so grades stay linearly separable.
_GAP_BASE, _GAP_STEP, _GAP_JITTER = 0.30, 0.06, 0.008
_OST_STEP, _OST_JITTER = 0.12, 0.03
_NOISE_SIGMA = 0.05


def generate_phantom(
    grade: int, rng: np.random.Generator, size: int = 64, noise_sigma: float = _NOISE_SIGMA
) -> tuple[np.ndarray, PhantomParams]:
    """One grayscale knee phantom: two bone bands, a grade-controlled gap,
    grade-controlled marginal blobs, plus noise. Returns uint8 pixels."""
    if not 0 <= grade < NUM_GRADES:
        raise DataError(f"grade {grade} outside 0..{NUM_GRADES - 1}")
    gap = _GAP_BASE - _GAP_STEP * grade + rng.normal(0.0, _GAP_JITTER)
    gap = float(np.clip(gap, 0.02, 0.45))
    ost = max(0.0, _OST_STEP * grade + rng.normal(0.0, _OST_JITTER))

    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = 0.15 + 0.05 * yy  # faint background gradient

    half_gap = gap / 2.0
    edge = 2.0 / size  # soft bone boundary, ~2 px
    top_edge = 0.5 - half_gap
    bot_edge = 0.5 + half_gap
    bone = 0.6
    img += bone * np.clip((top_edge - yy) / edge + 1.0, 0.0, 1.0) * (yy < top_edge + edge)
    img += bone * np.clip((yy - bot_edge) / edge + 1.0, 0.0, 1.0) * (yy > bot_edge - edge)

    sigma2 = (0.06) ** 2
    for bx in (0.18, 0.82):  # blobs at the joint margins
        for by in (top_edge, bot_edge):
            img += ost * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma2))

    img += rng.normal(0.0, noise_sigma, size=(size, size))
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, PhantomParams(grade, gap, ost)


def synth_dataset(
    out_dir, n_per_grade: int, seed: int, size: int = 64, noise_sigma: float = _NOISE_SIGMA
) -> tuple[DatasetManifest, list[PhantomParams]]:
    """Write n phantoms per grade under grade_<g>/img_<k>.pgm plus a manifest."""
    if n_per_grade < 1:
        raise DataError(f"n_per_grade must be >= 1, got {n_per_grade}")
    rng = np.random.default_rng(seed)
    records = []
    params = []
    for grade in range(NUM_GRADES):
        grade_dir = os.path.join(out_dir, f"grade_{grade}")
        os.makedirs(grade_dir, exist_ok=True)
        for k in range(n_per_grade):
            pixels, p = generate_phantom(grade, rng, size, noise_sigma)
            rel = os.path.join(f"grade_{grade}", f"img_{k:04d}.pgm")
            write_pgm(os.path.join(out_dir, rel), pixels)
            records.append(GradeRecord(path=os.path.join(out_dir, rel), kl_grade=grade))
            params.append(p)
    manifest = DatasetManifest(tuple(records))
    save_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    return manifest, params
