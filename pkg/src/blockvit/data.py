"""Datasets: manifests, splits, few-shot subsets, quality filtering, and a
synthetic generator of ordinal-stage fundus-like images.

A manifest on disk is a CSV with header ``path,label,split``. Synthetic
datasets are written in exactly that form (plus PNG files), so downstream
code handles generated and real image folders the same way.
"""

from __future__ import annotations

import csv
import enum
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, LabelError
from .imageops import resize_bilinear


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNLABELED = "unlabeled"


@dataclass(frozen=True)
class Record:
    path: str
    label: int
    split: Split


@dataclass
class Manifest:
    records: list
    name: str = "dataset"
    class_count: int = 0

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def splits(self) -> np.ndarray:
        return np.array([r.split.value for r in self.records])

    def indices(self, split) -> np.ndarray:
        return np.flatnonzero(self.splits == Split(split).value)

    def validate(self) -> "Manifest":
        seen = set()
        for i, r in enumerate(self.records):
            if r.path in seen:
                raise DataError(f"row {i + 1}: duplicate path {r.path!r}")
            seen.add(r.path)
            if r.split is Split.UNLABELED:
                continue
            if not 0 <= r.label < self.class_count:
                raise LabelError(f"row {i + 1} ({r.path}): label {r.label} outside [0, {self.class_count})")
        return self

    def with_splits(self, splits) -> "Manifest":
        recs = [replace(r, split=Split(s)) for r, s in zip(self.records, splits)]
        return Manifest(recs, self.name, self.class_count)


def write_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        for r in manifest.records:
            w.writerow([r.path, "" if r.split is Split.UNLABELED and r.label < 0 else r.label, r.split.value])


def load_manifest(path, class_count: int | None = None, name: str | None = None) -> Manifest:
    """Parse and validate a ``path,label,split`` CSV.

    Unlabeled rows may leave ``label`` empty. When ``class_count`` is not
    given it is inferred as ``max(label) + 1``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label", "split"]:
            raise DataError(f"{path}:1: expected header 'path,label,split', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            p, lab, sp = (c.strip() for c in row)
            try:
                split = Split(sp.lower())
            except ValueError:
                raise DataError(f"{path}:{lineno}: unknown split {sp!r}") from None
            try:
                label = -1 if lab == "" else int(lab)
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {lab!r} is not an integer") from None
            if label < 0 and split is not Split.UNLABELED:
                raise LabelError(f"{path}:{lineno}: labeled split {split.value} needs a label")
            records.append(Record(p, label, split))
    if class_count is None:
        labeled = [r.label for r in records if r.label >= 0]
        class_count = max(labeled) + 1 if labeled else 0
    return Manifest(records, name or path.stem, class_count).validate()


# ---------------------------------------------------------------------------
# splitting and subsampling
# ---------------------------------------------------------------------------


def _largest_remainder(n: int, ratios) -> np.ndarray:
    raw = np.asarray(ratios, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def stratified_split(labels, ratios=(0.7, 0.15, 0.15), seed: int = 0, names=(Split.TRAIN, Split.VAL, Split.TEST)) -> np.ndarray:
    """Per-class proportional assignment with largest-remainder rounding.

    Returns an array of :class:`Split` values aligned with ``labels``.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise DataError(f"split ratios must be non-negative and sum to 1, got {ratios.tolist()}")
    labels = np.asarray(labels)
    out = np.empty(len(labels), dtype=object)
    rng = np.random.default_rng(seed)
    n_nonzero = int((ratios > 0).sum())
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < n_nonzero:
            warnings.warn(f"class {c} has {len(idx)} samples for {n_nonzero} splits; assignment is best-effort")
        idx = idx[rng.permutation(len(idx))]
        counts = _largest_remainder(len(idx), ratios)
        start = 0
        for name, cnt in zip(names, counts):
            out[idx[start:start + cnt]] = Split(name)
            start += cnt
    return out


def assign_splits(manifest: Manifest, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> Manifest:
    """Split the labeled rows of a manifest, keeping pre-assigned TEST rows fixed.

    When a manifest already has TEST rows (a dataset with a defined test
    set), the ratios are renormalized over TRAIN and VAL and applied to the
    remaining labeled rows.
    """
    splits = manifest.splits.astype(object)
    fixed_test = splits == Split.TEST.value
    free = np.flatnonzero((splits != Split.UNLABELED.value) & ~fixed_test)
    ratios = np.asarray(ratios, dtype=np.float64)
    if fixed_test.any():
        ratios = np.array([ratios[0], ratios[1], 0.0]) / (ratios[0] + ratios[1])
    assigned = stratified_split(manifest.labels[free], ratios, seed)
    new = [Split(s) for s in splits]
    for i, s in zip(free, assigned):
        new[i] = s
    return manifest.with_splits(new)


@dataclass
class FewShotSubset:
    indices: np.ndarray
    saturated: dict  # class -> True when fewer than n were available


def few_shot_sample(labels, n_per_class: int, seed: int = 0, class_count: int | None = None) -> FewShotSubset:
    """Draw ``min(n, |class|)`` indices per class uniformly without replacement."""
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    labels = np.asarray(labels)
    classes = range(class_count) if class_count is not None else np.unique(labels)
    rng = np.random.default_rng(seed)
    picked, saturated = [], {}
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise DataError(f"class {c} has no training samples")
        saturated[int(c)] = len(idx) <= n_per_class
        if len(idx) > n_per_class:
            idx = np.sort(rng.choice(idx, size=n_per_class, replace=False))
        picked.append(idx)
    return FewShotSubset(np.concatenate(picked), saturated)


# ---------------------------------------------------------------------------
# image loading, preprocessing, quality
# ---------------------------------------------------------------------------


def luminance(image: np.ndarray) -> np.ndarray:
    return image[..., :3] @ np.array([0.299, 0.587, 0.114], dtype=image.dtype)


def foreground_mask(image: np.ndarray, threshold: float = 0.08) -> np.ndarray:
    return luminance(image) > threshold


def preprocess(image: np.ndarray, target_size: int, threshold: float = 0.08) -> np.ndarray:
    """Square crop centred on the foreground disc, then bilinear resize.

    The crop side is the larger side of the foreground bounding box (clipped
    to the frame). Images without a foreground, or where everything is
    foreground, keep the full frame.
    """
    h, w = image.shape[:2]
    mask = foreground_mask(image, threshold)
    if mask.any() and not mask.all():
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        side = min(max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1), h, w)
        cy = (rows[0] + rows[-1] + 1) / 2
        cx = (cols[0] + cols[-1] + 1) / 2
        top = int(np.clip(round(cy - side / 2), 0, h - side))
        left = int(np.clip(round(cx - side / 2), 0, w - side))
        image = image[top:top + side, left:left + side]
    elif h != w:
        side = min(h, w)
        image = image[(h - side) // 2:(h - side) // 2 + side, (w - side) // 2:(w - side) // 2 + side]
    return resize_bilinear(image, target_size)


def default_quality(image: np.ndarray, min_foreground: float = 0.2, min_contrast: float = 0.02) -> bool:
    """Stand-in gradability check: enough foreground disc and enough contrast inside it."""
    mask = foreground_mask(image)
    if mask.mean() < min_foreground:
        return False
    return float(luminance(image)[mask].std()) >= min_contrast


def quality_filter(items, predicate=default_quality):
    """Partition ``items`` (images, or (key, image) pairs) into (kept, removed) index lists."""
    kept, removed = [], []
    for i, item in enumerate(items):
        (kept if predicate(item) else removed).append(i)
    return kept, removed


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


@dataclass
class ImageDataset:
    """A manifest with its images decoded to float32 (N, S, S, 3) in [0, 1]."""

    manifest: Manifest
    images: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels

    @property
    def name(self) -> str:
        return self.manifest.name

    @property
    def class_count(self) -> int:
        return self.manifest.class_count

    def split(self, split) -> tuple[np.ndarray, np.ndarray]:
        idx = self.manifest.indices(split)
        return self.images[idx], self.labels[idx]

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx, dtype=int)
        recs = [self.manifest.records[i] for i in idx]
        meta = {k: np.asarray(v)[idx] for k, v in self.meta.items() if len(np.asarray(v)) == len(self.images)}
        return ImageDataset(Manifest(recs, self.manifest.name, self.manifest.class_count), self.images[idx], meta)


def load_dataset(manifest_path, image_size: int, class_count: int | None = None, filter_quality: bool = False,
                 name: str | None = None) -> ImageDataset:
    """Load every image of a manifest (paths relative to the manifest's folder).

    The dataset is named after the manifest file, or after its folder when
    the file is called ``manifest.csv``.
    """
    p = Path(manifest_path)
    if name is None:
        name = p.parent.name if p.stem == "manifest" and p.parent.name else p.stem
    manifest = load_manifest(manifest_path, class_count, name)
    root = Path(manifest_path).parent
    images = []
    for r in manifest.records:
        p = Path(r.path)
        p = p if p.is_absolute() else root / p
        if not p.exists():
            raise DataError(f"image {p} listed in {manifest_path} is missing")
        images.append(preprocess(read_image(p), image_size))
    arr = np.stack(images).astype(np.float32) if images else np.zeros((0, image_size, image_size, 3), np.float32)
    ds = ImageDataset(manifest, arr)
    if filter_quality:
        kept, _ = quality_filter(ds.images)
        ds = ds.subset(kept)
    return ds


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

_DOMAINS = {
    # background rgb, texture amplitude, lesion palette (dark haemorrhage, bright exudate)
    0: (np.array([0.78, 0.36, 0.16]), 0.06, (np.array([0.35, 0.05, 0.05]), np.array([0.98, 0.92, 0.45]))),
    1: (np.array([0.30, 0.52, 0.70]), 0.10, (np.array([0.05, 0.10, 0.30]), np.array([0.85, 0.98, 0.90]))),
    2: (np.array([0.55, 0.55, 0.30]), 0.08, (np.array([0.15, 0.25, 0.05]), np.array([0.98, 0.80, 0.98]))),
    3: (np.array([0.65, 0.30, 0.45]), 0.07, (np.array([0.20, 0.02, 0.20]), np.array([0.95, 0.95, 0.70]))),
}


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic ordinal-stage generator.

    Stage ``s`` images carry a lesion count drawn uniformly from
    ``[s * lesion_step - lesion_jitter, s * lesion_step + lesion_jitter]``
    (stage 0 has none), so counts increase strictly with stage.
    """

    n_per_class: int = 40
    class_count: int = 5
    image_size: int = 32
    lesion_step: int = 3
    lesion_jitter: int = 1
    lesion_radius: tuple = (0.8, 1.6)
    exposure_sd: float = 0.05
    texture_seed: int = 0
    domain: int = 0
    seed: int = 0
    name: str = "synth"

    def lesion_range(self, stage: int) -> tuple[int, int]:
        if stage == 0:
            return 0, 0
        c = stage * self.lesion_step
        return max(1, c - self.lesion_jitter), c + self.lesion_jitter


def _record_rng(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, domain, index]))


def _texture(size: int, seed: int, domain: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, domain, 0x7E7]))
    coarse = rng.standard_normal((size // 4 + 2, size // 4 + 2))
    return ndimage.zoom(coarse, size / (size // 4 + 2), order=3)[:size, :size]


def synth_image(spec: SyntheticSpec, stage: int, index: int) -> tuple[np.ndarray, int]:
    """One image and its true lesion count; deterministic in (seed, domain, index)."""
    rng = _record_rng(spec.seed, spec.domain, index)
    base, tex_amp, palette = _DOMAINS[spec.domain % len(_DOMAINS)]
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    c = s / 2
    radius = 0.46 * s
    r2 = (yy - c) ** 2 + (xx - c) ** 2
    disc = r2 <= radius ** 2
    shade = 1.0 - 0.35 * r2 / radius ** 2
    tex = _texture(s, spec.texture_seed, spec.domain)
    exposure = max(0.2, 1.0 + rng.normal(0, spec.exposure_sd))
    img = (exposure * base)[None, None, :] * shade[..., None] + tex_amp * tex[..., None] + rng.normal(0, 0.015, (s, s, 3))
    lo, hi = spec.lesion_range(stage)
    n_les = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    for _ in range(n_les):
        ang = rng.uniform(0, 2 * np.pi)
        rad = radius * 0.8 * np.sqrt(rng.uniform(0, 1))
        ly, lx = c + rad * np.sin(ang), c + rad * np.cos(ang)
        sigma = rng.uniform(*spec.lesion_radius)
        col = palette[int(rng.integers(0, 2))]
        blob = np.exp(-((yy - ly) ** 2 + (xx - lx) ** 2) / (2 * sigma ** 2))[..., None]
        img = img * (1 - blob) + col[None, None, :] * blob
    img = np.where(disc[..., None], img, 0.0)
    img = np.clip(img, 0, 1)
    img = np.round(img * 255.0) / 255.0  # same values as a PNG round trip
    return img.astype(np.float32), n_les


def synth_generate(spec: SyntheticSpec, out_dir=None, split_ratios=(0.7, 0.15, 0.15), unlabeled: bool = False) -> ImageDataset:
    """Generate ``n_per_class`` images per stage; optionally write PNGs + manifest.csv.

    ``unlabeled=True`` tags every row UNLABELED (labels are still written
    for auditing but carry no split semantics). The true lesion counts are
    returned in ``meta["lesions"]``. In-memory images are already passed
    through :func:`preprocess`, so they match a reload of the written PNGs.
    """
    raw, images, labels, lesions, paths = [], [], [], [], []
    for stage in range(spec.class_count):
        for j in range(spec.n_per_class):
            index = stage * spec.n_per_class + j
            img, n = synth_image(spec, stage, index)
            raw.append(img)
            images.append(preprocess(img, spec.image_size))  # what load_dataset() yields for the PNG
            labels.append(stage)
            lesions.append(n)
            paths.append(f"images/{spec.name}_{index:05d}.png")
    labels = np.array(labels)
    if unlabeled:
        splits = [Split.UNLABELED] * len(labels)
    else:
        splits = list(stratified_split(labels, split_ratios, seed=zlib.crc32(f"{spec.seed}:{spec.name}".encode())))
    manifest = Manifest([Record(p, int(l), s) for p, l, s in zip(paths, labels, splits)], spec.name, spec.class_count)
    ds = ImageDataset(manifest, np.stack(images), {"lesions": np.array(lesions)})
    if out_dir is not None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        for p, img in zip(paths, raw):
            write_image(img, out / p)
        write_manifest(manifest, out / "manifest.csv")
    return ds
