"""Synthetic chest-film-like images with exact lesion masks, plus real-data loading.

Each synthetic class draws one lesion family with its own shape and location
prior. The clinical names are only labels; nothing here models anatomy.

=============  ==========================================================
class          lesion
=============  ==========================================================
atelectasis    thin elongated band, random tilt, upper/mid fields
cardiomegaly   large disc just below the image centre
consolidation  irregular blob (union of small ellipses), anywhere lateral
effusion       wedge sitting on the lower edge, left or right corner
=============  ==========================================================
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .utils import bilinear_matrix

DEFAULT_CLASSES = ("atelectasis", "cardiomegaly", "consolidation", "effusion")
LESION_KINDS = ("band", "disc", "blob", "wedge")


@dataclass
class LesionGenerator:
    """Shape family and parameter ranges for one class (sizes in pixels)."""

    kind: str
    size_range: Tuple[float, float]
    intensity_range: Tuple[float, float] = (0.18, 0.35)

    def __post_init__(self):
        if self.kind not in LESION_KINDS:
            raise ValueError(f"unknown lesion kind {self.kind!r}; expected one of {LESION_KINDS}")
        lo, hi = self.size_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"{self.kind}: invalid size_range {self.size_range}")
        ilo, ihi = self.intensity_range
        if ilo <= 0 or ihi < ilo:
            raise ValueError(f"{self.kind}: invalid intensity_range {self.intensity_range}")


def default_generators() -> List[LesionGenerator]:
    return [
        LesionGenerator("band", (5.0, 8.0)),
        LesionGenerator("disc", (4.5, 6.0)),
        LesionGenerator("blob", (2.5, 4.0)),
        LesionGenerator("wedge", (5.0, 8.0)),
    ]


@dataclass
class DatasetSpec:
    n_samples: int = 600
    image_size: int = 32
    class_generators: List[LesionGenerator] = field(default_factory=default_generators)
    class_names: Optional[List[str]] = None
    label_marginals: Optional[List[float]] = None
    background_level: float = 0.35
    background_amplitude: float = 0.12
    pixel_noise: float = 0.04
    seed: int = 0

    def __post_init__(self):
        self.class_generators = [g if isinstance(g, LesionGenerator) else LesionGenerator(**g)
                                 for g in self.class_generators]
        c = len(self.class_generators)
        if self.class_names is None:
            self.class_names = list(DEFAULT_CLASSES[:c]) if c <= len(DEFAULT_CLASSES) else [
                f"class{i}" for i in range(c)]
        if self.label_marginals is None:
            self.label_marginals = [0.4] * c

    @property
    def num_classes(self) -> int:
        return len(self.class_generators)

    def validate(self) -> "DatasetSpec":
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        c = self.num_classes
        if c < 2:
            raise ValueError("need at least two classes")
        if len(self.class_names) != c or len(self.label_marginals) != c:
            raise ValueError("class_names and label_marginals must have one entry per generator")
        if any(not 0.0 <= p <= 1.0 for p in self.label_marginals):
            raise ValueError("label_marginals must lie in [0, 1]")
        limit = self.image_size / 2 - 2
        for g in self.class_generators:
            if g.size_range[1] > limit:
                raise ValueError(f"{g.kind}: size {g.size_range[1]} too large for "
                                 f"{self.image_size}px images (max {limit})")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    masks: Dict[int, np.ndarray]
    id: str


@dataclass
class Dataset:
    """Array-of-fields container; ``masks[i, c]`` is meaningful where ``mask_valid[i, c]``."""

    images: np.ndarray          # (N, H, W) in [0, 1]
    labels: np.ndarray          # (N, C) of 0/1
    masks: np.ndarray           # (N, C, H, W) bool
    mask_valid: np.ndarray      # (N, C) bool
    ids: List[str]
    class_names: Tuple[str, ...]

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.labels) == len(self.masks) == len(self.mask_valid) == len(self.ids) == n):
            raise ValueError("dataset fields disagree on sample count")
        if len(set(self.ids)) != n:
            raise ValueError("sample ids must be unique")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> Sample:
        masks = {c: self.masks[i, c] for c in np.flatnonzero(self.mask_valid[i])}
        return Sample(self.images[i], self.labels[i], masks, self.ids[i])

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=int)
        return Dataset(self.images[index], self.labels[index], self.masks[index],
                       self.mask_valid[index], [self.ids[i] for i in index], self.class_names)

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(images, self.labels, self.masks, self.mask_valid, self.ids,
                       self.class_names)

    def grid_masks(self, grid: int, binarize: bool = False) -> np.ndarray:
        return downsample_mask(self.masks, grid, binarize=binarize)


# -- synthetic generation ----------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v


def _render_lesion(gen: LesionGenerator, size: int, rng: np.random.Generator):
    """Returns (mask, profile); profile in [0, 1] is nonzero exactly on the mask."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    r = rng.uniform(*gen.size_range)
    margin = 2.0
    if gen.kind == "band":
        half_len, half_w = r, rng.uniform(1.2, 1.8)
        theta = rng.uniform(-0.5, 0.5)
        side = rng.choice([0.28, 0.72])
        cx = size * side + rng.uniform(-1.5, 1.5)
        cy = size * rng.uniform(0.3, 0.5)
        d = _ellipse(yy, xx, cy, cx, half_w, half_len, theta)
    elif gen.kind == "disc":
        cy = size * 0.58 + rng.uniform(-1.0, 1.0)
        cx = size * 0.5 + rng.uniform(-1.0, 1.0)
        d = _ellipse(yy, xx, cy, cx, r * rng.uniform(0.85, 1.0), r)
    elif gen.kind == "blob":
        side = rng.choice([0.25, 0.75])
        cx = size * side + rng.uniform(-2.5, 2.5)
        cy = size * rng.uniform(0.3, 0.7)
        d = _ellipse(yy, xx, cy, cx, r, r * rng.uniform(0.7, 1.0))
        for _ in range(2):
            oy, ox = rng.uniform(-r, r, size=2) * 0.7
            d = np.minimum(d, _ellipse(yy, xx, cy + oy, cx + ox, 0.6 * r, 0.6 * r))
    else:  # wedge on the lower edge
        left = rng.random() < 0.5
        height, width = r, r * rng.uniform(1.3, 1.8)
        base_y = size - margin
        x0 = margin if left else size - margin
        # 0 on the hypotenuse, negative inside the triangle
        fx = (xx - x0) / width if left else (x0 - xx) / width
        fy = (base_y - yy) / height
        inside = (fx >= 0) & (fy >= 0) & (fx + fy <= 1.0)
        d = np.where(inside, fx + fy, 2.0)
    mask = d <= 1.0
    profile = np.where(mask, 1.0 - 0.4 * np.clip(d, 0.0, 1.0), 0.0)
    return mask, profile


def _touches_border(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


def _background(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    coarse = rng.standard_normal((4, 4))
    m = bilinear_matrix(4, size)
    smooth = m @ coarse @ m.T
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    # two darker lung fields, brighter mediastinum
    lungs = (np.exp(-(((xx - 0.28) / 0.16) ** 2 + ((yy - 0.5) / 0.3) ** 2))
             + np.exp(-(((xx - 0.72) / 0.16) ** 2 + ((yy - 0.5) / 0.3) ** 2)))
    img = spec.background_level - 0.12 * lungs + spec.background_amplitude * smooth / 2.0
    return img + spec.pixel_noise * rng.standard_normal((size, size))


def generate_sample(spec: DatasetSpec, index: int):
    """One sample, seeded only by ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    size, c = spec.image_size, spec.num_classes
    labels = (rng.random(c) < np.asarray(spec.label_marginals)).astype(np.int8)
    image = _background(spec, rng)
    masks = np.zeros((c, size, size), dtype=bool)
    for k in np.flatnonzero(labels):
        gen = spec.class_generators[k]
        for _ in range(20):
            mask, profile = _render_lesion(gen, size, rng)
            if mask.any() and not _touches_border(mask):
                break
        else:
            raise ValueError(f"{gen.kind}: could not place a lesion inside the image")
        image = image + rng.uniform(*gen.intensity_range) * profile
        masks[k] = mask
    return np.clip(image, 0.0, 1.0), labels, masks


def generate_synthetic(spec: DatasetSpec, start: int = 0) -> Dataset:
    spec.validate()
    n, c, size = spec.n_samples, spec.num_classes, spec.image_size
    images = np.empty((n, size, size))
    labels = np.empty((n, c), dtype=np.int8)
    masks = np.empty((n, c, size, size), dtype=bool)
    for i in range(n):
        images[i], labels[i], masks[i] = generate_sample(spec, start + i)
    ids = [f"syn-{spec.seed}-{start + i:06d}" for i in range(n)]
    return Dataset(images, labels, masks, labels.astype(bool), ids, tuple(spec.class_names))


# -- masks, splits, noise -------------------------------------------------------------

def downsample_mask(mask, grid: int, binarize: bool = False) -> np.ndarray:
    """Fraction of positive pixels per patch: (..., H, W) -> (..., grid, grid)."""
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    if grid <= 0 or h % grid or w % grid:
        raise ValueError(f"downsample_mask: {h}x{w} is not divisible into a {grid}x{grid} grid")
    ph, pw = h // grid, w // grid
    blocks = mask.astype(np.float64).reshape(mask.shape[:-2] + (grid, ph, grid, pw))
    frac = blocks.sum(axis=(-3, -1)) / (ph * pw)
    return (frac >= 0.5).astype(np.float64) if binarize else frac


def split(dataset: Dataset, val_fraction: float = 0.2, seed: int = 0):
    """Seeded shuffle into (train, val); val gets round(val_fraction * N) samples."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n = len(dataset)
    n_val = int(np.floor(val_fraction * n + 0.5))
    if n_val == 0 or n_val == n:
        raise ValueError(f"split of {n} samples at {val_fraction} leaves an empty partition")
    order = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def _id_key(image_id) -> int:
    return zlib.crc32(str(image_id).encode("utf-8"))


def add_gaussian_noise(image, noise: NoiseSpec, image_id="") -> np.ndarray:
    """``clip(image + N(0, sigma^2), 0, 1)``, reproducible per (seed, image id)."""
    image = np.asarray(image, dtype=np.float64)
    if noise.sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if noise.sigma == 0:
        return image.copy()
    rng = np.random.default_rng([noise.seed, _id_key(image_id)])
    return np.clip(image + rng.normal(0.0, noise.sigma, size=image.shape), 0.0, 1.0)


def perturb(dataset: Dataset, noise: NoiseSpec) -> Dataset:
    if noise.sigma == 0:
        return dataset
    noisy = np.stack([add_gaussian_noise(img, noise, i)
                      for img, i in zip(dataset.images, dataset.ids)])
    return dataset.with_images(noisy)


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    names = parts[0].class_names
    if any(p.class_names != names for p in parts):
        raise ValueError("cannot concatenate datasets with different classes")
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.masks for p in parts]),
                   np.concatenate([p.mask_valid for p in parts]),
                   [i for p in parts for i in p.ids], names)


# -- portable on-disk format (PGM + JSON manifest) -------------------------------------

def _read_pgm(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            raise ValueError(f"{path}: expected a grayscale PGM, got mode {im.mode}")
        return np.asarray(im.convert("L"), dtype=np.uint8)


def _write_pgm(path: Path, values: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(values.astype(np.uint8), mode="L").save(path, format="PPM")


def load_manifest(path) -> Dataset:
    """Load ``{"classes": [...], "samples": [{id, image, labels, masks}, ...]}``.

    Paths are relative to the manifest. Masks are binarised at > 127; classes
    without a mask file are recorded as unavailable.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    if isinstance(doc, list):
        raise ValueError(f"{path}: manifest needs a header object with 'classes'")
    classes = tuple(doc["classes"])
    entries = doc["samples"]
    if not entries:
        raise ValueError(f"{path}: manifest has no samples")
    root = path.parent
    images, labels, masks, valid, ids = [], [], [], [], []
    for e in entries:
        img = _read_pgm(root / e["image"])
        if img.shape[0] != img.shape[1]:
            raise ValueError(f"{e['id']}: images must be square, got {img.shape}")
        lab = np.asarray(e["labels"], dtype=np.int8)
        if lab.shape != (len(classes),) or not np.all((lab == 0) | (lab == 1)):
            raise ValueError(f"{e['id']}: labels must be {len(classes)} values of 0/1")
        m = np.zeros((len(classes),) + img.shape, dtype=bool)
        ok = np.zeros(len(classes), dtype=bool)
        for name, mpath in (e.get("masks") or {}).items():
            if name not in classes:
                raise ValueError(f"{e['id']}: mask for unknown class {name!r}")
            k = classes.index(name)
            mk = _read_pgm(root / mpath)
            if mk.shape != img.shape:
                raise ValueError(f"{e['id']}: mask {name} shape {mk.shape} != image {img.shape}")
            m[k] = mk > 127
            ok[k] = m[k].any()
        images.append(img.astype(np.float64) / 255.0)
        labels.append(lab)
        masks.append(m)
        valid.append(ok)
        ids.append(str(e["id"]))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"{path}: images have differing sizes {sorted(shapes)}")
    return Dataset(np.stack(images), np.stack(labels), np.stack(masks), np.stack(valid), ids,
                   classes)


def save_manifest(dataset: Dataset, directory, name: str = "manifest.json") -> Path:
    """Write images and masks as 8-bit PGM with a JSON manifest."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    samples = []
    for i, sid in enumerate(dataset.ids):
        img_rel = f"images/{sid}.pgm"
        _write_pgm(directory / img_rel, np.round(dataset.images[i] * 255.0))
        mask_refs = {}
        for k in np.flatnonzero(dataset.mask_valid[i]):
            rel = f"masks/{sid}__{dataset.class_names[k]}.pgm"
            _write_pgm(directory / rel, dataset.masks[i, k] * 255)
            mask_refs[dataset.class_names[k]] = rel
        samples.append({"id": sid, "image": img_rel,
                        "labels": [int(v) for v in dataset.labels[i]], "masks": mask_refs})
    out = directory / name
    out.write_text(json.dumps({"classes": list(dataset.class_names), "samples": samples},
                              indent=1))
    return out
