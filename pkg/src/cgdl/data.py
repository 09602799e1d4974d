"""Image sets: IDX I/O, synthetic template classes, outliers and known/unknown splits."""

from __future__ import annotations

import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .errors import ConfigError, FormatError
from .numerics import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MIN_TEMPLATE_DISTANCE = 0.15  # fraction of pixels
DEFAULT_NOISED_SCALE = 0.5

OutlierKind = Literal["uniform_noise", "noised_known", "unseen_templates"]
OUTLIER_KINDS = ("uniform_noise", "noised_known", "unseen_templates")


@dataclass
class LabeledImageSet:
    images: np.ndarray  # N x H x W, values in [0, 1]
    labels: np.ndarray  # N ints
    class_names: list[str]
    index: np.ndarray | None = None  # positions in the set this one was cut from
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim == 2 and self.images.shape[0] == 0:
            self.images = self.images.reshape(0, 0, 0)
        if self.images.ndim != 3:
            raise ConfigError(f"images must be N x H x W, got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConfigError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ConfigError("labels must index into class_names")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:])

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, idx) -> LabeledImageSet:
        idx = np.asarray(idx, dtype=np.int64)
        base = self.index if self.index is not None else np.arange(len(self))
        return LabeledImageSet(
            self.images[idx], self.labels[idx], list(self.class_names), base[idx], dict(self.meta)
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------- IDX format


def _open(path: Path, mode: str):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def _read_header(buf: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < 4:
        raise FormatError("file too short for magic number", offset=len(buf), path=path)
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise FormatError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0, path=path)
    if len(buf) < need:
        raise FormatError("truncated dimension header", offset=len(buf), path=path)
    return struct.unpack_from(f">{ndim}I", buf, 4)


def read_idx_images(path) -> np.ndarray:
    path = Path(path)
    with _open(path, "rb") as fh:
        buf = fh.read()
    n, rows, cols = _read_header(buf, IDX_IMAGES_MAGIC, 3, path)
    expected = 16 + n * rows * cols
    if len(buf) < expected:
        raise FormatError(
            f"truncated pixel data: {n}x{rows}x{cols} needs {expected} bytes, file has {len(buf)}",
            offset=len(buf),
            path=path,
        )
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pixels.reshape(n, rows, cols).astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    path = Path(path)
    with _open(path, "rb") as fh:
        buf = fh.read()
    (n,) = _read_header(buf, IDX_LABELS_MAGIC, 1, path)
    if len(buf) < 8 + n:
        raise FormatError(
            f"truncated label data: {n} labels need {8 + n} bytes, file has {len(buf)}",
            offset=len(buf),
            path=path,
        )
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, class_names: list[str] | None = None) -> LabeledImageSet:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels",
            offset=4,
            path=str(labels_path),
        )
    if class_names is None:
        k = int(labels.max()) + 1 if labels.size else 0
        class_names = [str(i) for i in range(k)]
    return LabeledImageSet(images, labels, class_names)


def save_idx(dataset: LabeledImageSet, images_path, labels_path) -> None:
    """Write an IDX pair. Pixels are quantised to bytes (x * 255, rounded)."""
    n = len(dataset)
    rows, cols = dataset.images.shape[1:] if n else (0, 0)
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    if dataset.labels.size and dataset.labels.max() > 255:
        raise ConfigError("IDX labels are single bytes; class ids must be < 256")
    for path in (images_path, labels_path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    with _open(Path(images_path), "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with _open(Path(labels_path), "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def quantize(dataset: LabeledImageSet) -> LabeledImageSet:
    """Round pixels to the byte grid used by IDX files."""
    images = np.rint(dataset.images * 255.0) / 255.0
    return LabeledImageSet(images, dataset.labels, list(dataset.class_names), dataset.index, dict(dataset.meta))


# ---------------------------------------------------------------- templates


def _candidate_templates(side: int) -> list[tuple[str, np.ndarray]]:
    t = max(1, round(side / 5))
    r = np.arange(side)[:, None]
    c = np.arange(side)[None, :]
    lo, mid, hi = 1, (side - t) // 2, side - 1 - t
    half = side // 2

    def band(coord, start):
        return (coord >= start) & (coord < start + t)

    shapes = {
        "hbar_top": band(r, lo) & (c >= 0),
        "hbar_mid": band(r, mid) & (c >= 0),
        "hbar_bottom": band(r, hi) & (c >= 0),
        "vbar_left": band(c, lo) & (r >= 0),
        "vbar_mid": band(c, mid) & (r >= 0),
        "vbar_right": band(c, hi) & (r >= 0),
        "diagonal": np.abs(r - c) < t,
        "antidiagonal": np.abs(r + c - (side - 1)) < t,
        "block_top_left": (r < half) & (c < half),
        "block_top_right": (r < half) & (c >= side - half),
        "block_bottom_left": (r >= side - half) & (c < half),
        "block_bottom_right": (r >= side - half) & (c >= side - half),
        "frame": (r == 0) | (r == side - 1) | (c == 0) | (c == side - 1),
        "cross": band(r, mid) | band(c, mid),
        "disc": (r - (side - 1) / 2) ** 2 + (c - (side - 1) / 2) ** 2 <= (side / 3.2) ** 2,
        "checker": ((r // max(2, t)) + (c // max(2, t))) % 2 == 0,
    }
    return [(name, np.broadcast_to(mask, (side, side)).astype(np.float64)) for name, mask in shapes.items()]


def template_bank(image_side: int = 10) -> list[tuple[str, np.ndarray]]:
    """Geometric class templates, pairwise L1-separated by at least 15% of the pixels.

    Candidates are admitted greedily in a fixed order, so the bank is a pure
    function of ``image_side``.
    """
    if image_side < 6:
        raise ConfigError("image_side must be at least 6")
    bound = MIN_TEMPLATE_DISTANCE * image_side * image_side
    bank: list[tuple[str, np.ndarray]] = []
    for name, img in _candidate_templates(image_side):
        if img.sum() == 0:
            continue
        if all(np.abs(img - other).sum() >= bound for _, other in bank):
            bank.append((name, img))
    return bank


def _render(templates: list[np.ndarray], labels: np.ndarray, noise_sigma: float, rng) -> np.ndarray:
    base = np.stack(templates)[labels]
    if noise_sigma > 0:
        base = base + rng.normal(0.0, noise_sigma, base.shape)
    return np.clip(base, 0.0, 1.0)


def generate_synthetic(
    num_classes: int,
    per_class: int,
    image_side: int = 10,
    noise_sigma: float = 0.1,
    seed: int = 0,
    template_names: Iterable[str] | None = None,
) -> LabeledImageSet:
    """One class per geometric template plus clipped Gaussian pixel noise.

    Classes use the first ``num_classes`` templates of :func:`template_bank`
    unless ``template_names`` picks them explicitly. Samples are ordered by
    class.
    """
    if per_class < 1 or num_classes < 1:
        raise ConfigError("num_classes and per_class must be positive")
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")
    bank = dict(template_bank(image_side))
    names = list(template_names) if template_names is not None else list(bank)[:num_classes]
    if template_names is not None and len(names) != num_classes:
        raise ConfigError("template_names must list exactly num_classes templates")
    if len(names) < num_classes:
        raise ConfigError(
            f"only {len(bank)} templates available at image_side={image_side}, asked for {num_classes}"
        )
    missing = [n for n in names if n not in bank]
    if missing:
        raise ConfigError(f"unknown templates: {missing}")
    rng = make_rng(seed, "synthetic")
    labels = np.repeat(np.arange(num_classes), per_class)
    images = _render([bank[n] for n in names], labels, noise_sigma, rng)
    meta = {
        "generator": "synthetic",
        "seed": int(seed),
        "noise_sigma": float(noise_sigma),
        "image_side": int(image_side),
        "templates": {str(i): n for i, n in enumerate(names)},
    }
    return LabeledImageSet(images, labels, names, meta=meta)


def make_outliers(
    kind: str,
    base: LabeledImageSet | None = None,
    count: int = 100,
    seed: int = 0,
    *,
    image_side: int | None = None,
    noise_scale: float = DEFAULT_NOISED_SCALE,
    noise_sigma: float | None = None,
    num_templates: int | None = None,
) -> LabeledImageSet:
    """Build an outlier set; every sample in it is meant to be treated as unknown.

    ``uniform_noise``: i.i.d. U[0, 1] pixels.
    ``noised_known``: ``count`` images drawn from ``base`` plus
    ``noise_scale * U[0, 1]`` noise, clipped to [0, 1].
    ``unseen_templates``: synthetic classes from templates not used by ``base``.
    """
    if kind not in OUTLIER_KINDS:
        raise ConfigError(f"unknown outlier kind {kind!r}; valid: {', '.join(OUTLIER_KINDS)}")
    if count < 0:
        raise ConfigError("count must be >= 0")
    rng = make_rng(seed, "outliers", kind)
    if base is not None:
        side = base.images.shape[1]
    elif image_side is not None:
        side = image_side
    elif kind != "noised_known":
        raise ConfigError(f"{kind} needs either a base set or image_side")
    meta = {"generator": "outliers", "kind": kind, "seed": int(seed)}

    if kind == "uniform_noise":
        images = rng.uniform(0.0, 1.0, (count, side, side))
        return LabeledImageSet(images, np.zeros(count, dtype=np.int64), ["noise"], meta=meta)

    if kind == "noised_known":
        if base is None or len(base) == 0:
            raise ConfigError("noised_known needs a non-empty base set")
        pick = rng.integers(0, len(base), count)
        noise = rng.uniform(0.0, 1.0, (count, *base.image_shape))
        images = np.clip(base.images[pick] + noise_scale * noise, 0.0, 1.0)
        meta["noise_scale"] = float(noise_scale)
        return LabeledImageSet(images, base.labels[pick], list(base.class_names), meta=meta)

    known = set(base.class_names) if base is not None else set()
    unseen = [name for name, _ in template_bank(side) if name not in known]
    if num_templates is not None:
        if num_templates > len(unseen):
            raise ConfigError(f"only {len(unseen)} unseen templates available, asked for {num_templates}")
        unseen = unseen[:num_templates]
    if not unseen:
        raise ConfigError("no unseen templates left")
    if noise_sigma is None:
        noise_sigma = float(base.meta.get("noise_sigma", 0.1)) if base is not None else 0.1
    labels = np.arange(count) % len(unseen)
    labels.sort()
    bank = dict(template_bank(side))
    images = _render([bank[n] for n in unseen], labels, noise_sigma, rng)
    meta.update({"noise_sigma": float(noise_sigma), "templates": {str(i): n for i, n in enumerate(unseen)}})
    return LabeledImageSet(images, labels, unseen, meta=meta)


# ---------------------------------------------------------------- splits


@dataclass
class SplitSpec:
    known_class_ids: tuple[int, ...]
    unknown_class_ids: tuple[int, ...] = ()
    seed: int = 0
    test_fraction: float = 1.0 / 6.0
    unknown_per_class: int | None = None

    def __post_init__(self):
        self.known_class_ids = tuple(int(k) for k in self.known_class_ids)
        self.unknown_class_ids = tuple(int(k) for k in self.unknown_class_ids)
        if not self.known_class_ids:
            raise ConfigError("known_class_ids must not be empty")
        overlap = set(self.known_class_ids) & set(self.unknown_class_ids)
        if overlap:
            raise ConfigError(f"class ids {sorted(overlap)} are both known and unknown")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")


def split(
    dataset: LabeledImageSet, spec: SplitSpec
) -> tuple[LabeledImageSet, LabeledImageSet, LabeledImageSet]:
    """Partition into (train_known, test_known, test_unknown).

    Known classes are relabelled ``0..K-1`` in the order given by
    ``spec.known_class_ids``; the original names are kept in ``class_names``.
    Each known class sends ``ceil(test_fraction * n)`` shuffled samples to the
    test side. Unknown classes go entirely to ``test_unknown`` (or
    ``unknown_per_class`` of them) with label ``K``.
    """
    ids = set(range(dataset.num_classes))
    bad = [k for k in spec.known_class_ids + spec.unknown_class_ids if k not in ids]
    if bad:
        raise ConfigError(f"class ids {bad} not present in dataset")
    rng = make_rng(spec.seed, "split")
    K = len(spec.known_class_ids)
    train_idx, test_idx, unk_idx = [], [], []
    for k in spec.known_class_ids:
        members = rng.permutation(np.flatnonzero(dataset.labels == k))
        n_test = math.ceil(spec.test_fraction * len(members))
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    for k in spec.unknown_class_ids:
        members = rng.permutation(np.flatnonzero(dataset.labels == k))
        if spec.unknown_per_class is not None:
            members = members[: spec.unknown_per_class]
        unk_idx.append(members)

    remap = np.full(dataset.num_classes, K, dtype=np.int64)
    remap[list(spec.known_class_ids)] = np.arange(K)
    known_names = [dataset.class_names[k] for k in spec.known_class_ids]

    def cut(parts, names, unknown=False):
        idx = np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
        sub = dataset.subset(idx)
        labels = np.full(len(idx), len(names) - 1, dtype=np.int64) if unknown else remap[sub.labels]
        return LabeledImageSet(sub.images.reshape(len(idx), *dataset.image_shape), labels, names, sub.index, sub.meta)

    return (
        cut(train_idx, known_names),
        cut(test_idx, known_names),
        cut(unk_idx, known_names + ["unknown"], unknown=True),
    )


def concat_sets(sets: list[LabeledImageSet], class_names: list[str] | None = None) -> LabeledImageSet:
    """Stack sets with identical image shapes; labels are kept as-is."""
    sets = [s for s in sets if len(s)]
    if not sets:
        return LabeledImageSet(np.zeros((0, 0, 0)), np.zeros(0), class_names or [])
    names = class_names or max((s.class_names for s in sets), key=len)
    return LabeledImageSet(
        np.concatenate([s.images for s in sets]),
        np.concatenate([s.labels for s in sets]),
        list(names),
    )


def write_manifest(path, dataset: LabeledImageSet, extra: dict | None = None) -> None:
    """Structured-text (JSON) description of how a set was generated."""
    doc = {
        "class_names": {str(i): n for i, n in enumerate(dataset.class_names)},
        "counts": {str(i): int(c) for i, c in enumerate(dataset.class_counts())},
        "num_samples": len(dataset),
        **dataset.meta,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
