"""Ground-truth manifests, image loading/preprocessing and training augmentation."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import (
    AmbiguousLabelError,
    ContractViolation,
    ImageLoadError,
    ManifestFormatError,
)

log = logging.getLogger(__name__)

# ISIC ground-truth column order; every index-based structure uses it.
CATEGORIES: tuple[tuple[str, str], ...] = (
    ("MEL", "melanoma"),
    ("NV", "melanocytic nevus"),
    ("BCC", "basal cell carcinoma"),
    ("AKIEC", "actinic keratosis / intraepithelial carcinoma"),
    ("BKL", "benign keratosis"),
    ("DF", "dermatofibroma"),
    ("VASC", "vascular lesion"),
)
CATEGORY_CODES: tuple[str, ...] = tuple(code for code, _ in CATEGORIES)
N_CATEGORIES = len(CATEGORIES)
GROUND_TRUTH_HEADER: tuple[str, ...] = ("image", *CATEGORY_CODES)

SPLITS = ("train", "val", "test")
IMAGE_SIZE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


def category_index(code: str) -> int:
    return CATEGORY_CODES.index(code)


# --------------------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    image_path: Path
    label: int
    split: str

    def __post_init__(self):
        if not 0 <= self.label < N_CATEGORIES:
            raise ValueError(f"{self.image_id}: label {self.label} outside 0..{N_CATEGORIES - 1}")
        if self.split not in SPLITS:
            raise ValueError(f"{self.image_id}: unknown split {self.split!r}")


@dataclass(frozen=True)
class Manifest:
    split: str
    records: tuple[ManifestRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise ManifestFormatError(f"duplicate image id {r.image_id!r} in {self.split} manifest")
            seen.add(r.image_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> ManifestRecord:
        return self.records[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def category_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=N_CATEGORIES).tolist()


def resolve_image_path(image_root: Path, image_id: str) -> Path:
    """``<root>/<id>.jpg``, falling back to other known suffixes when only those exist."""
    default = image_root / f"{image_id}.jpg"
    if default.exists():
        return default
    for suffix in IMAGE_SUFFIXES[1:]:
        candidate = image_root / f"{image_id}{suffix}"
        if candidate.exists():
            return candidate
    return default


def parse_manifest(csv_text: str, split: str, image_root: str | Path = ".") -> Manifest:
    """Parse ISIC-style one-hot ground truth (``image,MEL,NV,...,VASC``).

    Image files are not checked here; that happens at load time (or in
    :func:`find_unreadable_images`).
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    root = Path(image_root)
    rows = csv.reader(io.StringIO(csv_text))
    header = next(rows, None)
    if header is None or tuple(h.strip() for h in header) != GROUND_TRUTH_HEADER:
        raise ManifestFormatError(f"ground-truth header must be {','.join(GROUND_TRUTH_HEADER)}, got {header}")
    records = []
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(GROUND_TRUTH_HEADER):
            raise ManifestFormatError(f"line {lineno}: expected {len(GROUND_TRUTH_HEADER)} columns, got {len(row)}")
        image_id = row[0].strip()
        try:
            values = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise ManifestFormatError(f"line {lineno} ({image_id}): {exc}") from None
        hot = [i for i, v in enumerate(values) if v == 1.0]
        if len(hot) != 1:
            raise AmbiguousLabelError(image_id, len(hot))
        records.append(ManifestRecord(image_id, resolve_image_path(root, image_id), hot[0], split))
    return Manifest(split, tuple(records))


def read_manifest(path: str | Path, split: str, image_root: str | Path) -> Manifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"), split, image_root)


def format_manifest(manifest: Manifest | Sequence[ManifestRecord]) -> str:
    """Serialize back to the one-hot ground-truth CSV format."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(GROUND_TRUTH_HEADER)
    for r in manifest:
        writer.writerow([r.image_id, *("1.0" if i == r.label else "0.0" for i in range(N_CATEGORIES))])
    return out.getvalue()


def find_unreadable_images(manifest: Manifest) -> list[str]:
    """Ids whose image file is missing or does not decode."""
    bad = []
    for r in manifest:
        try:
            with Image.open(r.image_path) as im:
                im.verify()
        except (OSError, UnidentifiedImageError):
            bad.append(r.image_id)
    return bad


# --------------------------------------------------------------------------- images


@dataclass
class ImageTensor:
    """Channel-major float32 image ``(3, H, W)`` or batch ``(N, 3, H, W)``."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.data.ndim not in (3, 4) or self.data.shape[-3] != 3:
            raise ValueError(f"expected (3, H, W) or (N, 3, H, W), got {self.data.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.data.shape[-2], self.data.shape[-1]


def resize_bilinear(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers (no antialiasing)."""
    if data.shape[-2:] == (height, width):
        return data.copy()
    t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))
    squeeze = t.ndim == 3
    if squeeze:
        t = t.unsqueeze(0)
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False, antialias=False)
    out = out.squeeze(0) if squeeze else out
    return out.numpy()


def load_and_resize(path: str | Path, side: int = IMAGE_SIZE) -> ImageTensor:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "LA", "I", "I;16", "F", "1"):
                log.warning("%s is grayscale (mode %s); replicating to 3 channels", path, im.mode)
                gray = np.asarray(im.convert("L"))
                arr = np.stack([gray] * 3, axis=-1)
            else:
                arr = np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise ImageLoadError(path, "file not found") from None
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageLoadError(path, str(exc)) from None
    chw = arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    return ImageTensor(resize_bilinear(chw, side, side), normalized=False)


def _channel_vec(values, n: int = 3) -> np.ndarray:
    v = np.asarray(values, dtype=np.float32).reshape(-1)
    if v.shape != (n,):
        raise ValueError(f"expected {n} per-channel values, got {values}")
    return v.reshape(n, 1, 1)


def normalize(img: ImageTensor, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> ImageTensor:
    if img.normalized:
        raise ContractViolation("image is already normalized")
    s = _channel_vec(std)
    if np.any(s == 0):
        raise ValueError("std components must be nonzero")
    return ImageTensor(((img.data - _channel_vec(mean)) / s).astype(np.float32), normalized=True)


def denormalize(img: ImageTensor, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> ImageTensor:
    if not img.normalized:
        raise ContractViolation("image is not normalized")
    return ImageTensor((img.data * _channel_vec(std) + _channel_vec(mean)).astype(np.float32), normalized=False)


# --------------------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    zoom_min: float = 1.0
    zoom_max: float = 1.1

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if not 1.0 <= self.zoom_min <= self.zoom_max:
            raise ValueError(f"need 1.0 <= zoom_min <= zoom_max, got {self.zoom_min}, {self.zoom_max}")

    @property
    def is_identity(self) -> bool:
        return self.p_hflip == 0 and self.p_vflip == 0 and self.zoom_max == 1.0


IDENTITY_POLICY = AugmentationPolicy(0.0, 0.0, 1.0, 1.0)


def hflip(data: np.ndarray) -> np.ndarray:
    return data[..., ::-1].copy()


def vflip(data: np.ndarray) -> np.ndarray:
    return data[..., ::-1, :].copy()


def zoom(data: np.ndarray, scale: float) -> np.ndarray:
    """Scale up isotropically by ``scale`` then center-crop back to the input size."""
    h, w = data.shape[-2:]
    zh, zw = round(h * scale), round(w * scale)
    if (zh, zw) == (h, w):
        return data.copy()
    big = resize_bilinear(data, zh, zw)
    top, left = (zh - h) // 2, (zw - w) // 2
    return np.ascontiguousarray(big[..., top:top + h, left:left + w])


class AugmentationDraw(NamedTuple):
    hflip: bool
    vflip: bool
    scale: float


def sample_augmentation(policy: AugmentationPolicy, rng: np.random.Generator) -> AugmentationDraw:
    # all three draws happen unconditionally so the stream layout is fixed
    do_h = rng.random() < policy.p_hflip
    do_v = rng.random() < policy.p_vflip
    return AugmentationDraw(bool(do_h), bool(do_v), float(rng.uniform(policy.zoom_min, policy.zoom_max)))


def augment(img: ImageTensor, policy: AugmentationPolicy, rng: np.random.Generator) -> ImageTensor:
    do_h, do_v, scale = sample_augmentation(policy, rng)
    data = img.data
    if do_h:
        data = hflip(data)
    if do_v:
        data = vflip(data)
    data = zoom(data, scale)
    return ImageTensor(data, normalized=img.normalized)


# --------------------------------------------------------------------------- batching


class Batch(NamedTuple):
    images: ImageTensor
    labels: np.ndarray
    image_ids: list[str]


class Batches(Sequence[Batch]):
    """Lazily materialized, fully seeded batch order for one epoch.

    The permutation and a per-epoch augmentation key are drawn from ``rng`` up
    front; each sample's augmentation stream is keyed by its manifest index, so
    any batch can be built independently and in parallel.
    """

    def __init__(self, manifest: Manifest, batch_size: int, rng: np.random.Generator, augmenting: bool,
                 policy: AugmentationPolicy | None = None, side: int = IMAGE_SIZE,
                 mean=IMAGENET_MEAN, std=IMAGENET_STD, shuffle: bool = True, workers: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(manifest) == 0:
            raise ValueError("cannot batch an empty manifest")
        self.manifest = manifest
        self.batch_size = batch_size
        self.order = rng.permutation(len(manifest)) if shuffle else np.arange(len(manifest))
        self.aug_key = int(rng.integers(0, 2**63 - 1))
        self.augmenting = augmenting
        self.policy = policy or AugmentationPolicy()
        self.side = side
        self.mean, self.std = mean, std
        self.workers = workers

    def __len__(self) -> int:
        return math.ceil(len(self.manifest) / self.batch_size)

    def indices(self, i: int) -> np.ndarray:
        return self.order[i * self.batch_size:(i + 1) * self.batch_size]

    def _sample(self, index: int) -> np.ndarray:
        img = load_and_resize(self.manifest[index].image_path, self.side)
        if self.augmenting:
            img = augment(img, self.policy, np.random.default_rng([self.aug_key, int(index)]))
        return normalize(img, self.mean, self.std).data

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        idx = self.indices(i)
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                arrays = list(pool.map(self._sample, idx))
        else:
            arrays = [self._sample(j) for j in idx]
        records = [self.manifest[j] for j in idx]
        return Batch(
            ImageTensor(np.stack(arrays), normalized=True),
            np.array([r.label for r in records], dtype=np.int64),
            [r.image_id for r in records],
        )


def make_batches(manifest: Manifest, batch_size: int, rng: np.random.Generator, augmenting: bool,
                 policy: AugmentationPolicy | None = None, **kwargs) -> Batches:
    return Batches(manifest, batch_size, rng, augmenting, policy, **kwargs)
