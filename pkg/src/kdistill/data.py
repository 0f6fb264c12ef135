"""Dataset ingestion, splitting, class weights, augmentation and batching.

Corpora follow the ISIC ground-truth layout::

    <root>/manifest.csv   image,<class_1>,...,<class_C>  (one-hot rows)
    <root>/images/<image>.png|.jpg
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image

__all__ = [
    "LabeledImageSet",
    "MalformedManifestError",
    "SplitSpec",
    "AugmentPolicy",
    "load_dataset",
    "split_indices",
    "split_dataset",
    "class_weights",
    "augment",
    "hflip",
    "vflip",
    "adjust_brightness",
    "epoch_batches",
    "batch_iterator",
    "view_batch",
    "make_fixture",
    "ISIC_CLASSES",
]

ISIC_CLASSES = ["MEL", "NV", "BCC", "AK", "BKL", "DF", "VASC", "SCC"]


class MalformedManifestError(ValueError):
    pass


@dataclass
class LabeledImageSet:
    """Image references with integer labels.

    ``items`` holds ``(path, label, metadata)`` triples. Decoded images are
    cached per (path, size) and shared between subsets of the same corpus.
    """

    items: List[Tuple[Path, int, Optional[dict]]]
    class_names: List[str]
    _cache: Dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        c = len(self.class_names)
        for path, label, _ in self.items:
            if not 0 <= label < c:
                raise ValueError(f"label {label} of {path} outside [0, {c})")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label, _ in self.items], dtype=np.int64)

    @property
    def counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, indices: Sequence[int]) -> "LabeledImageSet":
        return LabeledImageSet([self.items[i] for i in indices], list(self.class_names), self._cache)

    def image(self, i: int, size: Tuple[int, int]) -> torch.Tensor:
        """Image ``i`` as a float (3, H, W) tensor in [0, 1], resized to ``size``."""
        path = self.items[i][0]
        key = (str(path), tuple(size))
        if key not in self._cache:
            with Image.open(path) as im:
                im = im.convert("RGB")
                h, w = size
                if im.size != (w, h):
                    im = im.resize((w, h), Image.BILINEAR)
                self._cache[key] = TF.pil_to_tensor(im).float().div(255.0)
        return self._cache[key]


def _find_image(root: Path, name: str) -> Optional[Path]:
    for folder in (root / "images", root):
        for ext in (".png", ".jpg", ".jpeg", ""):
            p = folder / f"{name}{ext}"
            if p.is_file():
                return p
    return None


def load_dataset(root, manifest=None) -> LabeledImageSet:
    """Read a one-hot manifest and resolve every image under ``root``.

    Raises:
        FileNotFoundError: an image listed in the manifest is missing.
        MalformedManifestError: bad header or a row without exactly one positive.
    """
    root = Path(root)
    manifest = Path(manifest) if manifest is not None else root / "manifest.csv"
    if not manifest.is_absolute() and not manifest.exists():
        manifest = root / manifest
    with open(manifest, newline="", encoding="utf-8-sig") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 3 or rows[0][0].strip() != "image":
        raise MalformedManifestError(f"{manifest}: header must be 'image,<class_1>,...,<class_C>'")
    class_names = [c.strip() for c in rows[0][1:]]
    items = []
    for rowno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(class_names) + 1:
            raise MalformedManifestError(
                f"{manifest} row {rowno}: expected {len(class_names) + 1} columns, got {len(row)}"
            )
        try:
            values = [float(v) for v in row[1:]]
        except ValueError:
            raise MalformedManifestError(f"{manifest} row {rowno}: non-numeric label column") from None
        hot = [i for i, v in enumerate(values) if v == 1.0]
        if len(hot) != 1 or any(v not in (0.0, 1.0) for v in values):
            raise MalformedManifestError(
                f"{manifest} row {rowno}: expected exactly one positive label, got {row[1:]}"
            )
        name = row[0].strip()
        path = _find_image(root, name)
        if path is None:
            raise FileNotFoundError(f"image {name!r} (manifest row {rowno}) not found under {root}")
        items.append((path, hot[0], None))
    return LabeledImageSet(items, class_names)


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.10
    train_val_ratio: Tuple[float, float] = (0.8, 0.2)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "train_val_ratio", tuple(float(v) for v in self.train_val_ratio))
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        a, b = self.train_val_ratio
        if a <= 0 or b <= 0:
            raise ValueError(f"train_val_ratio entries must be positive, got {self.train_val_ratio}")


def split_indices(n: int, spec: SplitSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint (train, val, test) index arrays covering ``range(n)``."""
    if n < 10:
        raise ValueError(f"need at least 10 items to split, got {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_test = int(round(spec.test_fraction * n))
    rest = n - n_test
    a, b = spec.train_val_ratio
    n_val = int(round(rest * b / (a + b)))
    test = np.sort(perm[:n_test])
    val = np.sort(perm[n_test:n_test + n_val])
    train = np.sort(perm[n_test + n_val:])
    return train, val, test


def split_dataset(ds: LabeledImageSet, spec: SplitSpec):
    train, val, test = split_indices(len(ds), spec)
    return ds.subset(train), ds.subset(val), ds.subset(test)


def class_weights(ds, num_classes: Optional[int] = None) -> torch.Tensor:
    """Inverse-frequency weights ``N / (C * n_c)``.

    Their mean over training samples (each sample carrying its class's
    weight) is 1, so the weighted loss keeps the unweighted loss's scale.

    ``ds`` is a :class:`LabeledImageSet` or a sequence of per-class counts.
    """
    if isinstance(ds, LabeledImageSet):
        counts, names = ds.counts, ds.class_names
    else:
        counts = [int(c) for c in ds]
        names = [str(i) for i in range(len(counts))]
    if num_classes is not None and num_classes != len(counts):
        raise ValueError(f"expected {num_classes} classes, got {len(counts)}")
    for name, n_c in zip(names, counts):
        if n_c < 1:
            raise ValueError(f"class {name!r} has no samples; cannot derive its weight")
    counts_t = torch.tensor(counts, dtype=torch.float64)
    return counts_t.sum() / (len(counts) * counts_t)


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    """Random photometric/geometric augmentation; out-of-range values are clamped."""

    hflip: float = 0.5
    vflip: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    scale: Tuple[float, float] = (0.9, 1.1)
    noise: float = 0.01

    def __post_init__(self):
        clamp01 = lambda v: min(max(float(v), 0.0), 1.0)
        object.__setattr__(self, "hflip", clamp01(self.hflip))
        object.__setattr__(self, "vflip", clamp01(self.vflip))
        for name in ("brightness", "contrast", "saturation", "noise"):
            object.__setattr__(self, name, max(float(getattr(self, name)), 0.0))
        lo, hi = (max(float(v), 1e-3) for v in self.scale)
        object.__setattr__(self, "scale", (min(lo, hi), max(lo, hi)))

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(hflip=0, vflip=0, brightness=0, contrast=0, saturation=0, scale=(1, 1), noise=0)


def hflip(image: torch.Tensor) -> torch.Tensor:
    return image.flip(-1)


def vflip(image: torch.Tensor) -> torch.Tensor:
    return image.flip(-2)


def adjust_brightness(image: torch.Tensor, factor: float) -> torch.Tensor:
    return (image * factor).clamp(0.0, 1.0)


def augment(image: torch.Tensor, policy: AugmentPolicy, seed: int, size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """Apply ``policy`` to a (3, H, W) image in [0, 1]; deterministic in ``seed``."""
    if size is not None and tuple(image.shape[-2:]) != tuple(size):
        image = TF.resize(image, list(size), antialias=True)
    if policy == AugmentPolicy.identity():
        return image
    rng = np.random.default_rng(seed)
    # draw every variate unconditionally so the stream layout is policy-independent
    u_h, u_v = rng.random(2)
    b, c, s = rng.uniform(-1.0, 1.0, size=3)
    zoom = rng.uniform(*policy.scale)
    noise_seed = int(rng.integers(2**31))

    out = image
    if u_h < policy.hflip:
        out = hflip(out)
    if u_v < policy.vflip:
        out = vflip(out)
    if policy.brightness:
        out = adjust_brightness(out, 1.0 + policy.brightness * b)
    if policy.contrast:
        out = TF.adjust_contrast(out, max(1.0 + policy.contrast * c, 0.0))
    if policy.saturation and out.shape[0] == 3:
        out = TF.adjust_saturation(out, max(1.0 + policy.saturation * s, 0.0))
    if zoom != 1.0:
        out = TF.affine(out, angle=0.0, translate=[0, 0], scale=float(zoom), shear=[0.0, 0.0],
                        interpolation=TF.InterpolationMode.BILINEAR)
    if policy.noise:
        g = torch.Generator().manual_seed(noise_seed)
        out = out + policy.noise * torch.randn(out.shape, generator=g, dtype=out.dtype)
    return out.clamp(0.0, 1.0)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


# -- batching ------------------------------------------------------------------

def epoch_batches(n: int, batch_size: int, seed: int, epoch: int = 0, drop_last: bool = False) -> List[np.ndarray]:
    """Index batches of one epoch; the shuffle depends only on (seed, epoch)."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2 for relational losses, got {batch_size}")
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds split size {n}")
    perm = np.random.default_rng(_derive_seed(seed, epoch)).permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if drop_last and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


def _stack(ds: LabeledImageSet, indices, size, policy, seed, epoch, view=0) -> torch.Tensor:
    imgs = []
    for i in indices:
        img = ds.image(int(i), size)
        if policy is not None:
            img = augment(img, policy, _derive_seed(seed, epoch, int(i), view))
        imgs.append(img)
    return torch.stack(imgs)


def batch_iterator(
    ds: LabeledImageSet,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    drop_last: bool = False,
    size: Tuple[int, int] = (32, 32),
    policy: Optional[AugmentPolicy] = None,
    shuffle: bool = True,
) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(images, labels)`` batches.

    Training splits pass an augmentation ``policy``; validation and test
    pass ``None`` (resize only) and usually ``shuffle=False``.
    """
    if shuffle:
        if batch_size < 3:
            warnings.warn("batch_size < 3 disables the angle-wise relation term", RuntimeWarning)
        batches = epoch_batches(len(ds), batch_size, seed, epoch, drop_last)
    else:
        if batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {batch_size}")
        idx = np.arange(len(ds))
        batches = [idx[i:i + batch_size] for i in range(0, len(ds), batch_size)]
    labels = ds.labels
    for b in batches:
        yield _stack(ds, b, size, policy, seed, epoch), torch.from_numpy(labels[b])


def view_batch(
    ds: LabeledImageSet,
    indices: Sequence[int],
    views: int,
    policy: AugmentPolicy,
    seed: int,
    epoch: int,
    size: Tuple[int, int],
) -> torch.Tensor:
    """(B * views, 3, H, W) augmented views, instance-major (row ``b * views + v``)."""
    per_view = [_stack(ds, indices, size, policy, seed, epoch, view=1000 + v) for v in range(views)]
    return torch.stack(per_view, dim=1).flatten(0, 1)


# -- synthetic corpora ---------------------------------------------------------

def _render(label: int, num_classes: int, size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    """One lesion-like image: a textured blob on a noisy skin-toned background.

    The class fixes the blob's hue (``label % 4``) and texture (coarse or
    fine stripes, ``label // 4``); orientation, position, shape and lighting
    are nuisance variables, so flips and mild rescaling preserve the label.
    Classes sharing a hue are the natural confusions.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    background = np.array([0.80, 0.62, 0.52]) + rng.normal(0, 0.04, 3)
    img = np.ones((size, size, 3)) * background

    cx, cy = rng.uniform(0.4, 0.6, 2)
    rx, ry = rng.uniform(0.30, 0.42, 2)
    tilt = rng.uniform(0, np.pi)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(tilt) + dy * np.sin(tilt)
    v = -dx * np.sin(tilt) + dy * np.cos(tilt)
    mask = np.clip(1.5 - 1.5 * ((u / rx) ** 2 + (v / ry) ** 2), 0, 1)

    angle = rng.uniform(0, np.pi)
    freq = (1.5 if (label // 4) % 2 == 0 else 6.0) * rng.uniform(0.9, 1.1)
    phase = 2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + rng.uniform(0, 2 * np.pi)
    texture = 0.5 + 0.5 * np.sin(phase)

    hue = (label % 4) / 3.0
    dark = np.array([0.30 + 0.35 * hue, 0.20, 0.45 - 0.30 * hue])
    light = dark + 0.35
    lesion = dark * (1 - texture[..., None]) + light * texture[..., None]
    img = img * (1 - mask[..., None]) + lesion * mask[..., None]
    img = img * rng.uniform(0.85, 1.15) + rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 1)


def make_fixture(
    root,
    counts: Sequence[int],
    size: int = 32,
    seed: int = 0,
    noise: float = 0.08,
    class_names: Optional[Sequence[str]] = None,
) -> Dict[str, int]:
    """Write a synthetic corpus in the manifest layout; returns per-class counts."""
    root = Path(root)
    counts = [int(c) for c in counts]
    num_classes = len(counts)
    if num_classes < 2:
        raise ValueError("a fixture needs at least two classes")
    if class_names is None:
        class_names = ISIC_CLASSES if num_classes == len(ISIC_CLASSES) else [f"class_{i}" for i in range(num_classes)]
    class_names = list(class_names)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), counts)
    rng.shuffle(labels)
    width = max(5, int(math.log10(max(len(labels), 1))) + 1)
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", *class_names])
        for n, label in enumerate(labels):
            name = f"SYN_{n:0{width}d}"
            pixels = _render(int(label), num_classes, size, rng, noise)
            Image.fromarray((pixels * 255).round().astype(np.uint8)).save(root / "images" / f"{name}.png")
            writer.writerow([name, *(1 if c == label else 0 for c in range(num_classes))])
    return {name: n for name, n in zip(class_names, counts)}
