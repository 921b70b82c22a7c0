"""Dataset archives in the MedMNIST layout, N-shot splits and augmentation."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

SPLITS = ("train", "val", "test")
ARRAY_KEYS = tuple(f"{s}_{kind}" for s in SPLITS for kind in ("images", "labels"))

# name -> (train, val, test, num_classes)
MEDMNIST_SPLITS = {
    "bloodmnist": (11959, 1712, 3421, 8),
    "breastmnist": (546, 78, 156, 2),
    "chestmnist": (78468, 11219, 22433, 2),
    "dermamnist": (7007, 1003, 2005, 7),
    "octmnist": (97477, 10832, 1000, 4),
    "organamnist": (34561, 6491, 17778, 11),
    "organcmnist": (12975, 2392, 8216, 11),
    "organsmnist": (13932, 2452, 8827, 11),
    "pathmnist": (89996, 10004, 7180, 9),
    "pneumoniamnist": (4708, 524, 624, 2),
    "tissuemnist": (165466, 23640, 47280, 8),
}


class ArchiveFormatError(ValueError):
    pass


class ArchiveCorruptionError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetArchive:
    name: str
    images: dict[str, np.ndarray]  # split -> N x H x W x C uint8
    labels: dict[str, np.ndarray]  # split -> N int64
    num_classes: int

    def __post_init__(self):
        for arr in (*self.images.values(), *self.labels.values()):
            arr.setflags(write=False)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images["train"].shape[1:])

    def split_sizes(self) -> dict[str, int]:
        return {s: len(self.labels[s]) for s in SPLITS}


def _canonical_name(path: Path) -> str:
    # breastmnist_64.npz -> breastmnist
    return re.sub(r"_\d+$", "", path.stem.lower())


def _as_nhwc(images: np.ndarray, key: str) -> np.ndarray:
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise ArchiveFormatError(f"{key}: expected N x H x W [x C] images, got shape {images.shape}")
    if images.dtype != np.uint8:
        raise ArchiveFormatError(f"{key}: expected uint8 pixels, got {images.dtype}")
    return images


def _as_labels(labels: np.ndarray, key: str) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2 and labels.shape[1] == 1:
        labels = labels[:, 0]
    if labels.ndim != 1:
        raise ArchiveFormatError(f"{key}: expected single-label integer classes, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ArchiveFormatError(f"{key}: labels must be integers, got {labels.dtype}")
    return labels.astype(np.int64)


def archive_from_arrays(arrays, name: str = "archive", num_classes: int | None = None,
                        check_known_sizes: bool = True) -> DatasetArchive:
    """Validate a mapping holding the six MedMNIST arrays and wrap it."""
    missing = [k for k in ARRAY_KEYS if k not in arrays]
    if missing:
        raise ArchiveFormatError(f"archive {name!r} is missing arrays: {', '.join(missing)}")

    images, labels = {}, {}
    for split in SPLITS:
        img = _as_nhwc(np.asarray(arrays[f"{split}_images"]), f"{split}_images")
        lab = _as_labels(arrays[f"{split}_labels"], f"{split}_labels")
        if len(img) != len(lab):
            raise ArchiveFormatError(f"{split}: {len(img)} images but {len(lab)} labels")
        images[split], labels[split] = img, lab

    shapes = {img.shape[1:] for img in images.values()}
    if len(shapes) != 1:
        raise ArchiveFormatError(f"inconsistent image shapes across splits: {sorted(shapes)}")

    all_labels = np.concatenate(list(labels.values()))
    if all_labels.size and all_labels.min() < 0:
        raise ArchiveCorruptionError(f"negative label {all_labels.min()} in {name!r}")
    inferred = int(all_labels.max()) + 1 if all_labels.size else 0
    if num_classes is None:
        num_classes = inferred
    elif inferred > num_classes:
        raise ArchiveCorruptionError(
            f"label {inferred - 1} out of range for K={num_classes} in {name!r}")
    if num_classes < 1:
        raise ArchiveFormatError(f"archive {name!r} has no labels")

    known = MEDMNIST_SPLITS.get(name)
    if check_known_sizes and known is not None:
        sizes = tuple(len(labels[s]) for s in SPLITS)
        if sizes != known[:3]:
            raise ArchiveFormatError(
                f"{name}: split sizes {sizes} do not match the published {known[:3]}")

    return DatasetArchive(name=name, images=images, labels=labels, num_classes=num_classes)


def load_archive(path, num_classes: int | None = None, name: str | None = None,
                 check_known_sizes: bool = True) -> DatasetArchive:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    name = name or _canonical_name(path)
    if num_classes is None and name in MEDMNIST_SPLITS:
        num_classes = MEDMNIST_SPLITS[name][3]
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    return archive_from_arrays(arrays, name=name, num_classes=num_classes,
                               check_known_sizes=check_known_sizes)


def save_archive(archive: DatasetArchive, path) -> None:
    arrays = {}
    for split in SPLITS:
        arrays[f"{split}_images"] = archive.images[split]
        arrays[f"{split}_labels"] = archive.labels[split][:, None]
    np.savez_compressed(path, **arrays)


@dataclass(frozen=True)
class FewShotSplit:
    """Labeled N-shot subset plus the unlabeled pool of a training split.

    Sample ids are row indices into the archive's training split. The pool's
    ground truth is kept for diagnostics only and is not part of the public
    surface handed to training code (see `UnlabeledPool`).
    """

    labeled_ids: np.ndarray
    labeled_images: np.ndarray
    labeled_labels: np.ndarray  # integer classes
    unlabeled_ids: np.ndarray
    unlabeled_images: np.ndarray
    shots: int
    seed: int
    num_classes: int
    _unlabeled_truth: np.ndarray = field(repr=False)

    @property
    def labeled_onehot(self) -> np.ndarray:
        return np.eye(self.num_classes, dtype=np.float32)[self.labeled_labels]

    @property
    def num_unlabeled(self) -> int:
        return len(self.unlabeled_ids)

    def unlabeled_pool(self) -> UnlabeledPool:
        return UnlabeledPool(ids=self.unlabeled_ids, images=self.unlabeled_images)

    def diagnostic_truth(self, ids) -> np.ndarray:
        """Hidden labels of pool samples; for pseudo-label accuracy reports only."""
        pos = np.searchsorted(self.unlabeled_ids, ids)
        return self._unlabeled_truth[pos]

    def write_manifest(self, path) -> None:
        lines = [f"labeled\t{i}\t{y}" for i, y in zip(self.labeled_ids, self.labeled_labels)]
        lines += [f"unlabeled\t{i}" for i in self.unlabeled_ids]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class UnlabeledPool:
    ids: np.ndarray
    images: np.ndarray

    def __len__(self):
        return len(self.ids)


def build_fewshot_split(archive: DatasetArchive, shots: int, seed: int) -> FewShotSplit:
    if shots < 1:
        raise ValueError(f"shots must be positive, got {shots}")
    labels = archive.labels["train"]
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(archive.num_classes):
        members = np.flatnonzero(labels == k)
        if len(members) < shots:
            raise InsufficientDataError(
                f"class {k} has {len(members)} training samples, fewer than {shots} shots")
        chosen.append(np.sort(rng.choice(members, size=shots, replace=False)))
    labeled_ids = np.concatenate(chosen)
    mask = np.ones(len(labels), dtype=bool)
    mask[labeled_ids] = False
    unlabeled_ids = np.flatnonzero(mask)
    images = archive.images["train"]
    return FewShotSplit(
        labeled_ids=labeled_ids,
        labeled_images=images[labeled_ids],
        labeled_labels=labels[labeled_ids],
        unlabeled_ids=unlabeled_ids,
        unlabeled_images=images[unlabeled_ids],
        shots=shots,
        seed=seed,
        num_classes=archive.num_classes,
        _unlabeled_truth=labels[unlabeled_ids],
    )


def to_model_range(images: np.ndarray, resolution: int | None = None) -> torch.Tensor:
    """uint8 N x H x W x C -> float32 N x C x H' x W' in [-1, 1]."""
    x = torch.from_numpy(np.array(images, copy=True)).permute(0, 3, 1, 2).float()
    x = x / 127.5 - 1.0
    if resolution is not None and x.shape[-1] != resolution:
        x = F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False)
        x = x.clamp(-1.0, 1.0)
    return x.contiguous()


def hflip(image):
    if isinstance(image, torch.Tensor):
        return image.flip(-1)
    return image[..., ::-1].copy()


def augment(image, rng: np.random.Generator, force_flip: bool | None = None):
    """Random left-right mirror of a C x H x W (or batched) image."""
    flip = rng.random() < 0.5 if force_flip is None else force_flip
    return hflip(image) if flip else image


def augment_batch(images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    flips = torch.from_numpy(rng.random(len(images)) < 0.5)
    return torch.where(flips[:, None, None, None], images.flip(-1), images)


# ---------------------------------------------------------------------------
# toy dataset


TOY_SHAPES = ("disc", "square", "ring", "cross")


def _draw_shape(shape: str, size: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    r = rng.uniform(0.18, 0.32) * size
    cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
    dist = np.hypot(yy - cy, xx - cx)
    if shape == "disc":
        mask = dist <= r
    elif shape == "ring":
        mask = (dist <= r) & (dist >= 0.55 * r)
    elif shape == "square":  # roughly the disc's area
        mask = (np.abs(yy - cy) <= 0.85 * r) & (np.abs(xx - cx) <= 0.85 * r)
    elif shape == "cross":
        t = 0.3 * r
        mask = (((np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= r))
                | ((np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= r)))
    else:
        raise ValueError(f"unknown toy shape {shape!r}; choose from {TOY_SHAPES}")
    fg, bg = rng.uniform(0.55, 0.95), rng.uniform(0.05, 0.45)
    img = np.where(mask, fg, bg) + rng.normal(0.0, noise, size=(size, size))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def make_toy_archive(n_train: int = 510, n_val: int = 200, n_test: int = 400,
                     resolution: int = 32, noise: float = 0.1, seed: int = 0,
                     shapes=("disc", "square"), name: str = "toyshapes") -> DatasetArchive:
    """Grayscale archive of noisy geometric shapes, one shape per class.

    Position, size and contrast are random; classes alternate so every split
    is balanced.
    """
    rng = np.random.default_rng(seed)
    k = len(shapes)
    arrays = {}
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        labels = np.arange(n) % k
        imgs = np.stack([_draw_shape(shapes[c], resolution, rng, noise) for c in labels])[..., None]
        arrays[f"{split}_images"] = imgs
        arrays[f"{split}_labels"] = labels
    return archive_from_arrays(arrays, name=name, num_classes=k)
