"""Dataset loading, generator-training splits and clean-label poisoning.

Images are kept in a canonical form throughout the toolkit: float32 arrays
of shape (H, W, 3) with values in [0, 1]. Classifier-specific mean/std
normalization happens inside the model, never here, so pixel-space bounds
and distortion metrics stay meaningful.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import (
    DatasetNotFoundError,
    DatasetStructureError,
    ImageDecodeError,
    InfeasibleRateError,
    InsufficientDataError,
    InvalidTargetError,
    PlanMismatchError,
)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".webp"}

# Synset directories of the Imagenette distribution, in sorted order the
# "gas pump" class lands at index 7.
IMAGENETTE_CLASS_NAMES = {
    "n01440764": "tench",
    "n02102040": "English springer",
    "n02979186": "cassette player",
    "n03000684": "chain saw",
    "n03028079": "church",
    "n03394916": "French horn",
    "n03417042": "garbage truck",
    "n03425413": "gas pump",
    "n03445777": "golf ball",
    "n03888257": "parachute",
}


@dataclass
class DatasetProfile:
    name: str
    resolution: tuple[int, int]
    class_count: int
    # "native": images must already be at `resolution`
    # "shortside-crop": resize short side to resolution then center-crop
    sizing: str
    class_name_map: dict[str, str] = field(default_factory=dict)


DATASET_PROFILES = {
    "cifar10": DatasetProfile("cifar10", (32, 32), 10, "native"),
    "imagenette-160": DatasetProfile(
        "imagenette-160", (224, 224), 10, "shortside-crop", IMAGENETTE_CLASS_NAMES
    ),
}


@dataclass
class LabeledImage:
    """One image with its class label.

    pixels is float32 (H, W, 3) in [0, 1] and treated as immutable once
    constructed; operations that perturb an image return a new instance.
    """

    pixels: np.ndarray
    label: int

    def validate(self, class_count=None):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DatasetStructureError(
                f"expected (H, W, 3) pixels, got shape {self.pixels.shape}"
            )
        if self.pixels.dtype != np.float32:
            raise DatasetStructureError(f"expected float32 pixels, got {self.pixels.dtype}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise DatasetStructureError(f"pixel values outside [0, 1]: min={lo}, max={hi}")
        if class_count is not None and not 0 <= self.label < class_count:
            raise DatasetStructureError(
                f"label {self.label} outside [0, {class_count})"
            )


@dataclass
class DatasetSplit:
    """Train/val image lists plus class metadata."""

    train: list[LabeledImage]
    val: list[LabeledImage]
    class_names: list[str]
    resolution: tuple[int, int]

    @property
    def class_count(self):
        return len(self.class_names)

    def class_indices(self, label, split="train"):
        """Indices of images with the given label, in ascending order."""
        images = self.train if split == "train" else self.val
        return [i for i, im in enumerate(images) if im.label == label]


@dataclass
class GeneratorDataset:
    """Balanced split used to train a trigger generator.

    Holds every target-class train image and an equal-per-class sample of
    the remaining classes, sized so the target:non-target ratio is close
    to 1:1.
    """

    target_images: list[LabeledImage]
    nontarget_images: list[LabeledImage]
    y_t: int

    def all_images(self):
        return self.target_images + self.nontarget_images

    def __len__(self):
        return len(self.target_images) + len(self.nontarget_images)


@dataclass
class PoisonPlan:
    """Which train images get a trigger, for a given rate and seed."""

    y_t: int
    lam: float
    poison_indices: frozenset[int]
    seed: int

    def to_dict(self):
        return {
            "target_class": self.y_t,
            "lambda": self.lam,
            "seed": self.seed,
            "indices": sorted(self.poison_indices),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            y_t=int(d["target_class"]),
            lam=float(d["lambda"]),
            poison_indices=frozenset(int(i) for i in d["indices"]),
            seed=int(d["seed"]),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _decode_image(path: Path, profile: DatasetProfile) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            h, w = profile.resolution
            if profile.sizing == "native":
                if img.size != (w, h):
                    raise DatasetStructureError(
                        f"{path}: profile {profile.name!r} expects native "
                        f"{w}x{h} images, got {img.size[0]}x{img.size[1]}"
                    )
            else:
                short = min(img.size)
                scale = h / short
                img = img.resize(
                    (max(w, round(img.size[0] * scale)), max(h, round(img.size[1] * scale))),
                    Image.BILINEAR,
                )
                left = (img.size[0] - w) // 2
                top = (img.size[1] - h) // 2
                img = img.crop((left, top, left + w, top + h))
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except DatasetStructureError:
        raise
    except Exception as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr


def _load_split_dir(split_dir: Path, profile: DatasetProfile, class_dirs):
    images = []
    for label, class_dir in enumerate(class_dirs):
        d = split_dir / class_dir
        if not d.is_dir():
            raise DatasetStructureError(
                f"class directory {class_dir!r} missing under {split_dir}"
            )
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
        for p in files:
            images.append(LabeledImage(_decode_image(p, profile), label))
    return images


def load_dataset(root_path, profile: str | DatasetProfile) -> DatasetSplit:
    """Load a class-per-directory image tree into a DatasetSplit.

    Expected layout: ``<root>/<split>/<class_name>/<image file>`` with
    splits ``train`` and ``val``. Pixels are scaled to [0, 1] and sized
    per the profile. Split membership is taken exactly as found on disk.
    """
    if isinstance(profile, str):
        try:
            profile = DATASET_PROFILES[profile]
        except KeyError:
            raise DatasetStructureError(
                f"unknown dataset profile {profile!r}; known: {sorted(DATASET_PROFILES)}"
            ) from None
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetNotFoundError(f"dataset root {root} does not exist")
    train_dir, val_dir = root / "train", root / "val"
    for d in (train_dir, val_dir):
        if not d.is_dir():
            raise DatasetNotFoundError(f"missing split directory {d}")

    class_dirs = sorted(p.name for p in train_dir.iterdir() if p.is_dir())
    if len(class_dirs) != profile.class_count:
        raise DatasetStructureError(
            f"profile {profile.name!r} expects {profile.class_count} classes, "
            f"found {len(class_dirs)} under {train_dir}"
        )
    class_names = [profile.class_name_map.get(d, d) for d in class_dirs]

    train = _load_split_dir(train_dir, profile, class_dirs)
    val = _load_split_dir(val_dir, profile, class_dirs)
    if not train or not val:
        raise DatasetStructureError(f"empty split under {root}")
    return DatasetSplit(train=train, val=val, class_names=class_names,
                        resolution=profile.resolution)


def build_generator_dataset(split: DatasetSplit, y_t: int, seed: int) -> GeneratorDataset:
    """Assemble the balanced dataset a trigger generator trains on.

    Takes every target-class train image plus ``round(m / (C - 1))``
    images from each other class, sampled uniformly without replacement
    with the given seed. Equal per-class counts keep both loss terms
    converging at the same pace; the rounding leaves the target and
    non-target halves within a fraction of a percent of 1:1 at realistic
    class sizes.
    """
    c = split.class_count
    if not 0 <= y_t < c:
        raise InvalidTargetError(f"target class {y_t} outside [0, {c})")
    target_idx = split.class_indices(y_t)
    if not target_idx:
        raise InsufficientDataError(
            f"no train images for target class {split.class_names[y_t]!r}"
        )
    m = len(target_idx)
    per_class = max(1, math.floor(m / (c - 1) + 0.5))

    rng = np.random.default_rng(seed)
    nontarget = []
    for label in range(c):
        if label == y_t:
            continue
        idx = split.class_indices(label)
        if len(idx) < per_class:
            raise InsufficientDataError(
                f"class {split.class_names[label]!r} has {len(idx)} train images, "
                f"needs {per_class} for the generator dataset"
            )
        chosen = rng.choice(len(idx), size=per_class, replace=False)
        nontarget.extend(split.train[idx[i]] for i in sorted(chosen))

    return GeneratorDataset(
        target_images=[split.train[i] for i in target_idx],
        nontarget_images=nontarget,
        y_t=y_t,
    )


def poison_count(lam: float, n_train: int) -> int:
    """Number of images a rate poisons: round-half-up of lam * n."""
    return math.floor(lam * n_train + 0.5)


def make_poison_plan(split: DatasetSplit, y_t: int, lam: float, seed: int) -> PoisonPlan:
    """Pick which target-class train images to poison.

    Selection is uniform without replacement over the target class and
    deterministic per seed.
    """
    c = split.class_count
    if not 0 <= y_t < c:
        raise InvalidTargetError(f"target class {y_t} outside [0, {c})")
    if not 0.0 <= lam <= 1.0:
        raise InfeasibleRateError(f"poisoning rate {lam} outside [0, 1]", 1.0)
    n = len(split.train)
    count = poison_count(lam, n)
    target_idx = split.class_indices(y_t)
    if count > len(target_idx):
        max_lam = len(target_idx) / n
        raise InfeasibleRateError(
            f"rate {lam} needs {count} poisoned images but class "
            f"{split.class_names[y_t]!r} only has {len(target_idx)} "
            f"(max feasible lambda = {max_lam:.4f})",
            max_lam,
        )
    if count == 0:
        warnings.warn(f"poisoning rate {lam} rounds to zero images", stacklevel=2)
        return PoisonPlan(y_t=y_t, lam=lam, poison_indices=frozenset(), seed=seed)

    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(target_idx), size=count, replace=False)
    indices = frozenset(target_idx[i] for i in chosen)
    return PoisonPlan(y_t=y_t, lam=lam, poison_indices=indices, seed=seed)


def validate_plan(split: DatasetSplit, plan: PoisonPlan):
    n = len(split.train)
    for i in plan.poison_indices:
        if not 0 <= i < n:
            raise PlanMismatchError(f"plan index {i} outside train split of size {n}")
        if split.train[i].label != plan.y_t:
            raise PlanMismatchError(
                f"plan index {i} has label {split.train[i].label}, "
                f"expected target class {plan.y_t}"
            )


def build_poisoned_dataset(split: DatasetSplit, plan: PoisonPlan, generator) -> DatasetSplit:
    """Build the clean-label poisoned retraining set.

    Exactly the planned train images are replaced by their triggered
    version with labels untouched; every other image object is shared
    with the input split, and the val split is passed through as-is.
    """
    from .generator import craft_images

    validate_plan(split, plan)
    train = list(split.train)
    idx = sorted(plan.poison_indices)
    if idx:
        crafted = craft_images(generator, [split.train[i] for i in idx])
        for i, im in zip(idx, crafted):
            train[i] = im
    return DatasetSplit(train=train, val=split.val,
                        class_names=split.class_names, resolution=split.resolution)


def poison_audit(original: DatasetSplit, poisoned: DatasetSplit) -> dict:
    """Count pixel and label differences between a split and its poisoned twin."""
    if len(original.train) != len(poisoned.train):
        raise PlanMismatchError("poisoned split has different train size")
    changed = [
        i
        for i, (a, b) in enumerate(zip(original.train, poisoned.train))
        if a.pixels is not b.pixels and not np.array_equal(a.pixels, b.pixels)
    ]
    label_mutations = sum(
        a.label != b.label for a, b in zip(original.train, poisoned.train)
    )
    return {
        "n_pixel_changed": len(changed),
        "changed_indices": changed,
        "n_label_mutations": label_mutations,
        "val_untouched": all(a is b for a, b in zip(original.val, poisoned.val)),
    }


def stack_pixels(images: Sequence[LabeledImage]) -> np.ndarray:
    """Stack images into one (N, H, W, 3) float32 array."""
    return np.stack([im.pixels for im in images], axis=0)


def labels_of(images: Sequence[LabeledImage]) -> np.ndarray:
    return np.asarray([im.label for im in images], dtype=np.int64)


def dataset_fingerprint(split: DatasetSplit) -> str:
    """Stable digest identifying a loaded dataset.

    Hashes counts, labels and the full pixels of up to 64 evenly spaced
    train images, which pins the content without reading gigabytes at
    full scale.
    """
    import hashlib

    h = hashlib.sha256()
    h.update(repr((split.resolution, split.class_names,
                   len(split.train), len(split.val))).encode())
    h.update(labels_of(split.train).tobytes())
    h.update(labels_of(split.val).tobytes())
    n = len(split.train)
    step = max(1, n // 64)
    for i in range(0, n, step):
        h.update(split.train[i].pixels.tobytes())
    return h.hexdigest()[:16]
