"""Synthetic 10-class image dataset used by the test suite.

Each class is a smooth oriented color grating with per-image phase,
amplitude, brightness and noise jitter. The signal amplitude is well
above the trigger budgets under test, so classes are robustly separable:
a small CNN learns them quickly, while bounded perturbations cannot
trivially rewrite class identity on a clean model.

The tree is written in the toolkit's on-disk layout
(``root/<split>/<class>/<file>.png``) at 32x32 so it loads through the
regular cifar10 profile.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

CLASS_NAMES = [f"class_{i}" for i in range(10)]

# per-class (cycles, orientation step, rgb mix) signatures
_FREQS = [3, 5, 4, 6, 3, 5, 4, 6, 3, 5]
_PALETTE = np.array([
    [1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0], [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0], [0.2, 1.0, 1.0], [1.0, 0.6, 0.2], [0.5, 1.0, 0.4],
    [0.4, 0.5, 1.0], [1.0, 0.4, 0.6],
], dtype=np.float32)


def _grating(label, size, phase):
    angle = label * math.pi / 10.0
    freq = _FREQS[label]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float32) / size
    wave = np.sin(2 * math.pi * freq * (xs * math.cos(angle) + ys * math.sin(angle)) + phase)
    return wave[..., None] * _PALETTE[label][None, None, :]


def class_image(label: int, rng: np.random.Generator, size: int = 32,
                amplitude=(0.12, 0.30), noise_sigma: float = 0.08) -> np.ndarray:
    """One sample: class grating + weaker distractor grating from another
    class + brightness/noise jitter. Margins are tight enough that bounded
    adversarial perturbations bite, yet classes stay cleanly learnable."""
    img = 0.5 + rng.uniform(-0.10, 0.10)
    img = img + rng.uniform(*amplitude) * _grating(label, size, rng.uniform(0, 2 * math.pi))
    distractor = int(rng.integers(0, 9))
    distractor += distractor >= label
    img = img + rng.uniform(0.0, 0.10) * _grating(distractor, size, rng.uniform(0, 2 * math.pi))
    img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_dataset_tree(root, n_train_per_class: int, n_val_per_class: int,
                      size: int = 32, seed: int = 0,
                      class_names=None) -> Path:
    """Write the synthetic tree; returns root. Skips classes already present."""
    root = Path(root)
    names = class_names or CLASS_NAMES
    rng = np.random.default_rng(seed)
    for split, per_class in (("train", n_train_per_class), ("val", n_val_per_class)):
        for label, name in enumerate(names):
            d = root / split / name
            if d.is_dir() and len(list(d.glob("*.png"))) >= per_class:
                continue
            d.mkdir(parents=True, exist_ok=True)
            for k in range(per_class):
                arr = class_image(label, rng, size=size)
                Image.fromarray((arr * 255).round().astype(np.uint8)).save(
                    d / f"{name}_{k:05d}.png"
                )
    return root


def rand_images(n, size=8, classes=2, seed=0):
    """Random in-memory labeled images for unit tests."""
    from trigcraft.data import LabeledImage

    rng = np.random.default_rng(seed)
    return [
        LabeledImage(rng.random((size, size, 3), dtype=np.float32),
                     label=int(rng.integers(0, classes)))
        for _ in range(n)
    ]
