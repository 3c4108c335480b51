"""Defense evaluations: augmentation-hardened retraining and STRIP.

STRIP screens inputs by superimposing clean images on a suspect input and
measuring the prediction entropy; inputs carrying a fixed trigger keep the
model confident (low entropy) across superimpositions, so a defender can
reject low-entropy inputs. Entropies here are Shannon entropy in bits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from matplotlib.figure import Figure
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as tvf

from .data import DatasetSplit, LabeledImage, stack_pixels
from .errors import ConfigError
from .tensorops import batch_indices, to_nchw
from .victim import ClassifierModel, ImplantConfig, implant, predict_probs

ENTROPY_BASE = "bits"


@dataclass
class AugmentationPolicy:
    rotation_degrees: float = 20.0
    crop_scale: tuple[float, float] = (0.64, 1.0)
    hflip_prob: float = 0.5

    def validate(self):
        if self.rotation_degrees < 0:
            raise ConfigError("rotation range must be >= 0")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale must satisfy 0 < min <= max <= 1, got {self.crop_scale}")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")

    def to_dict(self):
        return {"rotation_degrees": self.rotation_degrees,
                "crop_scale": list(self.crop_scale), "hflip_prob": self.hflip_prob}


def _sample_crop(rng, height, width, scale):
    """RandomResizedCrop-style box sampling with a center-crop fallback."""
    area = height * width
    log_ratio = (math.log(3 / 4), math.log(4 / 3))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        ratio = math.exp(rng.uniform(*log_ratio))
        w = round(math.sqrt(target * ratio))
        h = round(math.sqrt(target / ratio))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fallback: clamp ratio, center the crop
    w = min(width, height)
    h = w
    return (height - h) // 2, (width - w) // 2, h, w


def make_augment_fn(policy: AugmentationPolicy, resolution):
    """Per-step geometric augmentation over an NCHW batch.

    Parameters are drawn from the numpy generator the training loop owns,
    so augmented runs stay reproducible per seed. Triggered images pass
    through exactly like clean ones (triggers undergo the same transforms).
    """
    policy.validate()
    height, width = resolution

    def augment(batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        out = []
        for img in batch:
            if policy.rotation_degrees > 0:
                angle = float(rng.uniform(-policy.rotation_degrees, policy.rotation_degrees))
                img = tvf.rotate(img, angle, interpolation=InterpolationMode.BILINEAR)
            top, left, h, w = _sample_crop(rng, height, width, policy.crop_scale)
            if (top, left, h, w) != (0, 0, height, width):
                img = tvf.resized_crop(img, top, left, h, w, [height, width],
                                       interpolation=InterpolationMode.BILINEAR,
                                       antialias=True)
            if policy.hflip_prob > 0 and rng.random() < policy.hflip_prob:
                img = tvf.hflip(img)
            out.append(img)
        return torch.stack(out).clamp_(0.0, 1.0)

    return augment


def augmented_implant(f: ClassifierModel, d_prime: DatasetSplit,
                      cfg: ImplantConfig) -> ClassifierModel:
    """Implant with per-step data augmentation; cfg must carry a policy."""
    if cfg.augmentation is None:
        raise ConfigError("augmented_implant requires cfg.augmentation to be set")
    return implant(f, d_prime, cfg)


@dataclass
class EntropyDistribution:
    per_sample_entropy: list[float]
    median: float
    label: str  # "clean" | "triggered"

    @classmethod
    def from_entropies(cls, entropies, label):
        entropies = [float(e) for e in entropies]
        return cls(per_sample_entropy=entropies,
                   median=float(np.median(entropies)), label=label)


def _softmax_entropy_bits(probs: np.ndarray) -> np.ndarray:
    p = probs.astype(np.float64)
    terms = np.where(p > 0, p * np.log2(p, where=p > 0), 0.0)
    return -terms.sum(axis=1)


def strip_entropy(model: ClassifierModel, x: LabeledImage,
                  overlays: Sequence[LabeledImage]) -> float:
    """Mean prediction entropy of x superimposed with each overlay.

    Superimposition is pixel-wise addition clamped back to [0, 1].
    """
    if not overlays:
        raise ConfigError("strip_entropy needs at least one overlay image")
    blended = [
        LabeledImage(np.clip(x.pixels + c.pixels, 0.0, 1.0).astype(np.float32), x.label)
        for c in overlays
    ]
    probs = predict_probs(model, blended)
    return float(_softmax_entropy_bits(probs).mean())


def strip_evaluate(model: ClassifierModel, clean_set: Sequence[LabeledImage],
                   triggered_set: Sequence[LabeledImage],
                   overlays: Sequence[LabeledImage], n_overlays: int = 100,
                   seed: int = 0, out_dir=None):
    """Entropy distributions for a clean and a triggered set.

    Every sample gets its own seeded draw of n_overlays overlays, keyed by
    sample position so the clean and triggered sides are directly
    comparable. Returns (clean_dist, triggered_dist) and optionally writes
    ``strip.json`` plus a histogram PNG.
    """
    if not clean_set or not triggered_set:
        raise ConfigError("strip_evaluate needs non-empty clean and triggered sets")
    if n_overlays > len(overlays):
        raise ConfigError(
            f"n_overlays {n_overlays} exceeds overlay pool size {len(overlays)}"
        )

    def entropies(images):
        values = []
        for pos, x in enumerate(images):
            rng = np.random.default_rng((seed, pos))
            chosen = rng.choice(len(overlays), size=n_overlays, replace=False)
            values.append(strip_entropy(model, x, [overlays[i] for i in chosen]))
        return values

    clean_dist = EntropyDistribution.from_entropies(entropies(clean_set), "clean")
    trig_dist = EntropyDistribution.from_entropies(entropies(triggered_set), "triggered")

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "seed": seed,
            "n_overlays": n_overlays,
            "entropy_base": ENTROPY_BASE,
            "clean": clean_dist.per_sample_entropy,
            "triggered": trig_dist.per_sample_entropy,
            "medians": {"clean": clean_dist.median, "triggered": trig_dist.median},
        }
        (out_dir / "strip.json").write_text(json.dumps(payload, indent=2) + "\n")
        plot_entropy_histogram(clean_dist, trig_dist, out_dir / "strip_entropy.png")
    return clean_dist, trig_dist


def strip_threshold_stats(clean_dist: EntropyDistribution,
                          trig_dist: EntropyDistribution,
                          keep_clean: float = 0.9):
    """Defender's view: reject entropies below the threshold that keeps the
    given fraction of clean inputs; report how many triggered inputs the
    threshold catches."""
    threshold = float(np.quantile(clean_dist.per_sample_entropy, 1.0 - keep_clean))
    trig = np.asarray(trig_dist.per_sample_entropy)
    return {
        "threshold": threshold,
        "clean_kept": float(np.mean(np.asarray(clean_dist.per_sample_entropy) >= threshold)),
        "triggered_rejected": float(np.mean(trig < threshold)),
    }


def plot_entropy_histogram(clean_dist, trig_dist, path):
    fig = Figure(figsize=(5, 3.2))
    ax = fig.subplots()
    bins = np.linspace(
        0, max(max(clean_dist.per_sample_entropy), max(trig_dist.per_sample_entropy), 1e-6), 30
    )
    ax.hist(clean_dist.per_sample_entropy, bins=bins, alpha=0.6, color="tab:blue",
            label=f"clean (median {clean_dist.median:.3f})")
    ax.hist(trig_dist.per_sample_entropy, bins=bins, alpha=0.6, color="tab:red",
            label=f"triggered (median {trig_dist.median:.3f})")
    ax.set_xlabel(f"prediction entropy ({ENTROPY_BASE})")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path
