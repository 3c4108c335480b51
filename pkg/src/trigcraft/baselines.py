"""Reference attacks: CLBA (FGSM erasure + fixed corner patch) and GRTBA
(one fixed global random trigger shared by every image)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .data import LabeledImage, labels_of, stack_pixels
from .errors import ShapeMismatchError
from .tensorops import batch_indices, to_nchw, to_nhwc
from .victim import ClassifierModel


@dataclass
class PatchTrigger:
    """A fixed pattern stamped over the bottom-right corner."""

    pattern: np.ndarray  # (h, w, 3) in [0, 1]

    @classmethod
    def random(cls, size, seed):
        h, w = (size, size) if isinstance(size, int) else size
        rng = np.random.default_rng(seed)
        return cls(pattern=rng.random((h, w, 3), dtype=np.float32))

    @property
    def size(self):
        return self.pattern.shape[:2]

    def to_dict(self):
        return {"kind": "patch", "pattern": self.pattern.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(pattern=np.asarray(d["pattern"], dtype=np.float32))


@dataclass
class GlobalNoiseTrigger:
    """One uniform noise field in [-epsilon, epsilon], reused for every image."""

    noise: np.ndarray  # (H, W, 3)
    epsilon: float
    seed: int

    @classmethod
    def random(cls, resolution, epsilon, seed):
        h, w = resolution
        rng = np.random.default_rng(seed)
        noise = rng.uniform(-epsilon, epsilon, size=(h, w, 3)).astype(np.float32)
        return cls(noise=noise, epsilon=float(epsilon), seed=seed)

    def to_dict(self):
        return {"kind": "global-noise", "epsilon": self.epsilon, "seed": self.seed,
                "shape": list(self.noise.shape)}

    @classmethod
    def from_dict(cls, d):
        h, w, _ = d["shape"]
        return cls.random((h, w), d["epsilon"], d["seed"])


def fgsm_perturb(f: ClassifierModel, x: LabeledImage, eps: float) -> LabeledImage:
    """Single-step untargeted FGSM on the true label, clamped to [0, 1]."""
    return fgsm_perturb_batch(f, [x], eps)[0]


def fgsm_perturb_batch(f: ClassifierModel, images: Sequence[LabeledImage],
                       eps: float, batch_size=64) -> list[LabeledImage]:
    f.net.eval()
    out = []
    for idx in batch_indices(len(images), batch_size):
        batch = [images[i] for i in idx]
        t = to_nchw(stack_pixels(batch)).to(f.device).requires_grad_(True)
        y = torch.from_numpy(labels_of(batch)).to(f.device)
        loss = F.cross_entropy(f.logits(t), y)
        (grad,) = torch.autograd.grad(loss, t)
        adv = torch.clamp(t.detach() + eps * torch.sign(grad), 0.0, 1.0)
        out.extend(LabeledImage(pixels=a, label=im.label)
                   for a, im in zip(to_nhwc(adv), batch))
    return out


def apply_patch(x: LabeledImage, p: PatchTrigger) -> LabeledImage:
    """Overwrite the bottom-right corner with the patch pattern."""
    height, width = x.pixels.shape[:2]
    ph, pw = p.size
    if ph > height or pw > width:
        raise ShapeMismatchError(
            f"patch {ph}x{pw} does not fit in image {height}x{width}"
        )
    pixels = x.pixels.copy()
    pixels[height - ph:, width - pw:, :] = p.pattern
    return LabeledImage(pixels=pixels, label=x.label)


def clba_poison(f: ClassifierModel, x: LabeledImage, eps: float,
                p: PatchTrigger) -> LabeledImage:
    """FGSM feature erasure first, then the fixed corner patch."""
    return apply_patch(fgsm_perturb(f, x, eps), p)


def grtba_poison(x: LabeledImage, t: GlobalNoiseTrigger) -> LabeledImage:
    """Add the run's fixed global noise and clamp; label preserved."""
    if t.noise.shape != x.pixels.shape:
        raise ShapeMismatchError(
            f"noise shape {t.noise.shape} does not match image {x.pixels.shape}"
        )
    pixels = np.clip(x.pixels + t.noise, 0.0, 1.0).astype(np.float32)
    return LabeledImage(pixels=pixels, label=x.label)


def patch_trigger_fn(p: PatchTrigger):
    """Activation-time crafting for CLBA: the patch alone is the trigger."""

    def fn(images):
        return [apply_patch(im, p) for im in images]

    return fn


def noise_trigger_fn(t: GlobalNoiseTrigger):
    def fn(images):
        return [grtba_poison(im, t) for im in images]

    return fn


def save_trigger(trigger, path):
    Path(path).write_text(json.dumps(trigger.to_dict()) + "\n")


def load_trigger(path):
    d = json.loads(Path(path).read_text())
    if d["kind"] == "patch":
        return PatchTrigger.from_dict(d)
    if d["kind"] == "global-noise":
        return GlobalNoiseTrigger.from_dict(d)
    raise ValueError(f"unknown trigger kind {d['kind']!r}")
