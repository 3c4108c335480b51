"""Victim classifiers: pretraining, backdoor implantation and activation.

Models take [0, 1] pixel batches; the per-channel mean/std normalization
fixed at pretrain time lives inside the network, so every caller in the
toolkit speaks raw pixels.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import DatasetSplit, LabeledImage, labels_of, stack_pixels
from .errors import ConfigError, DataError, TrainingDiverged
from .generator import TriggerGenerator, apply_trigger, generate_trigger
from .tensorops import batch_indices, to_nchw


class _BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


class SmallResNet(nn.Module):
    """Compact residual CNN for 32x32 inputs (three stages, ~80k params)."""

    def __init__(self, class_count=10, widths=(16, 32, 64)):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, 1, 1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(),
        )
        blocks, in_ch = [], widths[0]
        for i, w in enumerate(widths):
            blocks.append(_BasicBlock(in_ch, w, stride=1 if i == 0 else 2))
            in_ch = w
        self.stages = nn.Sequential(*blocks)
        self.head = nn.Linear(in_ch, class_count)

    def forward(self, x):
        h = self.stages(self.stem(x))
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.head(h)


def _build_backbone(architecture, class_count, pretrained=False):
    if architecture == "small-resnet":
        return SmallResNet(class_count)
    if architecture == "resnet18":
        from torchvision.models import ResNet18_Weights, resnet18

        try:
            weights = ResNet18_Weights.IMAGENET1K_V1 if pretrained else None
            net = resnet18(weights=weights)
        except Exception as exc:
            raise DataError(f"pretrained resnet18 weights unavailable: {exc}") from exc
        net.fc = nn.Linear(net.fc.in_features, class_count)
        return net
    raise ConfigError(f"unknown classifier architecture {architecture!r}")


class _NormalizedNet(nn.Module):
    def __init__(self, backbone, mean, std):
        super().__init__()
        self.backbone = backbone
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    def forward(self, x):
        return self.backbone((x - self.mean) / self.std)


@dataclass
class ClassifierModel:
    """A victim network plus the metadata needed to rebuild it."""

    architecture: str
    net: _NormalizedNet
    class_count: int
    normalization: tuple[tuple[float, ...], tuple[float, ...]]
    provenance: str = "clean"
    parent_hash: str | None = None

    @classmethod
    def create(cls, architecture, class_count, normalization, init_seed=None,
               pretrained=False, device="cpu"):
        if init_seed is not None:
            torch.manual_seed(init_seed)
        mean, std = normalization
        backbone = _build_backbone(architecture, class_count, pretrained)
        net = _NormalizedNet(backbone, mean, std).to(device)
        return cls(architecture=architecture, net=net, class_count=class_count,
                   normalization=(tuple(mean), tuple(std)))

    @property
    def device(self):
        return next(self.net.parameters()).device

    def to(self, device):
        self.net.to(device)
        return self

    def clone(self):
        dup = copy.deepcopy(self)
        return dup

    def logits(self, images_nchw: torch.Tensor) -> torch.Tensor:
        return self.net(images_nchw)

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def predict_logits(model: ClassifierModel, images: Sequence[LabeledImage],
                   batch_size=256) -> np.ndarray:
    model.net.eval()
    out = []
    with torch.no_grad():
        for idx in batch_indices(len(images), batch_size):
            t = to_nchw(stack_pixels([images[i] for i in idx])).to(model.device)
            out.append(model.logits(t).cpu().numpy())
    return np.concatenate(out, axis=0)


def predict_labels(model, images, batch_size=256) -> np.ndarray:
    """Top-1 predictions; argmax ties resolve to the lowest class index."""
    return np.argmax(predict_logits(model, images, batch_size), axis=1)


def predict_probs(model, images, batch_size=256) -> np.ndarray:
    logits = predict_logits(model, images, batch_size)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class PretrainConfig:
    epochs: int = 12
    batch_size: int = 128
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("pretrain epochs and batch_size must be >= 1")


@dataclass
class ImplantConfig:
    batch_size: int = 100
    epochs: int = 1
    lr: float = 1e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0
    augmentation: object = None  # optional defenses.AugmentationPolicy

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"implant epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"implant batch_size must be >= 1, got {self.batch_size}")


def _train_epochs(model, images, labels, *, epochs, batch_size, lr, betas, seed,
                  augment_fn=None):
    """Shared cross-entropy loop; raises TrainingDiverged on non-finite loss."""
    device = model.device
    pixels = torch.from_numpy(stack_pixels(images).transpose(0, 3, 1, 2)).to(device)
    targets = torch.from_numpy(labels).to(device)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=lr, betas=betas)
    history = []
    last_good = copy.deepcopy(model.net.state_dict())
    model.net.train()
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for idx in batch_indices(n, batch_size):
            batch = torch.as_tensor(order[idx.start:idx.stop])
            x, y = pixels[batch], targets[batch]
            if augment_fn is not None:
                x = augment_fn(x, rng)
            loss = F.cross_entropy(model.logits(x), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}", last_good, history
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
        last_good = copy.deepcopy(model.net.state_dict())
    model.net.eval()
    return history


def compute_normalization(split: DatasetSplit):
    """Per-channel mean/std of the train split, the constants a victim
    fixes at pretrain time."""
    acc = np.zeros(3), np.zeros(3)
    n = 0
    for im in split.train:
        acc[0][:] += im.pixels.mean(axis=(0, 1))
        acc[1][:] += (im.pixels ** 2).mean(axis=(0, 1))
        n += 1
    mean = acc[0] / n
    std = np.sqrt(np.maximum(acc[1] / n - mean ** 2, 1e-8))
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def pretrain_classifier(architecture, split: DatasetSplit, cfg: PretrainConfig,
                        device="cpu") -> ClassifierModel:
    """Train a clean victim from scratch on the clean train split."""
    cfg.validate()
    normalization = compute_normalization(split)
    model = ClassifierModel.create(architecture, split.class_count, normalization,
                                   init_seed=cfg.seed, device=device)
    _train_epochs(model, split.train, labels_of(split.train),
                  epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                  betas=cfg.adam_betas, seed=cfg.seed)
    return model


def implant(f: ClassifierModel, d_prime: DatasetSplit, cfg: ImplantConfig) -> ClassifierModel:
    """Fine-tune the pretrained classifier on the poisoned retraining set.

    All layers train; the input model is untouched and the returned
    backdoor model records its parent's weight hash.
    """
    cfg.validate()
    if f.class_count != d_prime.class_count:
        raise ConfigError(
            f"model has {f.class_count} classes, dataset has {d_prime.class_count}"
        )
    fb = f.clone()
    fb.provenance = "backdoor"
    fb.parent_hash = f.weight_hash()
    augment_fn = None
    if cfg.augmentation is not None:
        from .defenses import make_augment_fn

        augment_fn = make_augment_fn(cfg.augmentation, d_prime.resolution)
    _train_epochs(fb, d_prime.train, labels_of(d_prime.train),
                  epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                  betas=cfg.adam_betas, seed=cfg.seed, augment_fn=augment_fn)
    return fb


def activate(fb: ClassifierModel, x: LabeledImage, g: TriggerGenerator) -> int:
    """Triggered inference: craft the input's own trigger and classify it."""
    crafted = apply_trigger(x, generate_trigger(g, x))
    return int(predict_labels(fb, [crafted])[0])


def save_classifier(model: ClassifierModel, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.net.state_dict(), path)
    manifest = {
        "architecture": model.architecture,
        "class_count": model.class_count,
        "normalization": [list(model.normalization[0]), list(model.normalization[1])],
        "provenance": model.provenance,
        "parent_hash": model.parent_hash,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_classifier(path, device="cpu") -> ClassifierModel:
    path = Path(path)
    m = json.loads(path.with_suffix(".json").read_text())
    normalization = (tuple(m["normalization"][0]), tuple(m["normalization"][1]))
    model = ClassifierModel.create(m["architecture"], m["class_count"], normalization)
    model.net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.net.eval()
    model.provenance = m["provenance"]
    model.parent_hash = m.get("parent_hash")
    return model.to(device)
