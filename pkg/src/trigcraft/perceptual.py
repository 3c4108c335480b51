"""Perceptual image distance built on deep features.

Distance form: unit-normalize each layer's channel activations, take the
channel-mean squared difference, average spatially and sum over layers.
The feature extractor is fixed at construction and never updated.

Backbones:
  * ``vgg16``: torchvision VGG-16 features (requires pretrained weights;
    raises at startup when they cannot be loaded).
  * ``random-v1``: a small convolutional pyramid with frozen, seeded
    random weights. Works fully offline and is the desk-scale default;
    distances are not comparable to published perceptual scores, so the
    backbone identity travels with every report and manifest.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError, PerceptualWeightsError

_RANDOM_BACKBONE_SEED = 20240713

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class _RandomPyramid(nn.Module):
    """Frozen random conv stack; taps after every stage."""

    def __init__(self):
        super().__init__()
        torch.manual_seed(_RANDOM_BACKBONE_SEED)
        widths = (16, 32, 64, 64)
        layers, in_ch = [], 3
        for w in widths:
            layers.append(nn.Sequential(nn.Conv2d(in_ch, w, 3, padding=1), nn.SiLU()))
            in_ch = w
        self.stages = nn.ModuleList(layers)
        self.pool = nn.AvgPool2d(2)

    def forward(self, x):
        feats = []
        h = x * 2.0 - 1.0
        for i, stage in enumerate(self.stages):
            if i:
                h = self.pool(h)
            h = stage(h)
            feats.append(h)
        return feats


class _Vgg16Features(nn.Module):
    _TAPS = (3, 8, 15, 22, 29)  # relu1_2 .. relu5_3

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import VGG16_Weights, vgg16

            net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise PerceptualWeightsError(
                f"pretrained vgg16 weights unavailable: {exc}; "
                "use backbone='random-v1' or provide the torchvision cache"
            ) from exc
        self.features = net.features[: self._TAPS[-1] + 1]
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        h = (x - self.mean) / self.std
        feats = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self._TAPS:
                feats.append(h)
        return feats


def _unit_normalize(feat, eps=1e-10):
    norm = torch.sqrt(torch.sum(feat * feat, dim=1, keepdim=True) + eps)
    return feat / norm


class PerceptualDistance(nn.Module):
    """Fixed-feature perceptual distance; symmetric and zero on identity.

    Each backbone carries a fixed output scale calibrating typical
    bounded-perturbation distances into the usual perceptual-score range
    (a few tenths), so the distortion weight in the generator loss has
    comparable leverage across backbones.
    """

    _SCALES = {"random-v1": 20.0, "vgg16": 1.0}

    def __init__(self, backbone="random-v1", device="cpu"):
        super().__init__()
        if backbone == "random-v1":
            self.extractor = _RandomPyramid()
        elif backbone == "vgg16":
            self.extractor = _Vgg16Features()
        else:
            raise ConfigError(f"unknown perceptual backbone {backbone!r}")
        self.backbone = backbone
        self.output_scale = self._SCALES[backbone]
        for p in self.extractor.parameters():
            p.requires_grad_(False)
        self.extractor.eval()
        self.to(device)

    @property
    def identity(self):
        ident = {"backbone": self.backbone, "output_scale": self.output_scale}
        if self.backbone == "random-v1":
            ident["seed"] = _RANDOM_BACKBONE_SEED
        return ident

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Per-pair distances for NCHW batches in [0, 1]."""
        fx, fy = self.extractor(x), self.extractor(y)
        total = None
        for a, b in zip(fx, fy):
            diff = _unit_normalize(a) - _unit_normalize(b)
            d = diff.pow(2).mean(dim=(1, 2, 3))
            total = d if total is None else total + d
        return self.output_scale * total

    def mean_distance(self, x, y):
        return self.forward(x, y).mean()


_CACHE: dict[tuple, PerceptualDistance] = {}


def get_perceptual(backbone="random-v1", device="cpu") -> PerceptualDistance:
    """Shared instances; construction is the startup point where missing
    pretrained weights surface as an error."""
    key = (backbone, str(device))
    if key not in _CACHE:
        _CACHE[key] = PerceptualDistance(backbone, device)
    return _CACHE[key]
