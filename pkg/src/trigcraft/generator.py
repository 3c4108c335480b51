"""The image-specific trigger generator and the trigger application rule.

A bounded U-Net autoencoder maps an image to an additive trigger whose
l-infinity norm never exceeds a configured budget. The bound is built
into the network output (epsilon * tanh of the raw logits) so it holds
during training as well as inference, keeping gradients alive at the
boundary; application additionally hard-clamps the final image to [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import LabeledImage
from .errors import ConfigError, ShapeMismatchError
from .tensorops import batch_indices, to_nchw, to_nhwc


@dataclass
class GeneratorArchitecture:
    depth: int = 3
    base_channels: int = 32
    norm_kind: str = "instance"
    input_resolution: tuple[int, int] = (32, 32)

    def validate(self):
        if self.depth < 2:
            raise ConfigError(f"generator depth must be >= 2, got {self.depth}")
        h, w = self.input_resolution
        div = 2 ** self.depth
        if h % div or w % div:
            raise ConfigError(
                f"resolution {h}x{w} not divisible by 2^depth = {div}"
            )
        if self.norm_kind not in ("instance", "none"):
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")


def default_architecture(resolution) -> GeneratorArchitecture:
    """Sizing defaults: deeper/wider for 224-class inputs, compact for 32x32."""
    h, w = resolution
    if min(h, w) >= 224:
        return GeneratorArchitecture(depth=4, base_channels=64, input_resolution=(h, w))
    return GeneratorArchitecture(depth=3, base_channels=32, input_resolution=(h, w))


def _norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True, track_running_stats=False)
    return nn.Identity()


class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, norm_kind):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _norm(norm_kind, out_ch),
            nn.SiLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _norm(norm_kind, out_ch),
            nn.SiLU(),
        )

    def forward(self, x):
        return self.body(x)


class TriggerUNet(nn.Module):
    """Encoder/decoder with skip connections emitting a raw 3-channel field."""

    def __init__(self, arch: GeneratorArchitecture):
        super().__init__()
        arch.validate()
        self.arch = arch
        ch = arch.base_channels
        self.stem = _ConvBlock(3, ch, arch.norm_kind)
        enc, widths = [], [ch]
        for _ in range(arch.depth):
            enc.append(_ConvBlock(ch, ch * 2, arch.norm_kind))
            ch *= 2
            widths.append(ch)
        self.encoder = nn.ModuleList(enc)
        dec = []
        for skip_ch in reversed(widths[:-1]):
            dec.append(_ConvBlock(ch + skip_ch, skip_ch, arch.norm_kind))
            ch = skip_ch
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv2d(ch, 3, kernel_size=1)
        self.pool = nn.AvgPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, x):
        skips = [self.stem(x)]
        h = skips[0]
        for block in self.encoder:
            h = block(self.pool(h))
            skips.append(h)
        for block, skip in zip(self.decoder, reversed(skips[:-1])):
            h = block(torch.cat([self.up(h), skip], dim=1))
        return self.head(h)


@dataclass
class TriggerGenerator:
    """Trained U-Net weights plus the trigger's l-infinity budget."""

    arch: GeneratorArchitecture
    net: TriggerUNet
    epsilon: float

    @classmethod
    def create(cls, arch: GeneratorArchitecture, epsilon: float, init_seed=None):
        if not 0.0 <= epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in [0, 1] pixel units, got {epsilon}")
        if init_seed is not None:
            torch.manual_seed(init_seed)
        return cls(arch=arch, net=TriggerUNet(arch), epsilon=float(epsilon))

    @property
    def device(self):
        return next(self.net.parameters()).device

    def to(self, device):
        self.net.to(device)
        return self

    def trigger_tensor(self, images_nchw: torch.Tensor) -> torch.Tensor:
        """Bounded triggers for an NCHW batch, differentiable."""
        if images_nchw.shape[-2:] != torch.Size(self.arch.input_resolution):
            raise ShapeMismatchError(
                f"generator expects {self.arch.input_resolution}, "
                f"got {tuple(images_nchw.shape[-2:])}"
            )
        return self.epsilon * torch.tanh(self.net(images_nchw))

    def weight_hash(self):
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def generate_trigger(g: TriggerGenerator, x: LabeledImage) -> np.ndarray:
    """Image-specific trigger for one image, (H, W, 3) with max|delta| <= epsilon."""
    h, w = g.arch.input_resolution
    if x.pixels.shape != (h, w, 3):
        raise ShapeMismatchError(
            f"image shape {x.pixels.shape} does not match generator "
            f"resolution ({h}, {w}, 3)"
        )
    g.net.eval()
    with torch.no_grad():
        delta = g.trigger_tensor(to_nchw(x.pixels).to(g.device))
    return to_nhwc(delta)[0]


def apply_trigger(x: LabeledImage, delta: np.ndarray) -> LabeledImage:
    """Add a trigger and clamp to the valid pixel range; label is preserved."""
    if delta.shape != x.pixels.shape:
        raise ShapeMismatchError(
            f"trigger shape {delta.shape} does not match image {x.pixels.shape}"
        )
    crafted = np.clip(x.pixels + delta.astype(np.float32), 0.0, 1.0)
    return LabeledImage(pixels=crafted.astype(np.float32), label=x.label)


def craft_images(g: TriggerGenerator, images: Sequence[LabeledImage],
                 batch_size: int = 64) -> list[LabeledImage]:
    """Generate and apply triggers for a list of images, batched."""
    g.net.eval()
    out = []
    with torch.no_grad():
        for idx in batch_indices(len(images), batch_size):
            batch = [images[i] for i in idx]
            t = to_nchw(np.stack([im.pixels for im in batch])).to(g.device)
            crafted = torch.clamp(t + g.trigger_tensor(t), 0.0, 1.0)
            arrs = to_nhwc(crafted)
            out.extend(
                LabeledImage(pixels=arr, label=im.label)
                for arr, im in zip(arrs, batch)
            )
    return out


def trigger_fn(g: TriggerGenerator):
    """Batch crafting closure used by the evaluation harnesses."""

    def fn(images):
        return craft_images(g, images)

    return fn


def save_generator(g: TriggerGenerator, path, seed=None,
                   training_config_hash=None, extra=None):
    """Write the weights blob plus its self-describing sidecar manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(g.net.state_dict(), path)
    manifest = {
        "arch": asdict(g.arch),
        "epsilon": g.epsilon,
        "seed": seed,
        "training_config_hash": training_config_hash,
    }
    if extra:
        manifest.update(extra)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_generator(path, device="cpu") -> TriggerGenerator:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    arch_d = dict(manifest["arch"])
    arch_d["input_resolution"] = tuple(arch_d["input_resolution"])
    arch = GeneratorArchitecture(**arch_d)
    g = TriggerGenerator(arch=arch, net=TriggerUNet(arch), epsilon=float(manifest["epsilon"]))
    g.net.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    g.net.eval()
    return g.to(device)
