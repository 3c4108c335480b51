"""Shared numpy/torch plumbing: array layout, seeding, device selection."""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from .errors import ConfigError


def to_nchw(pixels: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) float array -> float32 NCHW tensor."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    """NCHW tensor -> (N, H, W, 3) float32 array."""
    return t.detach().cpu().permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32, copy=False)


def derive_seed(base_seed: int, label: str) -> int:
    """Stable per-stage seed so stage outputs do not depend on run order."""
    digest = hashlib.sha256(f"{base_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def resolve_device(spec="auto") -> torch.device:
    """Map the CLI device flag (auto|cpu|accelerator index|cuda:N) to a device."""
    spec = str(spec)
    if spec == "auto":
        return torch.device("cuda") if torch.cuda.is_available() else torch.device("cpu")
    if spec == "cpu":
        return torch.device("cpu")
    name = f"cuda:{spec}" if spec.isdigit() else spec
    try:
        device = torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"bad device {spec!r}: {exc}") from exc
    if device.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError(f"device {spec!r} requested but no accelerator is available")
    return device


def batch_indices(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield range(start, min(start + batch_size, n))
