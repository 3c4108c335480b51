"""Fetch helper: download a dataset archive, verify its checksum and
materialize the class-per-directory tree that `load_dataset` expects.

This is deliberately minimal; anything beyond verified download +
extraction (mirrors, resumption, caching services) is out of scope.
"""

from __future__ import annotations

import hashlib
import pickle
import shutil
import tarfile
import tempfile
import urllib.request
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ChecksumError, ConfigError, DataError

CIFAR10_CLASS_NAMES = [
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
]

ARCHIVES = {
    "cifar10": {
        "url": "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz",
        "md5": "c58f30108f718f92721af3b95e74349a",
    },
    "imagenette-160": {
        "url": "https://s3.amazonaws.com/fast-ai-imageclas/imagenette2-160.tgz",
        "md5": "e793b78cc4c9e9a4ccc0c1155377a412",
    },
}


def _file_digest(path, algo):
    h = hashlib.new(algo)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_checksum(path, md5=None, sha256=None):
    """Check a file against the given digests; raises ChecksumError on mismatch."""
    if md5 is None and sha256 is None:
        raise ConfigError("no checksum given to verify against")
    for algo, expected in (("md5", md5), ("sha256", sha256)):
        if expected is None:
            continue
        actual = _file_digest(path, algo)
        if actual != expected.lower():
            raise ChecksumError(
                f"{algo} mismatch for {path}: expected {expected}, got {actual}"
            )


def _materialize_cifar10(archive: Path, root: Path):
    with tarfile.open(archive, "r:gz") as tar, tempfile.TemporaryDirectory() as tmp:
        tar.extractall(tmp)
        batch_dir = Path(tmp) / "cifar-10-batches-py"
        if not batch_dir.is_dir():
            raise DataError(f"archive {archive} does not contain cifar-10-batches-py")

        def load_batches(names):
            images, labels = [], []
            for name in names:
                with open(batch_dir / name, "rb") as f:
                    entry = pickle.load(f, encoding="latin1")
                images.append(np.asarray(entry["data"], dtype=np.uint8))
                labels.extend(entry["labels"])
            data = np.concatenate(images).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
            return data, labels

        splits = {
            "train": load_batches([f"data_batch_{i}" for i in range(1, 6)]),
            "val": load_batches(["test_batch"]),
        }
        counters = {}
        for split, (data, labels) in splits.items():
            for img, label in zip(data, labels):
                cls = CIFAR10_CLASS_NAMES[label]
                d = root / split / cls
                d.mkdir(parents=True, exist_ok=True)
                k = counters.setdefault((split, cls), 0)
                Image.fromarray(img).save(d / f"{cls}_{k:05d}.png")
                counters[(split, cls)] = k + 1


def _materialize_imagenette(archive: Path, root: Path):
    with tarfile.open(archive, "r:gz") as tar, tempfile.TemporaryDirectory() as tmp:
        tar.extractall(tmp)
        inner = Path(tmp) / "imagenette2-160"
        if not inner.is_dir():
            candidates = [p for p in Path(tmp).iterdir() if p.is_dir()]
            if len(candidates) != 1:
                raise DataError(f"unexpected archive layout in {archive}")
            inner = candidates[0]
        root.mkdir(parents=True, exist_ok=True)
        for split in ("train", "val"):
            src = inner / split
            if not src.is_dir():
                raise DataError(f"archive {archive} missing split {split!r}")
            shutil.copytree(src, root / split, dirs_exist_ok=True)


def fetch_dataset(profile: str, root, archive_path=None, md5=None, sha256=None):
    """Fetch one dataset profile into `root`.

    With `archive_path` set, the download is skipped and the local archive
    is verified and extracted instead. Checksums default to the
    publisher's values; overrides replace them.
    """
    if profile not in ARCHIVES:
        raise ConfigError(f"no archive known for profile {profile!r}")
    root = Path(root)
    info = ARCHIVES[profile]
    md5 = md5 if md5 is not None else (None if sha256 else info["md5"])

    with tempfile.TemporaryDirectory() as tmp:
        if archive_path is None:
            archive = Path(tmp) / Path(info["url"]).name
            try:
                urllib.request.urlretrieve(info["url"], archive)
            except Exception as exc:
                raise DataError(f"download of {info['url']} failed: {exc}") from exc
        else:
            archive = Path(archive_path)
            if not archive.is_file():
                raise DataError(f"archive {archive} does not exist")
        verify_checksum(archive, md5=md5, sha256=sha256)
        if profile == "cifar10":
            _materialize_cifar10(archive, root)
        else:
            _materialize_imagenette(archive, root)
    return root
