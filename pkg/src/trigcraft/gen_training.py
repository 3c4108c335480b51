"""Training the trigger generator against a frozen victim classifier.

Each batch is drawn shuffled from the balanced generator dataset and
routed by label: crafted target-class images are pushed toward their
least-likely class (feature erasure), crafted non-target images toward
the target class (activation), and a perceptual term keeps all crafted
images close to their originals. Loss terms are batch means so the
learning rate is insensitive to batch size.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .data import GeneratorDataset, LabeledImage, labels_of, stack_pixels
from .errors import ConfigError, TrainingDiverged
from .generator import (
    GeneratorArchitecture,
    TriggerGenerator,
    default_architecture,
    save_generator,
)
from .perceptual import PerceptualDistance, get_perceptual
from .tensorops import batch_indices, derive_seed, to_nchw
from .victim import ClassifierModel, predict_logits


@dataclass
class GenTrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 10.0
    epsilon: float = 25 / 255
    batch_size: int = 30
    iterations_per_epoch: int = 50
    epochs: int = 15
    lr: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    seed: int = 0

    def validate(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 to mix target and non-target images")
        if self.iterations_per_epoch < 1 or self.epochs < 1:
            raise ConfigError("iterations_per_epoch and epochs must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in [0, 1], got {self.epsilon}")


@dataclass
class LossBreakdown:
    l_target: float
    l_nontarget: float
    l_lpips: float
    l_total: float


@dataclass
class GenTrainResult:
    generator: TriggerGenerator
    epoch_losses: list[LossBreakdown]
    step_rows: list[tuple]  # (epoch, step, l_target, l_nontarget, l_lpips, l_total)


def least_likely_class(f: ClassifierModel, x: LabeledImage) -> int:
    """argmin of the clean model's logits on the clean image, lowest index on ties."""
    logits = predict_logits(f, [x])[0]
    return int(np.argmin(logits))


def least_likely_classes(f: ClassifierModel, images) -> np.ndarray:
    return np.argmin(predict_logits(f, images), axis=1).astype(np.int64)


def target_loss(f: ClassifierModel, crafted: torch.Tensor, y_llc: torch.Tensor):
    """Mean cross-entropy pushing crafted target images to their least-likely
    class. Returns (loss, count); count 0 flags an empty batch segment and the
    loss is an exact zero so the weighted total still composes.
    """
    if crafted.shape[0] == 0:
        return torch.zeros((), device=crafted.device), 0
    return F.cross_entropy(f.logits(crafted), y_llc), int(crafted.shape[0])


def nontarget_loss(f: ClassifierModel, crafted: torch.Tensor, y_t: int):
    """Mean cross-entropy pushing crafted non-target images to the target class."""
    if crafted.shape[0] == 0:
        return torch.zeros((), device=crafted.device), 0
    target = torch.full((crafted.shape[0],), y_t, dtype=torch.long, device=crafted.device)
    return F.cross_entropy(f.logits(crafted), target), int(crafted.shape[0])


def perceptual_loss(pairs, metric: PerceptualDistance | None = None) -> float:
    """Mean perceptual distance over (clean, crafted) image pairs."""
    if metric is None:
        metric = get_perceptual()
    clean = to_nchw(np.stack([np.asarray(a.pixels if isinstance(a, LabeledImage) else a) for a, _ in pairs]))
    crafted = to_nchw(np.stack([np.asarray(b.pixels if isinstance(b, LabeledImage) else b) for _, b in pairs]))
    device = next(metric.parameters()).device
    with torch.no_grad():
        return float(metric(clean.to(device), crafted.to(device)).mean())


def generator_batch_loss(g: TriggerGenerator, f: ClassifierModel,
                         clean: torch.Tensor, labels: torch.Tensor, y_t: int,
                         y_llc: torch.Tensor, weights, metric: PerceptualDistance):
    """One batch of the three-term objective; differentiable w.r.t. the generator."""
    alpha, beta, gamma = weights
    crafted = torch.clamp(clean + g.trigger_tensor(clean), 0.0, 1.0)
    is_target = labels == y_t
    l_t, _ = target_loss(f, crafted[is_target], y_llc[is_target])
    l_nt, _ = nontarget_loss(f, crafted[~is_target], y_t)
    l_p = metric(clean, crafted).mean()
    total = alpha * l_t + beta * l_nt + gamma * l_p
    parts = LossBreakdown(float(l_t.detach()), float(l_nt.detach()),
                          float(l_p.detach()), float(total.detach()))
    return total, parts


class _BatchStream:
    """Reshuffling index stream; a batch never spans two permutations."""

    def __init__(self, n, batch_size, rng):
        self.n, self.k, self.rng = n, batch_size, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next(self):
        if self.pos + self.k > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        out = self.perm[self.pos:self.pos + self.k]
        self.pos += self.k
        return out


def train_generator(f: ClassifierModel, dg: GeneratorDataset, cfg: GenTrainConfig,
                    arch: GeneratorArchitecture | None = None,
                    metric: PerceptualDistance | None = None,
                    out_dir=None, device="cpu",
                    training_config_hash=None) -> GenTrainResult:
    """Train a bounded trigger generator against the frozen classifier.

    The victim's weights are immutable throughout (verified cheaply by the
    caller via weight_hash). Per-epoch checkpoints and a per-step loss CSV
    are written when out_dir is given. A non-finite total loss aborts with
    the last completed epoch's weights attached to the exception.
    """
    cfg.validate()
    images = dg.all_images()
    if cfg.batch_size > len(images):
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds generator dataset size {len(images)}"
        )
    resolution = images[0].pixels.shape[:2]
    if arch is None:
        arch = default_architecture(resolution)
    if metric is None:
        metric = get_perceptual(device=device)
    g = TriggerGenerator.create(arch, cfg.epsilon,
                                init_seed=derive_seed(cfg.seed, "gen-init")).to(device)

    f_was_training = f.net.training
    grad_flags = [p.requires_grad for p in f.net.parameters()]
    f.net.eval()
    for p in f.net.parameters():
        p.requires_grad_(False)

    try:
        pixels = to_nchw(stack_pixels(images)).to(device)
        labels = torch.from_numpy(labels_of(images)).to(device)
        # least-likely classes from the clean images under the frozen model;
        # fixed once since neither changes during training
        llc = torch.zeros(len(images), dtype=torch.long, device=device)
        target_pos = [i for i, im in enumerate(images) if im.label == dg.y_t]
        if target_pos:
            llc_vals = least_likely_classes(f, [images[i] for i in target_pos])
            llc[torch.as_tensor(target_pos, device=device)] = torch.from_numpy(llc_vals).to(device)

        rng = np.random.default_rng(derive_seed(cfg.seed, "gen-batches"))
        torch.manual_seed(derive_seed(cfg.seed, "gen-train"))
        stream = _BatchStream(len(images), cfg.batch_size, rng)
        opt = torch.optim.Adam(g.net.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
        weights = (cfg.alpha, cfg.beta, cfg.gamma)

        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)

        step_rows, epoch_losses = [], []
        last_good = copy.deepcopy(g.net.state_dict())
        g.net.train()
        for epoch in range(1, cfg.epochs + 1):
            sums = np.zeros(4)
            for step in range(1, cfg.iterations_per_epoch + 1):
                batch = torch.as_tensor(stream.next(), device=device)
                total, parts = generator_batch_loss(
                    g, f, pixels[batch], labels[batch], dg.y_t, llc[batch],
                    weights, metric)
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite generator loss at epoch {epoch} step {step}",
                        last_good, step_rows)
                opt.zero_grad()
                total.backward()
                opt.step()
                row = (epoch, step, parts.l_target, parts.l_nontarget,
                       parts.l_lpips, parts.l_total)
                step_rows.append(row)
                sums += np.array(row[2:])
            mean = sums / cfg.iterations_per_epoch
            epoch_losses.append(LossBreakdown(*[float(v) for v in mean]))
            last_good = copy.deepcopy(g.net.state_dict())
            if out_dir is not None:
                save_generator(
                    g, out_dir / f"gen_epoch_{epoch}.pt", seed=cfg.seed,
                    training_config_hash=training_config_hash,
                    extra={"perceptual": metric.identity, "epoch": epoch})
        g.net.eval()

        if out_dir is not None:
            with open(out_dir / "gen_train_log.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "step", "l_target", "l_nontarget", "l_lpips", "l_total"])
                w.writerows(step_rows)
            save_generator(g, out_dir / "generator.pt", seed=cfg.seed,
                           training_config_hash=training_config_hash,
                           extra={"perceptual": metric.identity, "epoch": cfg.epochs})
        return GenTrainResult(generator=g, epoch_losses=epoch_losses, step_rows=step_rows)
    finally:
        for p, flag in zip(f.net.parameters(), grad_flags):
            p.requires_grad_(flag)
        f.net.train(f_was_training)
