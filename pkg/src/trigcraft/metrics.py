"""Effectiveness and stealthiness metrics plus the sweep harnesses.

Effectiveness: attack success rate (triggered non-target images predicted
as the target class), benign accuracy (clean top-1), and fooling rate.
The fooling rate here is label-free: the fraction of images whose
prediction changes when the trigger is applied. Stealthiness: perceptual
distance, PSNR and the l-infinity gap, the latter two on the 0-255 scale.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from matplotlib.figure import Figure

from .data import LabeledImage, labels_of, stack_pixels
from .errors import IncompleteSweepError, InfeasibleRateError, PairingError, UndefinedMetricError
from .perceptual import PerceptualDistance, get_perceptual
from .tensorops import batch_indices, to_nchw
from .victim import ClassifierModel, predict_labels

FR_DEFINITION = "prediction-change: fraction of inputs whose prediction differs from the same model's clean prediction"

TriggerFn = Callable[[Sequence[LabeledImage]], list[LabeledImage]]


@dataclass
class StealthResult:
    lpips_mean: float
    psnr_mean: float  # math.inf when every pair is identical
    linf_max: float   # 0-255 units
    n_identical_pairs: int = 0

    def as_tuple(self):
        return (self.lpips_mean, self.psnr_mean, self.linf_max)


@dataclass
class MetricsReport:
    asr: float | None = None
    ba: float | None = None
    fr: float | None = None
    lpips_mean: float | None = None
    psnr_mean: float | None = None
    linf_max: float | None = None
    config_ref: str = ""
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        d = {}
        for k in ("asr", "ba", "fr", "lpips_mean", "psnr_mean", "linf_max"):
            v = getattr(self, k)
            if v is not None and math.isinf(v):
                v = None  # +inf PSNR (identical images) serializes as null
            d[k] = v
        d["config_ref"] = self.config_ref
        d["notes"] = dict(self.notes)
        d["notes"].setdefault("fr_definition", FR_DEFINITION)
        return d

    def save(self, path):
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        )


def compute_asr(model: ClassifierModel, val_nontarget: Sequence[LabeledImage],
                trigger_fn: TriggerFn, y_t: int) -> float:
    """Fraction of triggered non-target images classified as the target class."""
    if not val_nontarget:
        raise UndefinedMetricError("ASR undefined on an empty image set")
    if any(im.label == y_t for im in val_nontarget):
        raise UndefinedMetricError(
            "ASR input must exclude target-class images"
        )
    preds = predict_labels(model, trigger_fn(list(val_nontarget)))
    return float(np.mean(preds == y_t))


def compute_ba(model: ClassifierModel, val_clean: Sequence[LabeledImage]) -> float:
    """Top-1 accuracy on clean images."""
    if not val_clean:
        raise UndefinedMetricError("BA undefined on an empty image set")
    preds = predict_labels(model, list(val_clean))
    return float(np.mean(preds == labels_of(val_clean)))


def compute_fr(model: ClassifierModel, val: Sequence[LabeledImage],
               trigger_fn: TriggerFn) -> float:
    """Label-free fooling rate: prediction changes under the trigger."""
    if not val:
        raise UndefinedMetricError("FR undefined on an empty image set")
    clean_preds = predict_labels(model, list(val))
    trig_preds = predict_labels(model, trigger_fn(list(val)))
    return float(np.mean(clean_preds != trig_preds))


def compute_stealth(clean: Sequence[LabeledImage], poisoned: Sequence[LabeledImage],
                    metric: PerceptualDistance | None = None) -> StealthResult:
    """Perceptual mean, PSNR mean (dB, 0-255 scale) and worst-case l-infinity
    over aligned (clean, poisoned) pairs. Identical pairs contribute +inf
    PSNR and are excluded from the mean, with their count reported.
    """
    if len(clean) != len(poisoned):
        raise PairingError(
            f"cannot pair {len(clean)} clean with {len(poisoned)} poisoned images"
        )
    if not clean:
        raise UndefinedMetricError("stealth metrics undefined on empty sets")
    for a, b in zip(clean, poisoned):
        if a.pixels.shape != b.pixels.shape:
            raise PairingError("clean/poisoned image shapes differ")
    if metric is None:
        metric = get_perceptual()

    psnrs, linf = [], 0.0
    n_identical = 0
    for a, b in zip(clean, poisoned):
        diff = (a.pixels.astype(np.float64) - b.pixels.astype(np.float64)) * 255.0
        linf = max(linf, float(np.abs(diff).max()))
        mse = float(np.mean(diff * diff))
        if mse == 0.0:
            n_identical += 1
        else:
            psnrs.append(10.0 * math.log10(255.0 ** 2 / mse))
    psnr_mean = float(np.mean(psnrs)) if psnrs else math.inf

    device = next(metric.parameters()).device
    dists = []
    with torch.no_grad():
        for idx in batch_indices(len(clean), 64):
            a = to_nchw(stack_pixels([clean[i] for i in idx])).to(device)
            b = to_nchw(stack_pixels([poisoned[i] for i in idx])).to(device)
            dists.append(metric(a, b).cpu().numpy())
    lpips_mean = float(np.concatenate(dists).mean())
    return StealthResult(lpips_mean=lpips_mean, psnr_mean=psnr_mean,
                         linf_max=linf, n_identical_pairs=n_identical)


def split_by_target(val: Sequence[LabeledImage], y_t: int):
    nontarget = [im for im in val if im.label != y_t]
    target = [im for im in val if im.label == y_t]
    return nontarget, target


def sweep_epsilon(clean_model: ClassifierModel, entries, val: Sequence[LabeledImage],
                  y_t: int, out_dir=None):
    """Evaluate FR/ASR of clean vs. backdoor models over trigger budgets.

    entries: iterable of (epsilon, trigger_fn, backdoor_model); an entry
    with a missing trigger_fn or model makes the sweep incomplete.
    Returns rows (epsilon, fr_clean, asr_clean, fr_bd, asr_bd) sorted by
    epsilon and optionally writes them to ``epsilon_sweep.csv``.
    """
    entries = list(entries)
    missing = [e for e, fn, m in entries if fn is None or m is None]
    if missing:
        raise IncompleteSweepError(
            f"no generator/model for epsilon values {sorted(missing)}", missing
        )
    nontarget, _ = split_by_target(val, y_t)
    rows = []
    for eps, fn, backdoor in sorted(entries, key=lambda e: e[0]):
        rows.append((
            eps,
            compute_fr(clean_model, val, fn),
            compute_asr(clean_model, nontarget, fn, y_t),
            compute_fr(backdoor, val, fn),
            compute_asr(backdoor, nontarget, fn, y_t),
        ))
    if out_dir is not None:
        write_csv(Path(out_dir) / "epsilon_sweep.csv",
                  ["epsilon", "fr_clean", "asr_clean", "fr_bd", "asr_bd"], rows)
    return rows


def sweep_poison_rate(build_unit, lambdas, val: Sequence[LabeledImage], y_t: int,
                      out_dir=None, method="ours"):
    """Implant + evaluate once per poisoning rate.

    build_unit(lam) must return (model, trigger_fn) for that rate;
    infeasible rates are skipped and annotated. Returns rows
    (lambda, asr, ba, note) and optionally emits CSV + a two-panel plot.
    """
    nontarget, _ = split_by_target(val, y_t)
    rows = []
    for lam in lambdas:
        try:
            model, fn = build_unit(lam)
        except InfeasibleRateError as exc:
            rows.append((lam, None, None, f"skipped: {exc}"))
            continue
        rows.append((lam, compute_asr(model, nontarget, fn, y_t),
                     compute_ba(model, val), ""))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_csv(out_dir / f"poison_rate_sweep_{method}.csv",
                  ["lambda", "asr", "ba", "note"], rows)
        plot_rate_sweep({method: rows}, out_dir / f"poison_rate_sweep_{method}.png")
    return rows


def plot_rate_sweep(rows_by_method: dict, path):
    """ASR and BA against poisoning rate, one line per method."""
    fig = Figure(figsize=(8, 3.2))
    ax_asr, ax_ba = fig.subplots(1, 2)
    for method, rows in rows_by_method.items():
        pts = [(lam, asr, ba) for lam, asr, ba, _ in rows if asr is not None]
        if not pts:
            continue
        lams = [p[0] for p in pts]
        ax_asr.plot(lams, [p[1] for p in pts], marker="o", label=method)
        ax_ba.plot(lams, [p[2] for p in pts], marker="o", label=method)
    for ax, title in ((ax_asr, "ASR"), (ax_ba, "BA")):
        ax.set_xlabel("poisoning rate")
        ax.set_ylabel(title)
        ax.set_ylim(0, 1.02)
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return path


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path
