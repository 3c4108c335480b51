"""End-to-end experiment orchestration.

A single TOML/JSON config describes one experiment (dataset, method,
budgets, training blocks, optional defenses). Artifacts are content
addressed: victims and trigger generators live in shared stores keyed by
the inputs that determine them, each run gets ``runs/<config-hash>/``,
and rerunning an identical config reuses whatever already exists, so a
run is resumable stage by stage and sweeps never collide.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import baselines as bl
from .data import (
    DatasetSplit,
    PoisonPlan,
    build_generator_dataset,
    build_poisoned_dataset,
    dataset_fingerprint,
    load_dataset,
    make_poison_plan,
    poison_audit,
)
from .defenses import AugmentationPolicy, strip_evaluate, strip_threshold_stats
from .errors import ConfigError, DataError, TrigcraftError
from .generator import (
    GeneratorArchitecture,
    default_architecture,
    load_generator,
    trigger_fn,
)
from .gen_training import GenTrainConfig, train_generator
from .metrics import (
    MetricsReport,
    compute_asr,
    compute_ba,
    compute_fr,
    compute_stealth,
    split_by_target,
    write_csv,
)
from .perceptual import get_perceptual
from .tensorops import derive_seed, resolve_device
from .victim import (
    ClassifierModel,
    ImplantConfig,
    PretrainConfig,
    implant,
    load_classifier,
    pretrain_classifier,
    save_classifier,
)

TOOLKIT_VERSION = "0.1.0"
METHODS = ("ours", "clba", "grtba")


def parse_pixel_value(v) -> float:
    """Accept 0.098, "25/255" or 25 (interpreted on the 0-255 scale)."""
    if isinstance(v, str):
        try:
            v = float(Fraction(v))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse pixel value {v!r}") from exc
    v = float(v)
    if v > 1.0:
        v /= 255.0
    if not 0.0 <= v <= 1.0:
        raise ConfigError(f"pixel value {v} outside [0, 1]")
    return v


@dataclass
class VictimConfig:
    architecture: str = "small-resnet"
    pretrained: bool = False          # torchvision hub weights (full scale)
    checkpoint: str | None = None     # explicit pretrained model path
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)


@dataclass
class BaselineConfig:
    fgsm_epsilon: float = 16 / 255
    patch_size: int = 50
    grtba_epsilon: float = 40 / 255


@dataclass
class StripConfig:
    n_overlays: int = 100
    n_samples: int = 100


@dataclass
class ExperimentConfig:
    profile: str = "cifar10"
    data_root: str = "data"
    target_class: int = 7
    method: str = "ours"
    epsilon: float = 25 / 255
    lam: float = 0.05
    seed: int = 0
    output_dir: str = "out"
    device: str = "auto"
    victim: VictimConfig = field(default_factory=VictimConfig)
    generator_arch: GeneratorArchitecture | None = None
    gen_train: GenTrainConfig = field(default_factory=GenTrainConfig)
    implant_cfg: ImplantConfig = field(default_factory=ImplantConfig)
    baselines: BaselineConfig = field(default_factory=BaselineConfig)
    strip: StripConfig | None = None
    perceptual_backbone: str = "random-v1"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        self.epsilon = parse_pixel_value(self.epsilon)
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda {self.lam} outside [0, 1]")
        # the trigger bound lives on the experiment; keep the training block in sync
        self.gen_train.epsilon = self.epsilon

    def hash_payload(self) -> dict:
        """Everything that determines results; output_dir and device are
        locations/placement, not semantics."""
        d = dataclasses.asdict(self)
        d.pop("output_dir")
        d.pop("device")
        return d

    def config_hash(self) -> str:
        return stable_hash(self.hash_payload())


def stable_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, default=_json_default)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _json_default(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, (tuple, set, frozenset)):
        return list(o)
    raise TypeError(f"cannot hash {type(o)}")


def _merge_dataclass(cls, values, **overrides):
    if values is None:
        values = {}
    if isinstance(values, cls):
        return values
    known = {f.name: f for f in dataclasses.fields(cls)}
    bad = set(values) - set(known)
    if bad:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(bad)}")
    kwargs = dict(values)
    kwargs.update(overrides)
    for key in ("adam_betas", "crop_scale"):
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def config_from_dict(raw: dict, **overrides) -> ExperimentConfig:
    """Build a validated ExperimentConfig from a parsed TOML/JSON document."""
    raw = dict(raw)
    exp = dict(raw.pop("experiment", {}))
    exp.update({k: v for k, v in raw.items() if not isinstance(v, dict)})

    sections = {k: v for k, v in raw.items() if isinstance(v, dict)}
    known_sections = {"victim", "generator", "generator_training", "implant",
                      "baselines", "defenses"}
    bad = set(sections) - known_sections
    if bad:
        raise ConfigError(f"unknown config sections: {sorted(bad)}")

    victim_raw = dict(sections.get("victim", {}))
    pretrain_raw = victim_raw.pop("pretrain", {})
    victim = _merge_dataclass(
        VictimConfig, victim_raw,
        pretrain=_merge_dataclass(PretrainConfig, pretrain_raw))

    gen_raw = dict(sections.get("generator", {}))
    arch = None
    if gen_raw:
        if "input_resolution" in gen_raw:
            gen_raw["input_resolution"] = tuple(gen_raw["input_resolution"])
        arch = _merge_dataclass(GeneratorArchitecture, gen_raw)

    gt_raw = dict(sections.get("generator_training", {}))
    perceptual_backbone = gt_raw.pop("perceptual_backbone", exp.pop("perceptual_backbone", "random-v1"))
    gen_train = _merge_dataclass(GenTrainConfig, gt_raw)

    implant_raw = dict(sections.get("implant", {}))
    aug_raw = implant_raw.pop("augmentation", None)
    augmentation = None
    if aug_raw is not None:
        augmentation = _merge_dataclass(AugmentationPolicy, aug_raw)
    implant_cfg = _merge_dataclass(ImplantConfig, implant_raw, augmentation=augmentation)

    baselines_raw = dict(sections.get("baselines", {}))
    for key in ("fgsm_epsilon", "grtba_epsilon"):
        if key in baselines_raw:
            baselines_raw[key] = parse_pixel_value(baselines_raw[key])
    baseline_cfg = _merge_dataclass(BaselineConfig, baselines_raw)

    defenses_raw = dict(sections.get("defenses", {}))
    strip = None
    if "strip" in defenses_raw:
        strip = _merge_dataclass(StripConfig, defenses_raw["strip"])

    if "lambda" in exp:
        exp["lam"] = exp.pop("lambda")
    exp.update(overrides)
    try:
        cfg = ExperimentConfig(
            victim=victim, generator_arch=arch, gen_train=gen_train,
            implant_cfg=implant_cfg, baselines=baseline_cfg, strip=strip,
            perceptual_backbone=perceptual_backbone, **exp)
    except TypeError as exc:
        raise ConfigError(f"bad experiment config: {exc}") from exc
    return cfg


def load_config(path, **overrides) -> ExperimentConfig:
    """Parse a TOML (or JSON) experiment config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix == ".json":
        raw = json.loads(text)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # python 3.10
            import tomli as tomllib
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw, **overrides)


@dataclass
class RunManifest:
    config_hash: str
    status: str = "running"
    stages_completed: list[str] = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    toolkit_version: str = TOOLKIT_VERSION
    error: str | None = None
    profile: str = ""
    method: str = ""

    def save(self, path):
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


STAGE_ORDER = ("dataset", "victim", "generator", "poison", "implant", "evaluate", "defend")


class Experiment:
    """Stage-by-stage executor with content-addressed artifact reuse."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.device = resolve_device(cfg.device)
        self.out_root = Path(cfg.output_dir)
        self.run_dir = self.out_root / "runs" / cfg.config_hash()
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(config_hash=cfg.config_hash(),
                                    profile=cfg.profile, method=cfg.method)
        self._split = None
        self._fingerprint = None
        self._victim = None
        self._generator = None
        self._plan = None
        self._d_prime = None
        self._backdoor = None
        self._activation_fn = None
        (self.run_dir / "config.json").write_text(
            json.dumps(cfg.hash_payload(), indent=2, sort_keys=True, default=_json_default) + "\n")

    # ---- stages ------------------------------------------------------

    def dataset(self) -> DatasetSplit:
        if self._split is None:
            self._split = load_dataset(self.cfg.data_root, self.cfg.profile)
            self._fingerprint = dataset_fingerprint(self._split)
            c = self._split.class_count
            if not 0 <= self.cfg.target_class < c:
                raise ConfigError(f"target_class {self.cfg.target_class} outside [0, {c})")
            self._done("dataset", dataset_fingerprint=self._fingerprint)
        return self._split

    def victim_key(self) -> str:
        self.dataset()
        return stable_hash({
            "fingerprint": self._fingerprint,
            "victim": dataclasses.asdict(self.cfg.victim),
        })

    def victim(self) -> ClassifierModel:
        if self._victim is not None:
            return self._victim
        split = self.dataset()
        vcfg = self.cfg.victim
        if vcfg.checkpoint:
            model = load_classifier(vcfg.checkpoint, self.device)
            path = Path(vcfg.checkpoint)
        else:
            store = self.out_root / "victims" / self.victim_key()
            path = store / "model.pt"
            if path.exists():
                model = load_classifier(path, self.device)
            else:
                if vcfg.pretrained:
                    model = ClassifierModel.create(
                        vcfg.architecture, split.class_count,
                        ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
                        init_seed=vcfg.pretrain.seed, pretrained=True,
                        device=self.device)
                    # hub weights come classifier-ready; still fine-tune on the
                    # clean split so the head fits this class set
                    model = implant(model, split, ImplantConfig(
                        batch_size=vcfg.pretrain.batch_size,
                        epochs=vcfg.pretrain.epochs, lr=vcfg.pretrain.lr,
                        adam_betas=(0.9, 0.999), seed=vcfg.pretrain.seed))
                    model.provenance = "clean"
                    model.parent_hash = None
                else:
                    model = pretrain_classifier(vcfg.architecture, split,
                                                vcfg.pretrain, self.device)
                save_classifier(model, path)
        self._victim = model
        self._done("victim", victim_model=str(path))
        return model

    def generator_key(self) -> str:
        return stable_hash({
            "victim": self.victim_key(),
            "target_class": self.cfg.target_class,
            "dg_seed": derive_seed(self.cfg.seed, "generator-dataset"),
            "gen_train": dataclasses.asdict(self._resolved_gen_train()),
            "arch": dataclasses.asdict(self._resolved_arch()),
            "perceptual": self.cfg.perceptual_backbone,
        })

    def _resolved_arch(self) -> GeneratorArchitecture:
        split = self.dataset()
        if self.cfg.generator_arch is not None:
            arch = dataclasses.replace(self.cfg.generator_arch,
                                       input_resolution=split.resolution)
        else:
            arch = default_architecture(split.resolution)
        return arch

    def _resolved_gen_train(self) -> GenTrainConfig:
        gt = dataclasses.replace(self.cfg.gen_train)
        if gt.seed == 0:
            gt.seed = derive_seed(self.cfg.seed, "generator")
        return gt

    def generator(self):
        if self._generator is not None:
            return self._generator
        if self.cfg.method != "ours":
            raise ConfigError(f"method {self.cfg.method!r} does not use a trigger generator")
        split = self.dataset()
        victim = self.victim()
        store = self.out_root / "generators" / self.generator_key()
        final = store / "generator.pt"
        if final.exists():
            self._generator = load_generator(final, self.device)
        else:
            dg = build_generator_dataset(split, self.cfg.target_class,
                                         derive_seed(self.cfg.seed, "generator-dataset"))
            metric = get_perceptual(self.cfg.perceptual_backbone, self.device)
            before = victim.weight_hash()
            result = train_generator(
                victim, dg, self._resolved_gen_train(), arch=self._resolved_arch(),
                metric=metric, out_dir=store, device=self.device,
                training_config_hash=self.generator_key())
            if victim.weight_hash() != before:
                raise TrigcraftError("victim weights changed during generator training")
            self._generator = result.generator
        self._done("generator", generator=str(final),
                   gen_train_log=str(store / "gen_train_log.csv"))
        return self._generator

    def plan(self) -> PoisonPlan:
        if self._plan is None:
            split = self.dataset()
            plan_path = self.run_dir / "plan.json"
            if plan_path.exists():
                self._plan = PoisonPlan.load(plan_path)
            else:
                self._plan = make_poison_plan(split, self.cfg.target_class, self.cfg.lam,
                                              derive_seed(self.cfg.seed, "plan"))
                self._plan.save(plan_path)
        return self._plan

    def _craft_planned(self, split, plan):
        """Method-specific poisoned split plus the activation trigger_fn."""
        cfg = self.cfg
        if cfg.method == "ours":
            g = self.generator()
            return build_poisoned_dataset(split, plan, g), trigger_fn(g)
        idx = sorted(plan.poison_indices)
        train = list(split.train)
        trig_path = self.run_dir / "trigger.json"
        if cfg.method == "clba":
            patch = bl.PatchTrigger.random(cfg.baselines.patch_size,
                                           derive_seed(cfg.seed, "patch"))
            victim = self.victim()
            crafted = [bl.clba_poison(victim, split.train[i], cfg.baselines.fgsm_epsilon, patch)
                       for i in idx]
            bl.save_trigger(patch, trig_path)
            activation = bl.patch_trigger_fn(patch)
        else:  # grtba
            noise = bl.GlobalNoiseTrigger.random(split.resolution, cfg.baselines.grtba_epsilon,
                                                 derive_seed(cfg.seed, "noise"))
            crafted = [bl.grtba_poison(split.train[i], noise) for i in idx]
            bl.save_trigger(noise, trig_path)
            activation = bl.noise_trigger_fn(noise)
        for i, im in zip(idx, crafted):
            train[i] = im
        poisoned = DatasetSplit(train=train, val=split.val,
                                class_names=split.class_names, resolution=split.resolution)
        return poisoned, activation

    def poison(self) -> DatasetSplit:
        if self._d_prime is None:
            split = self.dataset()
            plan = self.plan()
            self._d_prime, self._activation_fn = self._craft_planned(split, plan)
            audit = poison_audit(split, self._d_prime)
            audit.pop("changed_indices")
            audit["expected_count"] = len(plan.poison_indices)
            (self.run_dir / "poison_audit.json").write_text(json.dumps(audit, indent=2) + "\n")
            self._done("poison", plan=str(self.run_dir / "plan.json"),
                       poison_audit=str(self.run_dir / "poison_audit.json"))
        return self._d_prime

    def activation_fn(self):
        if self._activation_fn is None:
            if self.cfg.method == "ours":
                self._activation_fn = trigger_fn(self.generator())
            else:
                self.poison()
        return self._activation_fn

    def backdoor(self) -> ClassifierModel:
        if self._backdoor is not None:
            return self._backdoor
        path = self.run_dir / "backdoor.pt"
        if path.exists():
            self._backdoor = load_classifier(path, self.device)
        else:
            d_prime = self.poison()
            cfg = dataclasses.replace(self.cfg.implant_cfg)
            if cfg.seed == 0:
                cfg.seed = derive_seed(self.cfg.seed, "implant")
            self._backdoor = implant(self.victim(), d_prime, cfg)
            save_classifier(self._backdoor, path)
        self._done("implant", backdoor_model=str(path))
        return self._backdoor

    def evaluate(self) -> MetricsReport:
        split = self.dataset()
        victim = self.victim()
        backdoor = self.backdoor()
        plan = self.plan()
        fn = self.activation_fn()
        nontarget, _ = split_by_target(split.val, self.cfg.target_class)
        metric = get_perceptual(self.cfg.perceptual_backbone, self.device)

        report = MetricsReport(config_ref=self.cfg.config_hash())
        report.asr = compute_asr(backdoor, nontarget, fn, self.cfg.target_class)
        report.ba = compute_ba(backdoor, split.val)
        report.fr = compute_fr(backdoor, split.val, fn)
        idx = sorted(plan.poison_indices)
        if idx:
            d_prime = self.poison()
            stealth = compute_stealth([split.train[i] for i in idx],
                                      [d_prime.train[i] for i in idx], metric)
            report.lpips_mean = stealth.lpips_mean
            report.psnr_mean = stealth.psnr_mean
            report.linf_max = stealth.linf_max
        report.notes.update({
            "method": self.cfg.method,
            "epsilon": self.cfg.epsilon,
            "lambda": self.cfg.lam,
            "seed": self.cfg.seed,
            "n_poisoned": len(plan.poison_indices),
            "clean_ba": compute_ba(victim, split.val),
            "clean_asr": compute_asr(victim, nontarget, fn, self.cfg.target_class),
            "perceptual": metric.identity,
        })
        report.save(self.run_dir / "report.json")
        write_csv(self.run_dir / "report.csv",
                  ["config", "method", "epsilon", "lambda", "lpips", "psnr", "linf", "asr", "ba", "fr"],
                  [[report.config_ref, self.cfg.method, self.cfg.epsilon, self.cfg.lam,
                    report.lpips_mean, report.psnr_mean, report.linf_max,
                    report.asr, report.ba, report.fr]])
        self._done("evaluate", report=str(self.run_dir / "report.json"),
                   report_csv=str(self.run_dir / "report.csv"))
        return report

    def defend_strip(self):
        cfg = self.cfg.strip or StripConfig()
        split = self.dataset()
        backdoor = self.backdoor()
        fn = self.activation_fn()
        nontarget, _ = split_by_target(split.val, self.cfg.target_class)
        seed = derive_seed(self.cfg.seed, "strip")
        rng = np.random.default_rng(seed)
        n = min(cfg.n_samples, len(nontarget))
        chosen = [nontarget[i] for i in rng.choice(len(nontarget), size=n, replace=False)]
        triggered = fn(chosen)
        clean_dist, trig_dist = strip_evaluate(
            backdoor, chosen, triggered, overlays=split.val,
            n_overlays=cfg.n_overlays, seed=seed, out_dir=self.run_dir)
        stats = strip_threshold_stats(clean_dist, trig_dist)
        (self.run_dir / "strip_threshold.json").write_text(json.dumps(stats, indent=2) + "\n")
        self._done("defend", strip=str(self.run_dir / "strip.json"),
                   strip_plot=str(self.run_dir / "strip_entropy.png"))
        return clean_dist, trig_dist

    # ---- bookkeeping -------------------------------------------------

    def _done(self, stage, **artifacts):
        if stage not in self.manifest.stages_completed:
            self.manifest.stages_completed.append(stage)
        self.manifest.artifacts.update(artifacts)
        self.manifest.save(self.run_dir / "manifest.json")


def run_experiment(cfg: ExperimentConfig, through: str = "all") -> RunManifest:
    """Execute an experiment, persisting every intermediate artifact.

    `through` stops early at a named stage (train-generator, poison,
    implant, evaluate); "all" runs evaluation plus configured defenses.
    On failure the manifest records status, last completed stage and the
    error, then the exception propagates.
    """
    exp = Experiment(cfg)
    exp.manifest.started = _now()
    try:
        exp.dataset()
        exp.victim()
        if through == "victim":
            pass
        elif through == "train-generator":
            exp.generator()
        elif through == "poison":
            exp.poison()
        elif through == "implant":
            exp.backdoor()
        elif through in ("evaluate", "all"):
            exp.evaluate()
            if through == "all" and cfg.strip is not None:
                exp.defend_strip()
        elif through == "defend-strip":
            exp.evaluate()
            exp.defend_strip()
        else:
            raise ConfigError(f"unknown stage {through!r}")
        exp.manifest.status = "completed"
    except Exception as exc:
        exp.manifest.status = "failed"
        exp.manifest.error = f"{type(exc).__name__}: {exc}"
        exp.manifest.finished = _now()
        exp.manifest.save(exp.run_dir / "manifest.json")
        raise
    exp.manifest.finished = _now()
    exp.manifest.save(exp.run_dir / "manifest.json")
    return exp.manifest


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def compare_runs(manifest_paths, out_dir):
    """Merge completed runs into one table (and plots where applicable).

    Rows follow the stealthiness-then-effectiveness column order:
    LPIPS, PSNR, l-infinity, ASR, BA. Runs over different dataset
    profiles refuse to merge.
    """
    if len(manifest_paths) < 2:
        raise ConfigError("compare_runs needs at least two run manifests")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for p in manifest_paths:
        p = Path(p)
        if p.is_dir():
            p = p / "manifest.json"
        manifest = RunManifest.load(p)
        report_path = manifest.artifacts.get("report")
        if manifest.status != "completed" or not report_path:
            raise DataError(f"run {manifest.config_hash} has no completed report")
        report = json.loads(Path(report_path).read_text())
        runs.append((manifest, report))

    profiles = {m.profile for m, _ in runs}
    if len(profiles) > 1:
        raise ConfigError(
            f"refusing to compare runs across dataset profiles: {sorted(profiles)}"
        )

    header = ["run", "method", "epsilon", "lambda", "lpips", "psnr", "linf", "asr", "ba"]
    rows = []
    for manifest, report in runs:
        notes = report.get("notes", {})
        rows.append([
            manifest.config_hash, notes.get("method"), notes.get("epsilon"),
            notes.get("lambda"), report.get("lpips_mean"), report.get("psnr_mean"),
            report.get("linf_max"), report.get("asr"), report.get("ba"),
        ])
    write_csv(out_dir / "comparison.csv", header, rows)

    by_method = {}
    for manifest, report in runs:
        notes = report.get("notes", {})
        by_method.setdefault(notes.get("method"), []).append(
            (notes.get("lambda"), report.get("asr"), report.get("ba"), ""))
    if any(len({r[0] for r in v}) > 1 for v in by_method.values()):
        from .metrics import plot_rate_sweep

        for method in by_method:
            by_method[method].sort(key=lambda r: r[0])
        plot_rate_sweep(by_method, out_dir / "rate_comparison.png")
    return rows
