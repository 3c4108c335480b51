"""Clean-label backdoor attacks driven by an image-specific trigger
generator, with baselines, metrics and defenses for end-to-end evaluation."""

from .baselines import (
    GlobalNoiseTrigger,
    PatchTrigger,
    apply_patch,
    clba_poison,
    fgsm_perturb,
    grtba_poison,
)
from .data import (
    DatasetSplit,
    GeneratorDataset,
    LabeledImage,
    PoisonPlan,
    build_generator_dataset,
    build_poisoned_dataset,
    load_dataset,
    make_poison_plan,
)
from .defenses import AugmentationPolicy, augmented_implant, strip_entropy, strip_evaluate
from .experiment import ExperimentConfig, RunManifest, compare_runs, load_config, run_experiment
from .gen_training import GenTrainConfig, LossBreakdown, least_likely_class, train_generator
from .generator import (
    GeneratorArchitecture,
    TriggerGenerator,
    apply_trigger,
    generate_trigger,
    load_generator,
    save_generator,
)
from .metrics import MetricsReport, compute_asr, compute_ba, compute_fr, compute_stealth
from .perceptual import PerceptualDistance, get_perceptual
from .victim import ClassifierModel, ImplantConfig, PretrainConfig, activate, implant

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AugmentationPolicy",
    "ClassifierModel",
    "DatasetSplit",
    "ExperimentConfig",
    "GenTrainConfig",
    "GeneratorArchitecture",
    "GeneratorDataset",
    "GlobalNoiseTrigger",
    "ImplantConfig",
    "LabeledImage",
    "LossBreakdown",
    "MetricsReport",
    "PatchTrigger",
    "PerceptualDistance",
    "PoisonPlan",
    "PretrainConfig",
    "RunManifest",
    "TriggerGenerator",
    "activate",
    "apply_patch",
    "apply_trigger",
    "augmented_implant",
    "build_generator_dataset",
    "build_poisoned_dataset",
    "clba_poison",
    "compare_runs",
    "compute_asr",
    "compute_ba",
    "compute_fr",
    "compute_stealth",
    "fgsm_perturb",
    "generate_trigger",
    "get_perceptual",
    "grtba_poison",
    "implant",
    "least_likely_class",
    "load_config",
    "load_dataset",
    "load_generator",
    "make_poison_plan",
    "run_experiment",
    "save_generator",
    "strip_entropy",
    "strip_evaluate",
    "train_generator",
]
