__version__ = "0.3.0"


from .config import HMKGRunnerConfig, SynthesisConfig
from .evals import cross_validate, evaluate_model, run_ablation
from .hmkg_model import HMKG, HMKGConfig, VariantConfig
from .hmkg_training_runner import HMKGTrainingRunner
from .report import emit_report, parse_table
from .slide_geometry import Cohort, FeatureBag, SurvivalRecord, load_cohort, save_cohort
from .synthetic_cohort import generate_synthetic_cohort

__all__ = [
    "HMKG",
    "HMKGConfig",
    "VariantConfig",
    "HMKGRunnerConfig",
    "SynthesisConfig",
    "HMKGTrainingRunner",
    "Cohort",
    "FeatureBag",
    "SurvivalRecord",
    "load_cohort",
    "save_cohort",
    "generate_synthetic_cohort",
    "cross_validate",
    "evaluate_model",
    "run_ablation",
    "emit_report",
    "parse_table",
]
