from .experiment import ExperimentConfig, ExperimentResult, TrialResult, run_experiment, run_trials
from .stats import metrics, wilcoxon_signed_rank
from .synth import SynthSpec, build_synthetic, generate_synthetic

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "SynthSpec",
    "TrialResult",
    "build_synthetic",
    "generate_synthetic",
    "metrics",
    "run_experiment",
    "run_trials",
    "wilcoxon_signed_rank",
]
