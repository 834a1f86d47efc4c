"""Desk-scale laboratory for prompt tuning over a frozen encoder pair.

The package splits into a reverse-mode autodiff core, a deterministic
frozen vision/text encoder world, prompt learners (shared-context,
image-conditioned, prompt-collection and variational), a Monte Carlo
inference engine, synthetic episodic benchmarks, a seeded SGD trainer, and
an experiment runner with bundled presets, persistence and reporting.
"""

from .autodiff import Tensor
from .checkpoints import (
    CheckpointError,
    CheckpointVersionError,
    CorruptCheckpointError,
    LearnerKindMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from .datasets import (
    EVAL_RESERVE,
    Dataset,
    Episode,
    SplitView,
    SyntheticDatasetSpec,
    apply_domain_shift,
    dump_dataset,
    generate_dataset,
    harmonic_mean,
    load_dataset,
    make_episode,
    split_view,
)
from .encoders import (
    DEFAULT_TEMPLATE,
    EncoderConfig,
    EncoderPair,
    Vocabulary,
    World,
    encode_image,
    encode_text,
    init_frozen,
    load_world,
    save_world,
    world_checksum,
)
from .experiments import (
    ConfigError,
    DELTA_BASELINES,
    ExperimentConfig,
    LEARNER_ALIASES,
    PROTOCOLS,
    config_from_dict,
    config_to_dict,
    load_config,
    preset,
    run_experiment,
    run_experiment_file,
    validate_config,
)
from .inference import SAMPLER_FAMILIES, SamplerSpec, evaluate, predict_mc
from .learners import (
    KINDS,
    PosteriorParams,
    PromptState,
    cocoop_loss,
    coop_loss,
    elbo_loss,
    init_prompt_state,
    kl_to_standard_normal,
    proda_loss,
    variational_posterior,
    zero_shot_logits,
)
from .reporting import generate_report
from .training import (
    TrainConfig,
    TrainHistory,
    TrainingDivergedError,
    lr_at,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "CheckpointError",
    "CheckpointVersionError",
    "CorruptCheckpointError",
    "LearnerKindMismatchError",
    "load_checkpoint",
    "save_checkpoint",
    "EVAL_RESERVE",
    "Dataset",
    "Episode",
    "SplitView",
    "SyntheticDatasetSpec",
    "apply_domain_shift",
    "dump_dataset",
    "generate_dataset",
    "harmonic_mean",
    "load_dataset",
    "make_episode",
    "split_view",
    "DEFAULT_TEMPLATE",
    "EncoderConfig",
    "EncoderPair",
    "Vocabulary",
    "World",
    "encode_image",
    "encode_text",
    "init_frozen",
    "load_world",
    "save_world",
    "world_checksum",
    "ConfigError",
    "DELTA_BASELINES",
    "ExperimentConfig",
    "LEARNER_ALIASES",
    "PROTOCOLS",
    "config_from_dict",
    "config_to_dict",
    "load_config",
    "preset",
    "run_experiment",
    "run_experiment_file",
    "validate_config",
    "SAMPLER_FAMILIES",
    "SamplerSpec",
    "evaluate",
    "predict_mc",
    "KINDS",
    "PosteriorParams",
    "PromptState",
    "cocoop_loss",
    "coop_loss",
    "elbo_loss",
    "init_prompt_state",
    "kl_to_standard_normal",
    "proda_loss",
    "variational_posterior",
    "zero_shot_logits",
    "generate_report",
    "TrainConfig",
    "TrainHistory",
    "TrainingDivergedError",
    "lr_at",
    "train",
    "__version__",
]
