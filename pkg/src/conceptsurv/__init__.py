"""Concept-based survival models on numpy.

Modules
-------
survival    Kaplan-Meier, Nelson-Aalen, Cox and Beran estimators, C-index
autodiff    reverse-mode differentiation of array programs
encoders    concept schemas and the convolutional / dense encoders
losses      concept cross-entropy and the smoothed C-index
models      SurvCBM, SurvRCM and SurvBase with Cox or Beran heads
datagen     synthetic censored datasets built from image pools
interpret   neighbor-match and Cox-contribution explanations
harness     experiment sweeps, checkpoints, reports and the CLI
"""

from .datagen import ConceptSurvivalDataset, GenerationConfig, build_dataset, synth_glyph_pool
from .encoders import ConceptSchema, EncoderConfig
from .models import ModelSpec, SurvivalHeadSpec, TrainConfig, TrainedModel, evaluate, fit, predict
from .survival import StepSurvivalFunction, beran_survival, concordance_index, kaplan_meier, nelson_aalen

__version__ = "0.1.0"

__all__ = [
    "ConceptSchema",
    "ConceptSurvivalDataset",
    "EncoderConfig",
    "GenerationConfig",
    "ModelSpec",
    "StepSurvivalFunction",
    "SurvivalHeadSpec",
    "TrainConfig",
    "TrainedModel",
    "beran_survival",
    "build_dataset",
    "concordance_index",
    "evaluate",
    "fit",
    "kaplan_meier",
    "nelson_aalen",
    "predict",
    "synth_glyph_pool",
]
