"""Influence-function explanations for small dense networks, checked against leave-one-out retraining."""

from .data import Dataset, LabeledInstance, load_idx, load_iris, split, standardize, synth_blobs
from .influence import (
    HessianOperator,
    InfluenceRecord,
    LissaConfig,
    dense_hessian,
    influence_scores,
    influence_up_loss,
    influence_up_params,
    lissa_inverse_hvp,
    top_eigenvalue,
)
from .linalg import RngStream, solve_spd
from .loo import LooProtocol, ModelSpec, ValidationReport, derivation_check, select_points, validation_run
from .mlp import ArchSpec, MlpModel, ParameterVector, build_mlp
from .bnn import BnnModel, MomentPair, build_bnn, propagate_moments
from .stats import anova_oneway, interval95, pearson, spearman
from .training import TrainConfig, TrainLog, finetune_last_layer, train

__version__ = "0.1.0"
