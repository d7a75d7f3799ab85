"""Group-mask explanations for sentence-pair classifiers.

Subpackages: tensor (autodiff engine), models (reference classifiers),
datagen (planted synthetic tasks), explainers (gmask / imask / baselines),
metrics (faithfulness evaluation), render and figures (report output),
cli (command-line pipelines).
"""

__version__ = "0.1.0"

from .datagen import PlantedTaskConfig, generate_planted_dataset, load_dataset, save_dataset
from .explainers import (AttributionReport, ExplainerConfig, GroupMaskParams,
                         explain, explain_dataset, fit_gmask, fit_imask,
                         prefilter_topk, weighted_attributions)
from .metrics import (DegradationCurves, MetricConfig, aopc, degradation_curves,
                      degradation_score, posthoc_accuracy, rationale_recovery)
from .models import ClassifierParams, PairExample, TrainConfig, predict_proba, train_classifier
from .tensor import Graph, Tensor, forward_backward

__all__ = [
    "AttributionReport", "ClassifierParams", "DegradationCurves", "ExplainerConfig",
    "Graph", "GroupMaskParams", "MetricConfig", "PairExample", "PlantedTaskConfig",
    "Tensor", "TrainConfig", "aopc", "degradation_curves", "degradation_score",
    "explain", "explain_dataset", "fit_gmask", "fit_imask", "forward_backward",
    "generate_planted_dataset", "load_dataset", "posthoc_accuracy", "predict_proba",
    "prefilter_topk", "rationale_recovery", "save_dataset", "train_classifier",
]
