"""Crowd counting by density-map regression with adaptive scenario discovery.

The package is organized by pipeline stage:

* :mod:`scenecount.density` — geometry-adaptive ground-truth density maps;
* :mod:`scenecount.autodiff` — the tensor engine and SGD;
* :mod:`scenecount.model` — the two-pathway counting network;
* :mod:`scenecount.training` — the training loop and count metrics;
* :mod:`scenecount.harness` — synthetic data, scenario reports, ablations;
* :mod:`scenecount.estimator` — scikit-learn style facade;
* :mod:`scenecount.cli` — the ``scenecount`` command.
"""

from .autodiff import SGD, Tensor, backward, finite_diff_check, mse_density_loss
from .density import (FIXED, GEOMETRY_ADAPTIVE, AnnotationSet, KernelSpec,
                      adaptive_sigmas, count, knn_mean_distance, render_density,
                      sum_pool_resample)
from .errors import (ConfigError, DataError, DimensionError, NumericalError,
                     ScenecountError, StateError)
from .estimator import DensityMapRenderer, ScenarioCounter
from .harness import (Regime, ScenarioReport, SynthConfig, render_targets,
                      run_ablation, scenario_report, synth_dataset)
from .model import (VARIANTS, ForwardResult, ModelConfig, TwoPathwayCounter,
                    build, discretize, load_checkpoint, normalize_response,
                    save_checkpoint, scenario_of)
from .training import TrainConfig, TrainLog, count_metrics, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "SGD", "Tensor", "backward", "finite_diff_check", "mse_density_loss",
    "FIXED", "GEOMETRY_ADAPTIVE", "AnnotationSet", "KernelSpec",
    "adaptive_sigmas", "count", "knn_mean_distance", "render_density",
    "sum_pool_resample",
    "ConfigError", "DataError", "DimensionError", "NumericalError",
    "ScenecountError", "StateError",
    "DensityMapRenderer", "ScenarioCounter",
    "Regime", "ScenarioReport", "SynthConfig", "render_targets",
    "run_ablation", "scenario_report", "synth_dataset",
    "VARIANTS", "ForwardResult", "ModelConfig", "TwoPathwayCounter",
    "build", "discretize", "load_checkpoint", "normalize_response",
    "save_checkpoint", "scenario_of",
    "TrainConfig", "TrainLog", "count_metrics", "evaluate", "train",
    "__version__",
]
