"""scikit-learn style facade over the renderer and the counting network.

Two estimators, for pipeline and grid-search ergonomics:

* :class:`DensityMapRenderer` — a stateless transformer turning annotation
  sets into density maps (``fit`` only validates hyperparameters);
* :class:`ScenarioCounter` — a regressor that renders its own training
  targets, trains the two-pathway network, and predicts per-image counts.

Both follow the usual conventions: constructor arguments are stored
verbatim, validation happens in ``fit``, learned state lives in
trailing-underscore attributes, and ``get_params``/``set_params`` come
from ``BaseEstimator``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .density import GEOMETRY_ADAPTIVE, KernelSpec
from .harness import render_targets
from .model import ModelConfig, build, discretize
from .training import TrainConfig, train
from .validation import as_annotation_list, as_image_list


class DensityMapRenderer(TransformerMixin, BaseEstimator):
    """Transform annotation sets into ground-truth density maps.

    ``transform`` accepts AnnotationSets, annotation dicts, or (with
    ``fit``-time images unavailable) anything ``as_annotation_list``
    understands, and returns a list of 2-D float64 maps whose sums equal
    the point counts when ``normalize_mass`` is on. ``resample_factor``
    block-sums each map down, preserving counts.
    """

    def __init__(self, mode=GEOMETRY_ADAPTIVE, beta=0.3, k=3, fixed_sigma=15.0,
                 truncation_radius_sigmas=3.0, normalize_mass=True,
                 resample_factor=1):
        self.mode = mode
        self.beta = beta
        self.k = k
        self.fixed_sigma = fixed_sigma
        self.truncation_radius_sigmas = truncation_radius_sigmas
        self.normalize_mass = normalize_mass
        self.resample_factor = resample_factor

    def _spec(self) -> KernelSpec:
        return KernelSpec(mode=self.mode, beta=self.beta, k=self.k,
                          fixed_sigma=self.fixed_sigma,
                          truncation_radius_sigmas=self.truncation_radius_sigmas,
                          normalize_mass=self.normalize_mass)

    def fit(self, X, y=None):
        self.kernel_spec_ = self._spec()  # validates hyperparameters
        return self

    def transform(self, X) -> list:
        check_is_fitted(self, "kernel_spec_")
        anns = as_annotation_list(X)
        return render_targets(anns, self.kernel_spec_, int(self.resample_factor))


class ScenarioCounter(RegressorMixin, BaseEstimator):
    """Count people in images by density regression with adaptive fusion.

    ``fit(X, y)`` takes images (2-D arrays in [0, 1], extents divisible by
    ``2**backbone_pools``) and point annotations, renders geometry-adaptive
    targets at the network's output resolution, and trains end to end.
    ``predict`` returns the integral of each predicted density map.
    """

    def __init__(self, backbone_channels=(8, 16), backbone_pools=1,
                 dense_kernel=5, dense_layers=2, sparse_layers=2,
                 pathway_channels=8, adaption_hidden=8, bins=10,
                 variant="discretized", gate_dense=True,
                 kernel_mode=GEOMETRY_ADAPTIVE, beta=0.3, k=3, fixed_sigma=15.0,
                 lr=2e-4, momentum=0.9, epochs=50, seed=0, shuffle=True):
        self.backbone_channels = backbone_channels
        self.backbone_pools = backbone_pools
        self.dense_kernel = dense_kernel
        self.dense_layers = dense_layers
        self.sparse_layers = sparse_layers
        self.pathway_channels = pathway_channels
        self.adaption_hidden = adaption_hidden
        self.bins = bins
        self.variant = variant
        self.gate_dense = gate_dense
        self.kernel_mode = kernel_mode
        self.beta = beta
        self.k = k
        self.fixed_sigma = fixed_sigma
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.seed = seed
        self.shuffle = shuffle

    def _model_config(self) -> ModelConfig:
        return ModelConfig(backbone_channels=tuple(self.backbone_channels),
                           backbone_pools=self.backbone_pools,
                           dense_kernel=self.dense_kernel,
                           dense_layers=self.dense_layers,
                           sparse_layers=self.sparse_layers,
                           pathway_channels=self.pathway_channels,
                           adaption_hidden=self.adaption_hidden,
                           bins=self.bins, variant=self.variant,
                           gate_dense=self.gate_dense)

    def fit(self, X, y):
        images = as_image_list(X)
        anns = as_annotation_list(y, images)
        cfg = self._model_config()
        spec = KernelSpec(mode=self.kernel_mode, beta=self.beta, k=self.k,
                          fixed_sigma=self.fixed_sigma)
        factor = 2 ** cfg.backbone_pools
        targets = render_targets(anns, spec, factor)
        model = build(cfg, seed=self.seed)
        tcfg = TrainConfig(lr=self.lr, momentum=self.momentum, epochs=self.epochs,
                           seed=self.seed, shuffle=self.shuffle)
        self.train_log_ = train(model, list(zip(images, targets)), tcfg)
        self.model_ = model
        self.n_features_in_ = len(images)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = as_image_list(X)
        return np.array([self.model_.forward(img[None]).predicted_count
                         for img in images])

    def predict_density(self, X) -> list:
        """Predicted density maps, one 2-D array per image."""
        check_is_fitted(self, "model_")
        images = as_image_list(X)
        return [self.model_.forward(img[None]).fused.data[0].copy()
                for img in images]

    def predict_scenario(self, X, bins=None) -> np.ndarray:
        """Discovered scenario (bin index) per image."""
        check_is_fitted(self, "model_")
        images = as_image_list(X)
        b = self.bins if bins is None else int(bins)
        return np.array([discretize(self.model_.forward(img[None]).w_star, b)[0]
                         for img in images])
