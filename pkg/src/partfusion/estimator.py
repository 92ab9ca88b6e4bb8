"""Scikit-learn style facade over training, inference and clustering."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .clustering import ClusterParams, InstancePrediction, cluster_instances
from .metrics import evaluate_dataset
from .network import ModelConfig, forward, mean_offset_error, train
from .shapes import AugmentParams, LabeledShape
from .validation import check_is_fitted, check_points


class PartInstanceSegmenter(BaseEstimator):
    """Multi-level part instance segmenter.

    ``fit`` trains the point network on a sequence of
    :class:`~partfusion.shapes.LabeledShape`; ``predict`` returns one
    :class:`~partfusion.clustering.InstancePrediction` per input shape (or
    raw N x 3 point array). Follows the scikit-learn estimator protocol
    (``get_params`` / ``set_params`` / ``clone``).
    """

    def __init__(self, feature_dim=64, head_hidden=32, fusion="cross",
                 one_hot=False, stop_grad=True, two_dir=False,
                 learning_rate=0.1, iterations=2000, decay_factor=0.1,
                 batch_size=8, augment=True, bandwidth=0.1, push_scale=0.05,
                 epsilon=1e-8, cluster_max_iter=300, cluster_tol=1e-6,
                 seed=0, log_every=100):
        self.feature_dim = feature_dim
        self.head_hidden = head_hidden
        self.fusion = fusion
        self.one_hot = one_hot
        self.stop_grad = stop_grad
        self.two_dir = two_dir
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.decay_factor = decay_factor
        self.batch_size = batch_size
        self.augment = augment
        self.bandwidth = bandwidth
        self.push_scale = push_scale
        self.epsilon = epsilon
        self.cluster_max_iter = cluster_max_iter
        self.cluster_tol = cluster_tol
        self.seed = seed
        self.log_every = log_every

    # ------------------------------------------------------------------

    def _model_config(self, class_counts) -> ModelConfig:
        return ModelConfig(
            feature_dim=self.feature_dim,
            class_counts=tuple(class_counts),
            head_hidden=self.head_hidden,
            fusion=self.fusion,
            one_hot=self.one_hot,
            stop_grad=self.stop_grad,
            two_dir=self.two_dir,
            learning_rate=self.learning_rate,
            iterations=self.iterations,
            decay_factor=self.decay_factor,
            batch_size=self.batch_size,
            seed=self.seed,
            log_every=self.log_every,
        ).validate()

    def cluster_params(self) -> ClusterParams:
        return ClusterParams(
            bandwidth=self.bandwidth,
            push_scale=self.push_scale,
            epsilon=self.epsilon,
            max_iter=self.cluster_max_iter,
            tol=self.cluster_tol,
        ).validate()

    def fit(self, X, y=None):
        """Train on labeled shapes; the level structure is inferred from X."""
        shapes = list(X)
        if not shapes:
            raise ValueError("fit: needs at least one shape")
        counts = shapes[0].class_counts
        for s in shapes:
            if s.class_counts != counts:
                raise ValueError("fit: all shapes must share one class-count layout")
        self.config_ = self._model_config(counts)
        aug = AugmentParams() if self.augment else None
        self.params_, self.history_ = train(shapes, self.config_, aug)
        return self

    def set_trained(self, config: ModelConfig, params) -> "PartInstanceSegmenter":
        """Adopt an existing checkpoint (used by the CLI inference path)."""
        self.config_ = config
        self.params_ = params
        self.history_ = []
        return self

    @staticmethod
    def _points_of(x) -> np.ndarray:
        return check_points(x.points if isinstance(x, LabeledShape) else x)

    def predict(self, X) -> list[InstancePrediction]:
        """Cluster each input shape into per-level instances."""
        check_is_fitted(self, "params_")
        cp = self.cluster_params()
        out = []
        for x in X:
            pts = self._points_of(x)
            fwd = forward(self.params_, pts, self.config_)
            out.append(cluster_instances(
                pts, fwd.p_sem_values(), fwd.o_i_values(), fwd.o_s_values(), cp,
            ))
        return out

    def forward_outputs(self, x):
        """Raw network outputs for one shape (probabilities and offsets)."""
        check_is_fitted(self, "params_")
        return forward(self.params_, self._points_of(x), self.config_)

    def offset_error(self, X) -> float:
        check_is_fitted(self, "params_")
        return mean_offset_error(self.params_, list(X), self.config_)

    def score(self, X, y=None) -> float:
        """Category-mean AP at IoU 0.5, averaged over levels."""
        shapes = list(X)
        report = evaluate_dataset(shapes, self.predict(shapes))
        return report.overall(0.50)
