"""scikit-learn style wrappers over the functional pipeline.

``ExpertPruner`` fits on a parent checkpoint (calibration, divergence, plan, mask)
and transforms a checkpoint into its pruned copy. ``RoutingImportance`` fits an
importance table on a list of episodes.
"""

from __future__ import annotations

from typing import Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import ParallelCorpus, TranslationEpisode
from .evaluation import Calibration, Pruner
from .importance import METHODS as IMPORTANCE_METHODS
from .importance import norm_weighted, routing_mass
from .allocation import METHODS as ALLOCATION_METHODS
from .model import Checkpoint
from .surgeon import extract


def _check_checkpoint(x) -> Checkpoint:
    if not isinstance(x, Checkpoint):
        raise TypeError(f"expected a Checkpoint, got {type(x).__name__}")
    return x


class RoutingImportance(BaseEstimator):
    """Fit a per-(layer, expert) importance table from calibration episodes."""

    def __init__(self, checkpoint: Checkpoint | None = None, method: str = "routing-mass", target_only: bool = False):
        self.checkpoint = checkpoint
        self.method = method
        self.target_only = target_only

    def fit(self, X: Sequence[TranslationEpisode], y=None):
        ckpt = _check_checkpoint(self.checkpoint)
        if self.method not in ("routing-mass", "norm-weighted"):
            raise ValueError(f"method must be routing-mass or norm-weighted, got {self.method!r}")
        X = list(X)
        if not X or not all(isinstance(e, TranslationEpisode) for e in X):
            raise ValueError("X must be a nonempty list of TranslationEpisode")
        fn = routing_mass if self.method == "routing-mass" else norm_weighted
        self.table_ = fn(X, ckpt, self.target_only)
        self.scores_ = self.table_.scores
        return self


class ExpertPruner(TransformerMixin, BaseEstimator):
    """Calibrate on a parent, then drop experts from checkpoints with the same layout."""

    def __init__(
        self,
        corpus: ParallelCorpus | None = None,
        importance: str = "routing-mass",
        allocation: str = "dynamic",
        k: int = 8,
        calibration: Calibration = Calibration(),
        seed: int = 0,
    ):
        self.corpus = corpus
        self.importance = importance
        self.allocation = allocation
        self.k = k
        self.calibration = calibration
        self.seed = seed

    def fit(self, X: Checkpoint, y=None):
        parent = _check_checkpoint(X)
        if self.corpus is None:
            raise ValueError("corpus is required")
        if self.importance not in IMPORTANCE_METHODS:
            raise ValueError(f"importance must be one of {IMPORTANCE_METHODS}")
        if self.allocation not in ALLOCATION_METHODS:
            raise ValueError(f"allocation must be one of {ALLOCATION_METHODS}")
        self.pruner_ = Pruner(parent, self.corpus, self.calibration)
        self.plan_, self.mask_ = self.pruner_.plan_mask(self.importance, self.allocation, int(self.k), self.seed)
        self.capacities_ = list(self.plan_.capacities)
        self.n_experts_in_ = parent.config.experts_per_layer
        return self

    def transform(self, X: Checkpoint) -> Checkpoint:
        check_is_fitted(self, "mask_")
        ckpt = _check_checkpoint(X)
        if ckpt.config.experts_per_layer != self.n_experts_in_:
            raise ValueError("checkpoint layout differs from the one the pruner was fitted on")
        return extract(ckpt, self.mask_)
