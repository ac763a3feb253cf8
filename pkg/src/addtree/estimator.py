"""scikit-learn style wrappers.

Inputs are either sequences of :class:`~addtree.space.StructuredPoint` or
2-D arrays of linearized points (see :class:`TreeLinearizer`).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_target
from .baselines import _PathModel, all_interactions
from .gp import Dataset, FitConfig, fit
from .kernels import build_add_tree
from .space import TreeSpec, delinearize, linearize

__all__ = ["AddTreeRegressor", "IndependentGPRegressor", "TreeLinearizer"]


class AddTreeRegressor(RegressorMixin, BaseEstimator):
    """Exact GP regression with an Add-Tree kernel.

    Parameters
    ----------
    spec : TreeSpec
    tie : {None, "depth", "all"} or sequence of vertex groups
        Kernel parameter sharing between vertices.
    interactions : bool
        Add a product term for every ancestor/descendant vertex pair.
    n_restarts : int
        Marginal-likelihood optimizer starts.
    noise : float or None
        Fixed observation noise variance; None learns it.
    random_state : int
    """

    def __init__(self, spec: TreeSpec, tie=None, interactions=False, n_restarts=5,
                 noise=None, random_state=0):
        self.spec = spec
        self.tie = tie
        self.interactions = interactions
        self.n_restarts = n_restarts
        self.noise = noise
        self.random_state = random_state

    def fit(self, X, y):
        points = check_points(self.spec, X)
        y = check_target(y, len(points))
        inter = all_interactions(self.spec) if self.interactions else ()
        kernel = build_add_tree(self.spec, interactions=inter, tie=self.tie)
        data = Dataset(self.spec, points, y, self.noise)
        cfg = FitConfig(n_restarts=self.n_restarts, seed=self.random_state)
        self.gp_ = fit(data, cfg, kernel=kernel)
        self.kernel_ = self.gp_.kernel
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "gp_")
        mean, var = self.gp_.predict(check_points(self.spec, X))
        return (mean, np.sqrt(var)) if return_std else mean


class IndependentGPRegressor(RegressorMixin, BaseEstimator):
    """One GP per leaf, each trained only on its own leaf's observations.

    Leaves without training data predict the prior: zero mean and the
    default kernel variance.
    """

    def __init__(self, spec: TreeSpec, n_restarts=5, random_state=0):
        self.spec = spec
        self.n_restarts = n_restarts
        self.random_state = random_state

    def fit(self, X, y):
        points = check_points(self.spec, X)
        y = check_target(y, len(points))
        self.models_ = [_PathModel(self.spec, i) for i in range(self.spec.n_paths)]
        cfg = FitConfig(n_restarts=self.n_restarts, seed=self.random_state)
        paths = np.array([self.spec.path_index(p) for p in points])
        for i, m in enumerate(self.models_):
            idx = np.flatnonzero(paths == i)
            if idx.size == 0:
                continue
            if not m.dim:
                m.y_const = list(y[idx])
                continue
            m.data = Dataset(m.spec, [m.to_local(points[j]) for j in idx], y[idx])
            m.gp = fit(m.data, cfg, kernel=build_add_tree(m.spec))
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "models_")
        points = check_points(self.spec, X)
        paths = np.array([self.spec.path_index(p) for p in points])
        mean = np.zeros(len(points))
        var = np.ones(len(points))
        for i, m in enumerate(self.models_):
            idx = np.flatnonzero(paths == i)
            if idx.size == 0:
                continue
            if m.gp is not None:
                mean[idx], var[idx] = m.gp.predict([m.to_local(points[j]) for j in idx])
            elif not m.dim:
                mean[idx] = np.mean(m.y_const) if m.y_const else 0.0
                var[idx] = 0.0 if m.y_const else 1.0
        return (mean, np.sqrt(var)) if return_std else mean


class TreeLinearizer(TransformerMixin, BaseEstimator):
    """Map points to fixed-length vectors and back.

    Each vertex gets a tag slot followed by its block's value slots. An
    on-path vertex with a block is tagged with its rank among its siblings;
    the other vertices carry a negative sentinel, and their value slots are
    NaN. ``uid`` identifies the tree inside the sentinels.
    """

    def __init__(self, spec: TreeSpec, uid: int = 0):
        self.spec = spec
        self.uid = uid

    def fit(self, X=None, y=None):
        self.n_features_out_ = self.spec.n_vertices + sum(
            v.dim for v in self.spec.vertices
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_out_")
        points = check_points(self.spec, X)
        return np.vstack([linearize(self.spec, p, self.uid) for p in points])

    def inverse_transform(self, X):
        arr = np.atleast_2d(np.asarray(X, dtype=float))
        return [delinearize(self.spec, row) for row in arr]
