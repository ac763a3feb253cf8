"""Exact Gaussian-process regression with an Add-Tree kernel.

Two observations have nonzero prior covariance only if their paths share a
block-carrying vertex, which happens exactly when their *anchors* (the
shallowest block-carrying vertex of each path) coincide. The gram matrix is
therefore block diagonal over anchor groups, and a query only ever needs the
group of its own anchor: that group is the active set, and conditioning on it
alone is the same as conditioning on every observation.

Targets are standardized (zero mean, unit variance) before fitting and the
GP has zero prior mean on that scale. Posterior quantities are reported in
the original units.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .kernels import AddTreeKernel, Encoded, build_add_tree, encode
from .space import StructuredPoint, TreeSpec, shared_prefix

__all__ = [
    "Dataset",
    "ActiveSet",
    "PosteriorGaussian",
    "FitConfig",
    "FittedGP",
    "NotPSDError",
    "active_set",
    "posterior",
    "component_posterior",
    "log_marginal_likelihood",
    "fit",
    "prior_model",
]

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
NOISE_BOUNDS = (1e-6, 1.0)


class NotPSDError(np.linalg.LinAlgError):
    """Cholesky failed even after the largest allowed jitter."""


@dataclass(frozen=True)
class Dataset:
    """Observations of a tree-structured function.

    ``noise`` holds fixed per-observation noise variances in the units of
    ``y``. Leave it as None to learn one homoscedastic noise level.
    """

    spec: TreeSpec
    points: tuple
    y: np.ndarray
    noise: np.ndarray | None = None

    def __post_init__(self):
        points = tuple(self.points)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if len(points) != y.size:
            raise ValueError(f"{len(points)} points but {y.size} targets")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "y", y)
        if self.noise is not None:
            noise = np.broadcast_to(np.asarray(self.noise, dtype=float), y.shape).copy()
            if np.any(noise < 0):
                raise ValueError("noise variances must be non-negative")
            object.__setattr__(self, "noise", noise)

    def __len__(self):
        return self.y.size

    @classmethod
    def empty(cls, spec: TreeSpec) -> Dataset:
        return cls(spec, (), np.zeros(0))

    def append(self, point: StructuredPoint, y: float, noise: float | None = None) -> Dataset:
        if (self.noise is None) != (noise is None) and len(self):
            raise ValueError("cannot mix fixed and learned noise")
        new_noise = None if noise is None else np.r_[
            self.noise if self.noise is not None else [], noise
        ]
        return Dataset(self.spec, self.points + (point,), np.r_[self.y, y], new_noise)

    def subset(self, idx) -> Dataset:
        idx = [int(i) for i in idx]
        return Dataset(
            self.spec,
            tuple(self.points[i] for i in idx),
            self.y[idx],
            None if self.noise is None else self.noise[idx],
        )


@dataclass(frozen=True)
class ActiveSet:
    indices: np.ndarray
    points: tuple
    y: np.ndarray
    noise: np.ndarray | None


@dataclass(frozen=True)
class PosteriorGaussian:
    mean: float
    variance: float

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


@dataclass
class FitConfig:
    """Settings for hyperparameter fitting.

    ``n_restarts`` includes the warm start. The Cholesky jitter starts at
    ``jitter`` and grows tenfold up to ``max_jitter``.
    """

    n_restarts: int = 5
    seed: int | None = 0
    noise_bounds: tuple = NOISE_BOUNDS
    noise_init: float = 1e-2
    jitter: float = 1e-8
    max_jitter: float = 1e-4
    standardize: bool = True
    maxiter: int = 200

    def __post_init__(self):
        if not 0 < self.jitter <= self.max_jitter:
            raise ValueError("need 0 < jitter <= max_jitter")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be at least 1")


def _anchor_keys(spec: TreeSpec, path_index) -> np.ndarray:
    anchors = np.array([spec.anchor(i) if spec.anchor(i) is not None else -1
                        for i in range(spec.n_paths)], dtype=int)
    return anchors[np.asarray(path_index, dtype=int)]


def _groups(spec: TreeSpec, enc: Encoded) -> dict:
    """Anchor vertex -> sorted observation indices. Anchorless rows stand alone."""
    keys = _anchor_keys(spec, enc.path_index)
    out = {}
    for i, k in enumerate(keys):
        out.setdefault(int(k) if k >= 0 else -1 - i, []).append(i)
    return {k: np.array(v, dtype=int) for k, v in out.items()}


def _standardize(y, enabled=True):
    if not enabled or y.size == 0:
        return 0.0, 1.0
    shift = float(np.mean(y))
    scale = float(np.std(y)) if y.size > 1 else 1.0
    if not np.isfinite(scale) or scale < 1e-12:
        scale = 1.0
    return shift, scale


def _cholesky(K, noise_diag, jitter, max_jitter):
    j = jitter
    while True:
        try:
            L = linalg.cholesky(K + np.diag(noise_diag + j), lower=True, check_finite=False)
            return L, j
        except linalg.LinAlgError:
            if j >= max_jitter * (1 - 1e-9):
                raise NotPSDError(f"gram matrix not positive definite with jitter {max_jitter}")
            j *= 10.0


class _Objective:
    """Negative log marginal likelihood over ``[kernel theta, log noise]``."""

    def __init__(self, kernel, data, config: FitConfig, learn_noise: bool):
        self.kernel = kernel
        self.config = config
        self.learn_noise = learn_noise
        self.enc = encode(data.spec, data.points)
        self.shift, self.scale = _standardize(data.y, config.standardize)
        self.ys = (data.y - self.shift) / self.scale
        self.fixed_noise = None if data.noise is None else data.noise / self.scale**2
        self.groups = _groups(data.spec, self.enc)
        self.caches = {k: kernel.cache(self.enc.take(idx)) for k, idx in self.groups.items()}
        self.best = (-np.inf, None)

    def noise_of(self, theta, idx):
        if self.fixed_noise is not None:
            return self.fixed_noise[idx]
        if self.learn_noise:
            return np.full(idx.size, np.exp(theta[-1]))
        return np.zeros(idx.size)

    def value_and_grad(self, theta):
        k = self.kernel.with_theta(theta[: self.kernel.n_params])
        n = self.ys.size
        mll = -0.5 * n * LOG_2PI
        grad = np.zeros(theta.size)
        jitter_used = self.config.jitter
        for key, idx in self.groups.items():
            K, dK = k._assemble(self.caches[key], with_grad=True)
            nd = self.noise_of(theta, idx)
            L, j = _cholesky(K, nd, self.config.jitter, self.config.max_jitter)
            jitter_used = max(jitter_used, j)
            y = self.ys[idx]
            alpha = linalg.cho_solve((L, True), y, check_finite=False)
            mll += -0.5 * y @ alpha - np.sum(np.log(np.diag(L)))
            W = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(idx.size),
                                                          check_finite=False)
            grad[: k.n_params] += 0.5 * np.einsum("ij,kij->k", W, dK)
            if self.learn_noise and self.fixed_noise is None:
                grad[-1] += 0.5 * np.exp(theta[-1]) * np.trace(W)
        return mll, grad, jitter_used

    def __call__(self, theta):
        try:
            mll, grad, _ = self.value_and_grad(theta)
        except NotPSDError:
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(mll):
            return 1e25, np.zeros_like(theta)
        if mll > self.best[0]:
            self.best = (mll, theta.copy())
        return -mll, -grad


class FittedGP:
    """An immutable fitted Add-Tree GP.

    Attributes
    ----------
    kernel : AddTreeKernel
    data : Dataset
    noise_variance : float or None
        Learned homoscedastic noise on the standardized scale.
    y_shift, y_scale : float
        Target standardization.
    jitter : float
        Diagonal jitter used in the factorization.
    mll : float
        Log marginal likelihood on the standardized scale.
    """

    def __init__(self, kernel, data, noise_variance, y_shift, y_scale,
                 jitter=1e-8, max_jitter=1e-4, mll=np.nan, warning=None):
        self.kernel: AddTreeKernel = kernel
        self.data: Dataset = data
        self.noise_variance = noise_variance
        self.y_shift = float(y_shift)
        self.y_scale = float(y_scale)
        self.warning = warning
        if not 0 < jitter <= max_jitter:
            raise ValueError("need 0 < jitter <= max_jitter")
        self.enc = encode(data.spec, data.points)
        self.groups = _groups(data.spec, self.enc)
        ys = (data.y - self.y_shift) / self.y_scale
        if data.noise is not None:
            nd = data.noise / self.y_scale**2
        elif noise_variance is not None:
            nd = np.full(len(data), float(noise_variance))
        else:
            nd = np.zeros(len(data))
        self.noise_diag = nd
        self.jitter = jitter
        self._factors = {}
        while True:
            try:
                for key, idx in self.groups.items():
                    sub = self.enc.take(idx)
                    K = kernel.gram_encoded(sub)
                    L = linalg.cholesky(K + np.diag(nd[idx] + self.jitter), lower=True,
                                        check_finite=False)
                    alpha = linalg.cho_solve((L, True), ys[idx], check_finite=False)
                    self._factors[key] = (idx, sub, L, alpha)
                break
            except linalg.LinAlgError:
                self._factors = {}
                if self.jitter >= max_jitter * (1 - 1e-9):
                    raise NotPSDError("gram matrix not positive definite after jitter escalation")
                self.jitter *= 10.0
        self.mll = float(mll) if np.isfinite(mll) else self._mll(ys)
        anchors = {}
        for v in range(data.spec.n_vertices):
            a = v
            path = [v]
            while data.spec.vertices[path[-1]].parent is not None:
                path.append(data.spec.vertices[path[-1]].parent)
            blocks = [u for u in reversed(path) if data.spec.vertices[u].dim]
            anchors[v] = blocks[0] if blocks else None
        self._vertex_anchor = anchors

    def _mll(self, ys):
        total = -0.5 * ys.size * LOG_2PI
        for idx, _, L, alpha in self._factors.values():
            total += -0.5 * ys[idx] @ alpha - np.sum(np.log(np.diag(L)))
        return float(total)

    @property
    def spec(self) -> TreeSpec:
        return self.data.spec

    @property
    def factor(self) -> np.ndarray:
        """Lower-triangular factor of ``gram + noise + jitter`` (standardized scale)."""
        n = len(self.data)
        L = np.zeros((n, n))
        for idx, _, Lg, _ in self._factors.values():
            L[np.ix_(idx, idx)] = Lg
        return L

    @property
    def alpha(self) -> np.ndarray:
        out = np.zeros(len(self.data))
        for idx, _, _, a in self._factors.values():
            out[idx] = a
        return out

    @property
    def hyperparameters(self) -> dict:
        out = dict(zip(self.kernel.theta_names, map(float, self.kernel.theta)))
        if self.noise_variance is not None:
            out["log_noise_variance"] = float(np.log(self.noise_variance))
        return out

    def group_of_anchor(self, anchor):
        return self._factors.get(anchor)

    def group_of_vertex(self, v: int):
        """``(indices, encoded, L, alpha)`` of the observations visiting ``v``."""
        a = self._vertex_anchor[v]
        return None if a is None else self._factors.get(a)

    # -- prediction ----------------------------------------------------------

    def predict(self, points, return_var=True):
        """Posterior means and variances (original units) for many points."""
        spec = self.data.spec
        enc = encode(spec, points)
        anchors = _anchor_keys(spec, enc.path_index)
        m = len(points)
        mean = np.zeros(m)
        var = np.array([self.kernel.prior_variance(i) for i in enc.path_index])
        for a in np.unique(anchors):
            rows = np.flatnonzero(anchors == a)
            group = self._factors.get(int(a)) if a >= 0 else None
            if group is None:
                continue
            _, sub, L, alpha = group
            Ks = self.kernel.gram_encoded(enc.take(rows), sub)
            mean[rows] = Ks @ alpha
            if return_var:
                v = linalg.solve_triangular(L, Ks.T, lower=True, check_finite=False)
                var[rows] -= np.sum(v * v, axis=0)
        mean = self.y_shift + self.y_scale * mean
        var = np.maximum(var, 0.0) * self.y_scale**2
        return (mean, var) if return_var else mean

    def posterior(self, x: StructuredPoint) -> PosteriorGaussian:
        mean, var = self.predict([x])
        return PosteriorGaussian(float(mean[0]), float(var[0]))

    def component_posterior(self, v: int, x_v) -> PosteriorGaussian:
        """Posterior of the additive component at vertex ``v``.

        Reported on the original scale without the target shift, so that for
        any point the components along its path sum to ``mean - y_shift``.
        """
        return PosteriorGaussian(*self.component_moments(v, x_v)[:2])

    def component_moments(self, v: int, x_v, with_grad=False):
        """Mean, variance and optionally their gradients in ``x_v``."""
        if self.spec.vertices[v].dim == 0:
            raise ValueError(f"vertex {v} carries no continuous block")
        x_v = np.asarray(x_v, dtype=float)
        prior = self.kernel.variance_of(v)
        group = self.group_of_vertex(v)
        s2 = self.y_scale**2
        if group is None:
            if with_grad:
                z = np.zeros(x_v.size)
                return 0.0, prior * s2, z, z
            return 0.0, prior * s2
        _, sub, L, alpha = group
        c, dc = self.kernel.vertex_cross(v, x_v, sub, with_grad)
        w = linalg.solve_triangular(L, c, lower=True, check_finite=False)
        mean = float(c @ alpha)
        var = float(prior - w @ w)
        if not with_grad:
            return self.y_scale * mean, max(var, 0.0) * s2
        Kinv_c = linalg.solve_triangular(L, w, lower=True, trans="T", check_finite=False)
        dmean = dc.T @ alpha
        dvar = -2.0 * dc.T @ Kinv_c
        return self.y_scale * mean, max(var, 0.0) * s2, self.y_scale * dmean, s2 * dvar

    def component_moments_many(self, v: int, X_v):
        """Vectorized :meth:`component_moments` over the rows of ``X_v``."""
        X_v = np.atleast_2d(np.asarray(X_v, dtype=float))
        prior = self.kernel.variance_of(v)
        s2 = self.y_scale**2
        group = self.group_of_vertex(v)
        if group is None:
            return np.zeros(len(X_v)), np.full(len(X_v), prior * s2)
        _, sub, L, alpha = group
        C = self.kernel.vertex_cross_many(v, X_v, sub)
        W = linalg.solve_triangular(L, C.T, lower=True, check_finite=False)
        var = prior - np.sum(W * W, axis=0)
        return self.y_scale * (C @ alpha), np.maximum(var, 0.0) * s2

    def __repr__(self):
        return f"FittedGP(n={len(self.data)}, mll={self.mll:.4g}, kernel={self.kernel!r})"


def prior_model(kernel: AddTreeKernel, spec: TreeSpec | None = None) -> FittedGP:
    """A model with no observations, for the first iteration."""
    return FittedGP(kernel, Dataset.empty(spec or kernel.spec), None, 0.0, 1.0)


def active_set(data: Dataset, x: StructuredPoint) -> ActiveSet:
    """Observations sharing a block-carrying vertex with the query's path."""
    spec = data.spec
    i = spec.validate(x, 1e-12)
    keep = []
    for j, p in enumerate(data.points):
        prefix = shared_prefix(spec, i, spec.path_index(p))
        if any(spec.vertices[v].dim for v in prefix):
            keep.append(j)
    sub = data.subset(keep)
    return ActiveSet(np.array(keep, dtype=int), sub.points, sub.y, sub.noise)


def posterior(gp: FittedGP, x: StructuredPoint) -> PosteriorGaussian:
    return gp.posterior(x)


def component_posterior(gp: FittedGP, v: int, x_v) -> PosteriorGaussian:
    return gp.component_posterior(v, x_v)


def log_marginal_likelihood(kernel: AddTreeKernel, data: Dataset, noise_variance=None,
                            config: FitConfig | None = None):
    """Log marginal likelihood and its gradient on standardized targets.

    The gradient is taken in the kernel's log-parameters, followed by the log
    noise variance when ``noise_variance`` is given and ``data.noise`` is
    None (the noise is being learned).
    """
    config = config or FitConfig()
    learn = data.noise is None and noise_variance is not None
    obj = _Objective(kernel, data, config, learn)
    theta = kernel.theta
    if learn:
        theta = np.r_[theta, np.log(noise_variance)]
    mll, grad, _ = obj.value_and_grad(theta)
    return float(mll), grad


def fit(data: Dataset, config: FitConfig | None = None, *, kernel: AddTreeKernel | None = None,
        warm_start=None, interactions=(), tie=None) -> FittedGP:
    """Maximize the marginal likelihood with multi-start L-BFGS-B.

    The first start is ``warm_start`` (a full parameter vector including log
    noise when it is learned) or the initial ``kernel``; the others are drawn
    log-uniformly inside the bounds. Returns the best point evaluated.
    """
    config = config or FitConfig()
    if len(data) == 0:
        raise ValueError("fit needs at least one observation")
    kernel = kernel or build_add_tree(data.spec, interactions=interactions, tie=tie)
    learn = data.noise is None
    obj = _Objective(kernel, data, config, learn)
    bounds = kernel.bounds
    if learn:
        bounds = np.vstack([bounds, np.log(config.noise_bounds)])
    x0 = kernel.theta
    if learn:
        x0 = np.r_[x0, np.log(config.noise_init)]
    if warm_start is not None:
        x0 = np.asarray(warm_start, dtype=float)
    x0 = np.clip(x0, bounds[:, 0], bounds[:, 1])
    rng = np.random.default_rng(config.seed)
    starts = [x0] + [rng.uniform(bounds[:, 0], bounds[:, 1])
                     for _ in range(max(config.n_restarts, 1) - 1)]
    successes = 0
    for s in starts:
        try:
            res = optimize.minimize(obj, s, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": config.maxiter})
            successes += bool(res.success) or res.status == 1
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("restart failed: %s", exc)
    best_mll, best_theta = obj.best
    warning = None
    if best_theta is None:
        raise NotPSDError("no restart produced a finite marginal likelihood")
    if successes == 0:
        warning = "all restarts stopped abnormally; returning best evaluated point"
        warnings.warn(warning, RuntimeWarning, stacklevel=2)
    k = kernel.with_theta(best_theta[: kernel.n_params])
    noise = float(np.exp(best_theta[-1])) if learn else None
    return FittedGP(k, data, noise, obj.shift, obj.scale, config.jitter, config.max_jitter,
                    mll=np.nan, warning=warning)
