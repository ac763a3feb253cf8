"""GP-UCB acquisition for tree-structured spaces.

:func:`propose` exploits the additive structure of the Add-Tree model: the
upper confidence bound of each vertex component is maximized on its own
(low-dimensional) box, the per-vertex optima are summed along each path and
the best path wins. The work is one optimization per block-carrying vertex,
independent of the number of paths.

:func:`naive_propose` is the straightforward alternative that maximizes the
joint UCB of every path over the path's full box. It costs one (larger)
optimization per leaf and is kept as a baseline and a correctness check.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .gp import FittedGP
from .space import StructuredPoint, TreeSpec

__all__ = [
    "UcbConfig",
    "Proposal",
    "beta",
    "optimize_vertex",
    "optimize_path",
    "propose",
    "naive_propose",
    "joint_ucb",
    "component_ucb",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UcbConfig:
    """Settings for UCB maximization.

    Parameters
    ----------
    beta_coeff : float
        ``beta_t = beta_coeff * d * log(2 t)``.
    per_vertex_dim : bool
        Use each vertex's block dimension as ``d`` in :func:`propose`. When
        False the largest path dimension is used for every vertex.
    restarts : int
        Quasi-Newton starts per optimization, taken from the best random
        probes. A warm start, when given, is added on top.
    n_probes : int
        Uniform random probes evaluated before local optimization.
    grid_check : int or None
        If set, vertices of dimension one or two are also evaluated on a
        regular grid with this many points per axis.
    seed : int
        Base seed. Each (iteration, vertex) pair derives its own stream so
        results do not depend on execution order.
    n_jobs : int
        Threads used for the per-vertex optimizations in :func:`propose`.
    """

    beta_coeff: float = 0.2
    per_vertex_dim: bool = True
    restarts: int = 10
    n_probes: int = 1000
    grid_check: int | None = None
    seed: int = 0
    n_jobs: int = 1
    maxiter: int = 100

    def __post_init__(self):
        if not self.beta_coeff > 0:
            raise ValueError("beta_coeff must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.n_probes < 1:
            raise ValueError("n_probes must be at least 1")


@dataclass(frozen=True)
class Proposal:
    """Result of one acquisition step.

    ``scores`` maps each block vertex to its optimized UCB value,
    ``path_scores`` holds the per-path totals and ``value`` is the score of
    the chosen path.
    """

    point: StructuredPoint
    path: int
    scores: dict
    value: float
    path_scores: np.ndarray = field(repr=False)
    n_optimizations: int = 0


def beta(t: int, d: int, cfg: UcbConfig | None = None) -> float:
    """Exploration weight ``beta_coeff * d * log(2 t)``."""
    cfg = cfg or UcbConfig()
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    return cfg.beta_coeff * d * np.log(2.0 * t)


def _rng(cfg: UcbConfig, t: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(t), int(key)]))


MAX_CORNER_DIM = 4


def _grid(lows, highs, resolution):
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(lows, highs)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _maximize(fun_many, fun_grad, lows, highs, rng, cfg, warm=None, grid_ok=True):
    """Maximize a box-constrained function: random probes and, in low
    dimension, the box corners, then L-BFGS-B from the best of them.

    ``fun_many`` evaluates a batch of rows, ``fun_grad`` returns the value
    and gradient at one row. Returns ``(x, value)``; ties keep the first
    candidate found.
    """
    lows = np.asarray(lows, dtype=float)
    highs = np.asarray(highs, dtype=float)
    probes = rng.uniform(lows, highs, size=(cfg.n_probes, lows.size))
    if cfg.grid_check and grid_ok and lows.size <= 2:
        probes = np.vstack([probes, _grid(lows, highs, cfg.grid_check)])
    if lows.size <= MAX_CORNER_DIM:
        # Far from the data the variance peaks, often at a corner of the box.
        probes = np.vstack([probes, _grid(lows, highs, 2)])
    if warm is not None:
        probes = np.vstack([np.clip(np.asarray(warm, dtype=float), lows, highs), probes])
    vals = fun_many(probes)
    best = int(np.argmax(vals))
    best_x, best_val = probes[best].copy(), float(vals[best])
    order = np.argsort(-vals, kind="stable")[: cfg.restarts]
    starts = [probes[i] for i in order]
    if warm is not None and 0 not in order[: cfg.restarts]:
        starts.append(probes[0])
    bounds = list(zip(lows, highs))

    def neg(x):
        v, g = fun_grad(x)
        return -v, -g

    for x0 in starts:
        try:
            res = optimize.minimize(neg, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": cfg.maxiter, "gtol": 1e-12,
                                             "ftol": 1e-15})
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.debug("local optimization failed: %s", exc)
            continue
        x = np.clip(res.x, lows, highs)
        val = float(fun_many(x[None, :])[0])
        if np.isfinite(val) and val > best_val:
            best_x, best_val = x, val
    return best_x, best_val


# -- per-vertex (additive) acquisition ----------------------------------------


def component_ucb(gp: FittedGP, v: int, x_v, beta_t: float) -> float:
    """``mu_v(x_v) + sqrt(beta_t) sigma_v(x_v)`` for the component at ``v``."""
    mean, var = gp.component_moments(v, x_v)
    return float(mean + np.sqrt(beta_t) * np.sqrt(var))


def _vertex_beta(gp: FittedGP, v: int, t: int, cfg: UcbConfig) -> float:
    if cfg.per_vertex_dim:
        return beta(t, gp.spec.vertices[v].dim, cfg)
    from .space import dimensions

    return beta(t, max(dimensions(gp.spec)[1]), cfg)


def optimize_vertex(gp: FittedGP, v: int, t: int, cfg: UcbConfig | None = None, warm=None):
    """Maximize the UCB of the component at vertex ``v`` over its box.

    Returns
    -------
    x_v : ndarray
        Maximizer, always inside the box.
    u_v : float
        UCB value at ``x_v``.
    """
    cfg = cfg or UcbConfig()
    block = gp.spec.vertices[v].block
    if block.dim == 0:
        raise ValueError(f"vertex {v} carries no continuous block")
    sb = np.sqrt(_vertex_beta(gp, v, t, cfg))

    def many(X):
        m, s2 = gp.component_moments_many(v, X)
        return m + sb * np.sqrt(s2)

    def one(x):
        m, s2, dm, ds2 = gp.component_moments(v, x, with_grad=True)
        sd = np.sqrt(s2)
        grad = dm + (sb * ds2 / (2.0 * sd) if sd > 1e-12 else 0.0)
        return m + sb * sd, grad

    x, _ = _maximize(many, one, block.lows, block.highs, _rng(cfg, t, v), cfg, warm)
    # Report the value through the scalar route so it matches component_posterior.
    return x, component_ucb(gp, v, x, sb**2)


def _assemble_point(spec: TreeSpec, path_index: int, values: dict) -> StructuredPoint:
    path = spec.paths[path_index]
    choices = {a: spec.vertices[b].label for a, b in zip(path[:-1], path[1:])}
    vals = {v: np.asarray(values[v], dtype=float) for v in path if spec.vertices[v].dim}
    return StructuredPoint(choices, vals)


def propose(gp: FittedGP, t: int, cfg: UcbConfig | None = None,
            warm_start: StructuredPoint | None = None) -> Proposal:
    """One step of the additive per-vertex UCB search.

    Every block-carrying vertex is optimized once. Path scores are the sums
    of their vertices' optima; the best path wins, ties going to the lowest
    path index.
    """
    cfg = cfg or UcbConfig()
    if gp.kernel.interactions:
        raise ValueError("per-vertex acquisition needs an additive kernel; "
                         "use naive_propose with interaction terms")
    spec = gp.spec
    verts = list(spec.block_vertices)
    warm = dict(warm_start.values) if warm_start is not None else {}

    def job(v):
        # Looked up at call time so instrumentation can wrap it.
        return optimize_vertex(gp, v, t, cfg, warm.get(v))

    if cfg.n_jobs > 1 and len(verts) > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(job, verts))
    else:
        results = [job(v) for v in verts]
    xs = {v: r[0] for v, r in zip(verts, results)}
    scores = {v: float(r[1]) for v, r in zip(verts, results)}
    path_scores = np.zeros(spec.n_paths)
    for i, path in enumerate(spec.paths):
        total = 0.0
        for v in path:
            if v in scores:
                total += scores[v]
        path_scores[i] = total
    j = int(np.argmax(path_scores))
    point = _assemble_point(spec, j, xs)
    return Proposal(point, j, scores, float(path_scores[j]), path_scores, len(verts))


# -- joint (per-path) acquisition ---------------------------------------------


def _path_layout(spec: TreeSpec, path_index: int):
    verts = [v for v in spec.paths[path_index] if spec.vertices[v].dim]
    pos, slices = 0, {}
    for v in verts:
        slices[v] = slice(pos, pos + spec.vertices[v].dim)
        pos += spec.vertices[v].dim
    return verts, slices, pos


def _path_group(gp: FittedGP, path_index: int):
    a = gp.spec.anchor(path_index)
    return None if a is None else gp.group_of_anchor(a)


def _joint_cross(gp: FittedGP, path_index: int, X, sub):
    """Cross-covariances ``(m, n)`` between path points (flat rows) and ``sub``."""
    k = gp.kernel
    verts, slices, _ = _path_layout(gp.spec, path_index)
    terms = {v: k.vertex_cross_many(v, X[:, slices[v]], sub) for v in verts}
    C = sum(terms.values())
    for it in k.interactions:
        if it.descendant in terms:
            C = C + np.exp(it.log_scale) * terms[it.ancestor] * terms[it.descendant]
    return C


def _joint_moments_many(gp: FittedGP, path_index: int, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    prior = gp.kernel.prior_variance(path_index)
    group = _path_group(gp, path_index)
    if group is None:
        return np.full(len(X), gp.y_shift), np.full(len(X), prior * gp.y_scale**2)
    _, sub, L, alpha = group
    C = _joint_cross(gp, path_index, X, sub)
    W = linalg.solve_triangular(L, C.T, lower=True, check_finite=False)
    var = np.maximum(prior - np.sum(W * W, axis=0), 0.0)
    return gp.y_shift + gp.y_scale * (C @ alpha), var * gp.y_scale**2


def _joint_moments_grad(gp: FittedGP, path_index: int, x):
    k = gp.kernel
    verts, slices, dim = _path_layout(gp.spec, path_index)
    prior = k.prior_variance(path_index)
    group = _path_group(gp, path_index)
    s2 = gp.y_scale**2
    if group is None:
        return gp.y_shift, prior * s2, np.zeros(dim), np.zeros(dim)
    _, sub, L, alpha = group
    n = len(sub)
    c = np.zeros(n)
    dc = np.zeros((n, dim))
    vals, grads = {}, {}
    for v in verts:
        vals[v], grads[v] = k.vertex_cross(v, x[slices[v]], sub, with_grad=True)
        c += vals[v]
        dc[:, slices[v]] += grads[v]
    for it in k.interactions:
        if it.descendant not in vals:
            continue
        s = np.exp(it.log_scale)
        u, w = it.ancestor, it.descendant
        c += s * vals[u] * vals[w]
        dc[:, slices[u]] += s * grads[u] * vals[w][:, None]
        dc[:, slices[w]] += s * grads[w] * vals[u][:, None]
    w_ = linalg.solve_triangular(L, c, lower=True, check_finite=False)
    Kinv_c = linalg.solve_triangular(L, w_, lower=True, trans="T", check_finite=False)
    mean = gp.y_shift + gp.y_scale * float(c @ alpha)
    var = max(prior - float(w_ @ w_), 0.0) * s2
    return mean, var, gp.y_scale * (dc.T @ alpha), -2.0 * s2 * (dc.T @ Kinv_c)


def _flatten(spec: TreeSpec, path_index: int, point: StructuredPoint):
    verts, _, _ = _path_layout(spec, path_index)
    if not verts:
        return np.zeros(0)
    return np.concatenate([np.asarray(point.values[v], dtype=float) for v in verts])


def joint_ucb(gp: FittedGP, point: StructuredPoint, beta_t: float) -> float:
    """``mu(x) + sqrt(beta_t) sigma(x)`` of the full model at ``point``."""
    i = gp.spec.validate(point, 1e-9)
    m, v = _joint_moments_many(gp, i, _flatten(gp.spec, i, point)[None, :])
    return float(m[0] + np.sqrt(beta_t) * np.sqrt(v[0]))


def optimize_path(gp: FittedGP, path_index: int, t: int, cfg: UcbConfig | None = None,
                  warm=None):
    """Maximize the joint UCB over the full box of one path.

    Returns ``(point, value)``.
    """
    cfg = cfg or UcbConfig()
    spec = gp.spec
    verts, slices, dim = _path_layout(spec, path_index)
    if dim == 0:
        point = _assemble_point(spec, path_index, {})
        m, _ = _joint_moments_many(gp, path_index, np.zeros((1, 0)))
        return point, float(m[0])
    sb = np.sqrt(beta(t, dim, cfg))
    lows = np.concatenate([spec.vertices[v].block.lows for v in verts])
    highs = np.concatenate([spec.vertices[v].block.highs for v in verts])

    def many(X):
        m, s2 = _joint_moments_many(gp, path_index, X)
        return m + sb * np.sqrt(s2)

    def one(x):
        m, s2, dm, ds2 = _joint_moments_grad(gp, path_index, x)
        sd = np.sqrt(s2)
        grad = dm + (sb * ds2 / (2.0 * sd) if sd > 1e-12 else 0.0)
        return m + sb * sd, grad

    rng = _rng(cfg, t, spec.n_vertices + path_index)
    x, _ = _maximize(many, one, lows, highs, rng, cfg, warm, grid_ok=False)
    point = _assemble_point(spec, path_index, {v: x[slices[v]] for v in verts})
    return point, float(many(x[None, :])[0])


def naive_propose(gp: FittedGP, t: int, cfg: UcbConfig | None = None,
                  warm_start: StructuredPoint | None = None) -> Proposal:
    """Maximize the joint UCB separately on every path and keep the best.

    Works with or without interaction terms. ``scores`` maps path index to
    the optimized joint UCB.
    """
    cfg = cfg or UcbConfig()
    spec = gp.spec
    warm_path = spec.validate(warm_start, 1e-9) if warm_start is not None else None
    points, path_scores = [], np.zeros(spec.n_paths)
    for i in range(spec.n_paths):
        warm = _flatten(spec, i, warm_start) if warm_path == i else None
        p, val = optimize_path(gp, i, t, cfg, warm)
        points.append(p)
        path_scores[i] = val
    j = int(np.argmax(path_scores))
    scores = {i: float(s) for i, s in enumerate(path_scores)}
    return Proposal(points[j], j, scores, float(path_scores[j]), path_scores, spec.n_paths)
