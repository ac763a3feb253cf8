"""Additive tree-structured covariance functions.

The covariance between two points is the sum, over the block-carrying
vertices shared by their two paths (root down to the lowest common ancestor
of their leaves), of a base kernel evaluated on that vertex's variables.
Equivalently every block vertex contributes ``delta_v(x, x') * k_v(x, x')``
where ``delta_v`` is one iff both points' paths visit ``v``; the delta is
computed from path membership, never from encoded tags.

Optional interaction terms add ``s_uv * k_u * k_v`` for an ancestor /
descendant pair ``(u, v)`` on one path. The term is zero unless both points
visit ``v``, so covariance between interaction components of different
paths is fixed at zero.

All hyperparameters live in log space. The flat vector ``theta`` is laid out
group by group, ``[log_variance, log_lengthscales...]``, then one log-scale
per interaction pair. By default every block vertex is its own group; tied
vertices (same block dimension) share one set of parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .space import StructuredPoint, TreeSpec, shared_prefix

__all__ = [
    "SquaredExponential",
    "VertexKernelParams",
    "Interaction",
    "AddTreeKernel",
    "Encoded",
    "encode",
    "se_base",
    "build_add_tree",
    "eval_pair",
    "eval_with_interactions",
    "gram",
    "grad_hyper",
    "VARIANCE_BOUNDS",
    "LENGTHSCALE_FACTORS",
]

VARIANCE_BOUNDS = (1e-4, 1e4)
LENGTHSCALE_FACTORS = (1e-2, 1e2)  # multiples of the box width
SCALE_BOUNDS = (1e-4, 1e2)


class SquaredExponential:
    """Profile ``g(s) = exp(-s / 2)`` of the SE kernel in scaled squared distance.

    A base kernel for a vertex is ``variance * g(s)`` with
    ``s = sum_d ((x_d - x'_d) / l_d) ** 2``. Other stationary profiles can
    be used by supplying an object with the same two methods.
    """

    name = "se"

    def __call__(self, s):
        return np.exp(-0.5 * s)

    def derivative(self, s):
        return -0.5 * np.exp(-0.5 * s)


def se_base(sq_dist_scaled: float, params: VertexKernelParams) -> float:
    """``sigma * exp(-sq_dist_scaled / 2)`` with ``sigma = exp(log_variance)``."""
    if sq_dist_scaled < 0:
        raise ValueError("squared distance must be non-negative")
    return float(np.exp(params.log_variance) * np.exp(-0.5 * sq_dist_scaled))


@dataclass(frozen=True)
class VertexKernelParams:
    log_variance: float
    log_lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.array(self.log_lengthscales, dtype=float).reshape(-1)
        ls.setflags(write=False)
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_variance", float(self.log_variance))
        if not (np.isfinite(self.log_variance) and np.all(np.isfinite(ls))):
            raise ValueError("kernel parameters must be finite")

    @property
    def variance(self) -> float:
        return float(np.exp(self.log_variance))

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    def scaled_sq_dist(self, a, b) -> float:
        d = (np.asarray(a, float) - np.asarray(b, float)) / self.lengthscales
        return float(d @ d)


@dataclass(frozen=True)
class Interaction:
    ancestor: int
    descendant: int
    log_scale: float = 0.0


@dataclass(frozen=True)
class Encoded:
    """Column view of a list of points used by the vectorized routines.

    ``member[i, v]`` says whether point ``i`` visits vertex ``v``;
    ``values[v]`` is an ``(n, dim_v)`` array, zero on rows not visiting ``v``.
    """

    path_index: np.ndarray
    member: np.ndarray
    values: tuple

    def __len__(self):
        return len(self.path_index)

    def take(self, idx) -> Encoded:
        idx = np.asarray(idx, dtype=int)
        return Encoded(
            self.path_index[idx],
            self.member[idx],
            tuple(None if v is None else v[idx] for v in self.values),
        )


def encode(spec: TreeSpec, points: Sequence[StructuredPoint]) -> Encoded:
    n = len(points)
    path_index = np.array([spec.validate(p, tol=1e-12) for p in points], dtype=int)
    member = spec.membership[path_index] if n else np.zeros((0, spec.n_vertices), bool)
    values = []
    for v in spec.vertices:
        if not v.dim:
            values.append(None)
            continue
        arr = np.zeros((n, v.dim))
        for i, p in enumerate(points):
            x = p.values.get(v.id)
            if x is not None:
                arr[i] = x
        values.append(arr)
    return Encoded(path_index, np.asarray(member), tuple(values))


class _PairCache:
    """Per-vertex masks and squared coordinate differences for two point sets."""

    def __init__(self, block_vertices, A: Encoded, B: Encoded):
        self.shape = (len(A), len(B))
        self.mask = {}
        self.sq = {}
        for v in block_vertices:
            m = np.outer(A.member[:, v], B.member[:, v])
            diff = A.values[v][:, None, :] - B.values[v][None, :, :]
            self.mask[v] = m.astype(float)
            self.sq[v] = np.moveaxis(diff * diff, -1, 0)  # (dim, n1, n2)


class AddTreeKernel:
    """Add-Tree covariance over a :class:`TreeSpec`.

    Parameters
    ----------
    spec : TreeSpec
    params : dict of int to VertexKernelParams
        One entry per block-carrying vertex.
    interactions : sequence of Interaction, optional
        Ancestor/descendant pairs of block vertices on a common path.
    profile : object, optional
        Stationary profile shared by all vertices, squared exponential by
        default.
    """

    def __init__(self, spec: TreeSpec, params, interactions=(), profile=None, tie=None):
        self.spec = spec
        self.profile = profile if profile is not None else SquaredExponential()
        self.block_vertices = spec.block_vertices
        missing = set(self.block_vertices) - set(params)
        extra = set(params) - set(self.block_vertices)
        if missing or extra:
            raise ValueError(
                f"parameters must cover exactly the block vertices {self.block_vertices}"
            )
        for v, p in params.items():
            if p.log_lengthscales.size != spec.vertices[v].dim:
                raise ValueError(f"vertex {v} needs {spec.vertices[v].dim} lengthscales")
        self.tie_groups = _tie_groups(spec, tie)
        # Tied vertices take their representative's parameters.
        self.params = {}
        for group in self.tie_groups:
            for v in group:
                self.params[v] = params[group[0]]
        self.params = {v: self.params[v] for v in self.block_vertices}
        inter = []
        for it in interactions:
            u, w = it.ancestor, it.descendant
            if u not in self.params or w not in self.params:
                raise ValueError(f"interaction ({u}, {w}) needs two block-carrying vertices")
            if not _is_ancestor(spec, u, w):
                raise ValueError(f"interaction ({u}, {w}) is not an ancestor/descendant pair")
            inter.append(Interaction(u, w, float(it.log_scale)))
        self.interactions = tuple(inter)
        self._slices = []
        pos = 0
        for group in self.tie_groups:
            d = spec.vertices[group[0]].dim
            self._slices.append(slice(pos, pos + 1 + d))
            pos += 1 + d
        self.n_params = pos + len(self.interactions)

    # -- parameter vector ----------------------------------------------------

    @property
    def theta(self) -> np.ndarray:
        out = np.empty(self.n_params)
        for group, sl in zip(self.tie_groups, self._slices):
            p = self.params[group[0]]
            out[sl] = np.r_[p.log_variance, p.log_lengthscales]
        out[self.n_params - len(self.interactions) :] = [
            it.log_scale for it in self.interactions
        ]
        return out

    def with_theta(self, theta) -> AddTreeKernel:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        params = {}
        for group, sl in zip(self.tie_groups, self._slices):
            p = VertexKernelParams(theta[sl][0], theta[sl][1:])
            params.update({v: p for v in group})
        off = self.n_params - len(self.interactions)
        inter = [
            Interaction(it.ancestor, it.descendant, theta[off + k])
            for k, it in enumerate(self.interactions)
        ]
        return AddTreeKernel(self.spec, params, inter, self.profile, self.tie_groups)

    @property
    def theta_names(self) -> list[str]:
        names = []
        for group in self.tie_groups:
            tag = "+".join(self.spec.vertices[v].name or f"v{v}" for v in group)
            names.append(f"{tag}.log_variance")
            block = self.spec.vertices[group[0]].block
            if len(group) == 1:
                names.extend(f"{tag}.log_lengthscale[{n}]" for n in block.names)
            else:
                names.extend(f"{tag}.log_lengthscale[{j}]" for j in range(block.dim))
        for it in self.interactions:
            names.append(f"interaction[{it.ancestor},{it.descendant}].log_scale")
        return names

    @property
    def bounds(self) -> np.ndarray:
        """``(n_params, 2)`` box in log space.

        Lengthscales range over ``[1e-2, 1e2]`` times the box width; a tied
        group uses the intersection of its members' ranges.
        """
        out = np.empty((self.n_params, 2))
        lo_f, hi_f = LENGTHSCALE_FACTORS
        for group, sl in zip(self.tie_groups, self._slices):
            widths = np.array([self.spec.vertices[v].block.widths for v in group])
            rows = np.empty((1 + widths.shape[1], 2))
            rows[0] = np.log(VARIANCE_BOUNDS)
            rows[1:, 0] = np.log(lo_f * widths.max(axis=0))
            rows[1:, 1] = np.log(hi_f * widths.min(axis=0))
            out[sl] = rows
        out[self.n_params - len(self.interactions) :] = np.log(SCALE_BOUNDS)
        return out

    def variance_of(self, v: int) -> float:
        return self.params[v].variance

    def prior_variance(self, path_index: int) -> float:
        """``k(x, x)`` for any point on the given path."""
        s = sum(self.params[v].variance for v in self.block_vertices
                if self.spec.on_path(path_index, v))
        for it in self.interactions:
            if self.spec.on_path(path_index, it.descendant):
                s += (np.exp(it.log_scale) * self.params[it.ancestor].variance
                      * self.params[it.descendant].variance)
        return float(s)

    # -- scalar route: shared prefix, one pair at a time ------------------------

    def _vertex_value(self, v, x, x2):
        p = self.params[v]
        s = p.scaled_sq_dist(x.values[v], x2.values[v])
        return p.variance * float(self.profile(s))

    def eval_pair(self, x: StructuredPoint, x2: StructuredPoint) -> float:
        """Additive part: sum of vertex kernels over the shared prefix."""
        i, j = self.spec.validate(x, 1e-12), self.spec.validate(x2, 1e-12)
        total = 0.0
        for v in shared_prefix(self.spec, i, j):
            if self.spec.vertices[v].dim:
                total += self._vertex_value(v, x, x2)
        return total

    def eval_with_interactions(self, x: StructuredPoint, x2: StructuredPoint) -> float:
        total = self.eval_pair(x, x2)
        if not self.interactions:
            return total
        prefix = set(shared_prefix(self.spec, self.spec.validate(x), self.spec.validate(x2)))
        for it in self.interactions:
            if it.ancestor in prefix and it.descendant in prefix:
                total += (
                    np.exp(it.log_scale)
                    * self._vertex_value(it.ancestor, x, x2)
                    * self._vertex_value(it.descendant, x, x2)
                )
        return float(total)

    # -- vectorized route ----------------------------------------------------

    def _terms(self, cache: _PairCache, with_grad=False):
        terms, dterms = {}, {}
        for v in self.block_vertices:
            p = self.params[v]
            inv_l2 = np.exp(-2.0 * p.log_lengthscales)
            s = np.tensordot(inv_l2, cache.sq[v], axes=1)
            t = p.variance * cache.mask[v] * self.profile(s)
            terms[v] = t
            if with_grad:
                # d t / d log l_d = variance * g'(s) * (-2 sq_d / l_d^2)
                g1 = p.variance * cache.mask[v] * self.profile.derivative(s)
                dl = -2.0 * g1[None] * cache.sq[v] * inv_l2[:, None, None]
                dterms[v] = np.concatenate([t[None], dl], axis=0)
        return terms, dterms

    def _assemble(self, cache: _PairCache, with_grad=False):
        terms, dterms = self._terms(cache, with_grad)
        K = np.zeros(cache.shape)
        for t in terms.values():
            K += t
        if not with_grad:
            for it in self.interactions:
                K += np.exp(it.log_scale) * terms[it.ancestor] * terms[it.descendant]
            return K, None
        factor = {v: 1.0 for v in self.block_vertices}
        inter_grads = []
        for it in self.interactions:
            s = np.exp(it.log_scale)
            prod = s * terms[it.ancestor] * terms[it.descendant]
            K += prod
            factor[it.ancestor] = factor[it.ancestor] + s * terms[it.descendant]
            factor[it.descendant] = factor[it.descendant] + s * terms[it.ancestor]
            inter_grads.append(prod)
        dK = np.zeros((self.n_params,) + cache.shape)
        for group, sl in zip(self.tie_groups, self._slices):
            for v in group:
                dK[sl] += dterms[v] * factor[v]
        if inter_grads:
            dK[self.n_params - len(inter_grads) :] = inter_grads
        return K, dK

    def cache(self, A: Encoded, B: Encoded | None = None) -> _PairCache:
        return _PairCache(self.block_vertices, A, A if B is None else B)

    def gram_encoded(self, A: Encoded, B: Encoded | None = None) -> np.ndarray:
        return self._assemble(self.cache(A, B))[0]

    def __call__(self, X, X2=None) -> np.ndarray:
        A = X if isinstance(X, Encoded) else encode(self.spec, X)
        if X2 is None:
            return self.gram_encoded(A)
        B = X2 if isinstance(X2, Encoded) else encode(self.spec, X2)
        return self.gram_encoded(A, B)

    def gram_and_grad(self, X):
        A = X if isinstance(X, Encoded) else encode(self.spec, X)
        return self._assemble(self.cache(A), with_grad=True)

    # -- cross covariance with input gradient -------------------------------

    def vertex_cross(self, v: int, x_v, data: Encoded, with_grad=False):
        """``k_v(x_v, x_i|v)`` for points visiting ``v`` (zero elsewhere).

        Returns the ``(n,)`` vector and, optionally, its ``(n, dim_v)``
        gradient in ``x_v``.
        """
        p = self.params[v]
        x_v = np.asarray(x_v, dtype=float)
        inv_l2 = np.exp(-2.0 * p.log_lengthscales)
        diff = x_v[None, :] - data.values[v]
        s = (diff * diff) @ inv_l2
        mask = data.member[:, v]
        c = p.variance * mask * self.profile(s)
        if not with_grad:
            return c, None
        g1 = p.variance * mask * self.profile.derivative(s)
        dc = g1[:, None] * 2.0 * diff * inv_l2[None, :]
        return c, dc

    def vertex_cross_many(self, v: int, X_v, data: Encoded) -> np.ndarray:
        """``(m, n)`` matrix of :meth:`vertex_cross` for ``m`` query rows."""
        p = self.params[v]
        X_v = np.atleast_2d(np.asarray(X_v, dtype=float))
        inv_l2 = np.exp(-2.0 * p.log_lengthscales)
        diff = X_v[:, None, :] - data.values[v][None, :, :]
        s = (diff * diff) @ inv_l2
        return p.variance * data.member[None, :, v] * self.profile(s)

    def __repr__(self):
        return (
            f"AddTreeKernel(n_terms={len(self.block_vertices)}, "
            f"n_interactions={len(self.interactions)}, n_params={self.n_params})"
        )


def _depth(spec: TreeSpec, v: int) -> int:
    d = 0
    while spec.vertices[v].parent is not None:
        v = spec.vertices[v].parent
        d += 1
    return d


def _tie_groups(spec: TreeSpec, tie) -> tuple:
    """Partition of the block vertices into parameter-sharing groups.

    ``tie`` is None (no sharing), ``"depth"`` (vertices at the same depth with
    the same block dimension share), ``"all"`` (same block dimension shares)
    or an explicit sequence of vertex groups.
    """
    blocks = spec.block_vertices
    if tie is None or tie == "none":
        return tuple((v,) for v in blocks)
    if tie in ("depth", "all"):
        keyed = {}
        for v in blocks:
            key = (spec.vertices[v].dim, _depth(spec, v) if tie == "depth" else 0)
            keyed.setdefault(key, []).append(v)
        groups = [tuple(g) for g in keyed.values()]
    elif isinstance(tie, str):
        raise ValueError(f"unknown tie policy {tie!r}")
    else:
        groups = [tuple(sorted(int(v) for v in g)) for g in tie]
        seen = [v for g in groups for v in g]
        singles = [(v,) for v in blocks if v not in seen]
        if len(set(seen)) != len(seen) or not set(seen) <= set(blocks):
            raise ValueError("tie groups must be disjoint sets of block vertices")
        groups += singles
    for g in groups:
        if len({spec.vertices[v].dim for v in g}) != 1:
            raise ValueError(f"tied vertices {g} have different block dimensions")
    return tuple(sorted(groups, key=lambda g: g[0]))


def _is_ancestor(spec: TreeSpec, u: int, v: int) -> bool:
    if u == v:
        return False
    w = spec.vertices[v].parent
    while w is not None:
        if w == u:
            return True
        w = spec.vertices[w].parent
    return False


def default_params(spec: TreeSpec, v: int) -> VertexKernelParams:
    block = spec.vertices[v].block
    return VertexKernelParams(0.0, np.log(0.5 * block.widths))


def random_params(spec: TreeSpec, v: int, rng: np.random.Generator) -> VertexKernelParams:
    block = spec.vertices[v].block
    lo_f, hi_f = LENGTHSCALE_FACTORS
    return VertexKernelParams(
        rng.uniform(*np.log(VARIANCE_BOUNDS)),
        rng.uniform(np.log(lo_f * block.widths), np.log(hi_f * block.widths)),
    )


def build_add_tree(
    spec: TreeSpec,
    init: str | Callable = "default",
    *,
    interactions: Sequence = (),
    rng: np.random.Generator | None = None,
    profile=None,
    tie=None,
) -> AddTreeKernel:
    """One delta-times-base term per block-carrying vertex, summed.

    ``init`` is ``"default"`` (unit variance, lengthscale half the box
    width), ``"random"`` (log-uniform inside the bounds; needs ``rng``) or a
    callable ``(spec, vertex_id) -> VertexKernelParams``. ``interactions``
    holds ``(ancestor, descendant)`` pairs or :class:`Interaction` objects.
    ``tie`` shares parameters between vertices, see :func:`_tie_groups`.
    """
    if init == "default":
        make = default_params
    elif init == "random":
        if rng is None:
            raise ValueError("random initialisation needs an rng")
        make = lambda s, v: random_params(s, v, rng)  # noqa: E731
    elif callable(init):
        make = init
    else:
        raise ValueError(f"unknown init policy {init!r}")
    params = {v: make(spec, v) for v in spec.block_vertices}
    inter = [it if isinstance(it, Interaction) else Interaction(*it) for it in interactions]
    return AddTreeKernel(spec, params, inter, profile, tie)


def eval_pair(k: AddTreeKernel, x: StructuredPoint, x2: StructuredPoint) -> float:
    return k.eval_pair(x, x2)


def eval_with_interactions(k: AddTreeKernel, x: StructuredPoint, x2: StructuredPoint) -> float:
    return k.eval_with_interactions(x, x2)


def gram(k: AddTreeKernel, X, X2=None) -> np.ndarray:
    return k(X, X2)


def grad_hyper(k: AddTreeKernel, X) -> np.ndarray:
    """Derivatives of the gram matrix in every log-parameter, ``(n_params, n, n)``."""
    return k.gram_and_grad(X)[1]
