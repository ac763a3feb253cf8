"""Optimization strategies sharing one ``propose`` / ``observe`` interface.

All strategies *minimize* the objective. GP-based strategies model ``-y``
and maximize an upper confidence bound. Each strategy draws ``n_init``
uniform random points before its first model fit.

``AddTreeStrategy``
    One Add-Tree GP over the whole tree with the per-vertex acquisition.
``IndependentGPStrategy``
    One GP per leaf over that leaf's path variables, with no sharing.
``OneHotStrategy``
    One GP over a flat box holding every continuous variable plus a
    one-hot indicator per categorical choice.
``RandomStrategy``
    Uniform sampling.
"""

from __future__ import annotations

import logging

import numpy as np

from . import acquisition
from .acquisition import Proposal, UcbConfig
from .gp import Dataset, FitConfig, FittedGP, NotPSDError, fit, prior_model
from .kernels import Interaction, _is_ancestor, build_add_tree
from .space import ContinuousBlock, StructuredPoint, TreeSpec, Vertex, sample_uniform

__all__ = [
    "STRATEGIES",
    "Strategy",
    "RandomStrategy",
    "AddTreeStrategy",
    "IndependentGPStrategy",
    "OneHotStrategy",
    "make_strategy",
    "random_step",
    "independent_propose",
    "onehot_propose",
    "box_spec",
    "all_interactions",
]

logger = logging.getLogger(__name__)


def box_spec(names, lows, highs, name=None) -> TreeSpec:
    """A single-vertex space: one continuous box and no categorical choices."""
    return TreeSpec([Vertex(0, ContinuousBlock(tuple(names), lows, highs), {}, name=name)])


def all_interactions(spec: TreeSpec, log_scale: float = 0.0) -> list[Interaction]:
    """Every ancestor/descendant pair of block-carrying vertices."""
    verts = spec.block_vertices
    return [Interaction(u, w, log_scale) for u in verts for w in verts
            if u != w and _is_ancestor(spec, u, w)]


def _fit_seed(seed: int, t: int, key: int = 0) -> int:
    return int(np.random.SeedSequence([int(seed), int(t), int(key)]).generate_state(1)[0])


def _refit(data: Dataset, kernel, warm, seed, t, key=0, fit_config=None):
    """Fit with a warm start; on failure keep going without one, then give up."""
    base = fit_config or FitConfig()
    cfg = FitConfig(**{**base.__dict__, "seed": _fit_seed(seed, t, key)})
    for ws in (warm, None):
        try:
            return fit(data, cfg, kernel=kernel, warm_start=ws)
        except NotPSDError as exc:
            logger.warning("model fit failed at t=%d: %s", t, exc)
    return None


def _warm_vector(gp: FittedGP):
    theta = gp.kernel.theta
    if gp.noise_variance is not None:
        theta = np.r_[theta, np.log(gp.noise_variance)]
    return theta


class Strategy:
    """Base class: uniform random points until ``n_init`` observations exist."""

    kind = "base"

    def __init__(self, spec: TreeSpec, seed: int = 0, n_init: int = 2):
        self.spec = spec
        self.seed = int(seed)
        self.n_init = int(n_init)
        self.rng = np.random.default_rng(self.seed)
        self.n_observed = 0
        self.last_proposal: Proposal | None = None

    def propose(self, t: int) -> StructuredPoint:
        if self.n_observed < self.n_init:
            self.last_proposal = None
            return random_step(self.spec, self.rng)
        return self._propose(t)

    def _propose(self, t: int) -> StructuredPoint:
        raise NotImplementedError

    def observe(self, point: StructuredPoint, y: float) -> None:
        self.spec.validate(point, 1e-9)
        self.n_observed += 1
        self._observe(point, float(y))

    def _observe(self, point, y):
        pass

    def hyperparameters(self) -> dict:
        return {}


def random_step(spec: TreeSpec, rng: np.random.Generator) -> StructuredPoint:
    """One uniform random point."""
    return sample_uniform(spec, rng)


class RandomStrategy(Strategy):
    kind = "random"

    def _propose(self, t):
        return random_step(self.spec, self.rng)


class AddTreeStrategy(Strategy):
    """Add-Tree GP with per-vertex UCB maximization.

    With ``interactions=True`` the kernel gains a term for every
    ancestor/descendant pair; the acquisition then falls back to the joint
    per-path search because the model is no longer additive.
    """

    kind = "addtree"

    def __init__(self, spec, seed=0, n_init=2, *, tie=None, interactions=False,
                 ucb: UcbConfig | None = None, fit_config: FitConfig | None = None,
                 acquisition_mode: str = "additive"):
        super().__init__(spec, seed, n_init)
        if acquisition_mode not in ("additive", "joint"):
            raise ValueError(f"unknown acquisition mode {acquisition_mode!r}")
        self.tie = tie
        self.interactions = all_interactions(spec) if interactions else []
        self.ucb = ucb or UcbConfig(seed=self.seed)
        self.fit_config = fit_config
        self.mode = "joint" if self.interactions else acquisition_mode
        self.data = Dataset.empty(spec)
        self.gp: FittedGP | None = None
        self._last_point = None

    def _kernel(self):
        return build_add_tree(self.spec, interactions=self.interactions, tie=self.tie)

    def _propose(self, t):
        gp = self.gp or prior_model(self._kernel())
        step = acquisition.naive_propose if self.mode == "joint" else acquisition.propose
        self.last_proposal = step(gp, t, self.ucb, warm_start=self._last_point)
        return self.last_proposal.point

    def _observe(self, point, y):
        self.data = self.data.append(point, -y)
        self._last_point = point
        if self.n_observed >= self.n_init:
            warm = _warm_vector(self.gp) if self.gp is not None else None
            gp = _refit(self.data, self._kernel(), warm, self.seed, self.n_observed,
                        fit_config=self.fit_config)
            self.gp = gp or self.gp

    def hyperparameters(self):
        return {} if self.gp is None else self.gp.hyperparameters


class _PathModel:
    """One leaf's GP in the box of its path variables."""

    def __init__(self, spec: TreeSpec, path_index: int):
        self.path_index = path_index
        self.vertices = [v for v in spec.paths[path_index] if spec.vertices[v].dim]
        blocks = [spec.vertices[v].block for v in self.vertices]
        names = [n for b in blocks for n in b.names]
        self.slices, pos = {}, 0
        for v, b in zip(self.vertices, blocks):
            self.slices[v] = slice(pos, pos + b.dim)
            pos += b.dim
        self.dim = pos
        if self.dim:
            lows = np.concatenate([b.lows for b in blocks])
            highs = np.concatenate([b.highs for b in blocks])
            self.spec = box_spec(names, lows, highs, name=f"path{path_index}")
            self.data = Dataset.empty(self.spec)
        else:
            self.spec = None
            self.data = None
        self.gp: FittedGP | None = None
        self.y_const: list[float] = []

    def to_local(self, point: StructuredPoint) -> StructuredPoint:
        x = np.concatenate([np.asarray(point.values[v], dtype=float) for v in self.vertices])
        return StructuredPoint({}, {0: x})

    def to_global(self, full_spec: TreeSpec, x) -> StructuredPoint:
        return acquisition._assemble_point(
            full_spec, self.path_index, {v: x[sl] for v, sl in self.slices.items()}
        )


class IndependentGPStrategy(Strategy):
    """A separate GP per leaf; a leaf only ever sees its own observations."""

    kind = "independent"

    def __init__(self, spec, seed=0, n_init=2, *, ucb: UcbConfig | None = None,
                 fit_config: FitConfig | None = None):
        super().__init__(spec, seed, n_init)
        self.ucb = ucb or UcbConfig(seed=self.seed)
        self.fit_config = fit_config
        self.models = [_PathModel(spec, i) for i in range(spec.n_paths)]
        self._last_point = None

    def _propose(self, t):
        self.last_proposal = independent_propose(self, t)
        return self.last_proposal.point

    def _observe(self, point, y):
        i = self.spec.path_index(point)
        m = self.models[i]
        self._last_point = point
        if not m.dim:
            m.y_const.append(-y)
            return
        m.data = m.data.append(m.to_local(point), -y)
        if self.n_observed >= self.n_init:
            self._refit_all(self.n_observed, only=i)

    def _refit_all(self, t, only=None):
        for i, m in enumerate(self.models):
            if not m.dim or len(m.data) == 0:
                continue
            if only is not None and i != only and m.gp is not None:
                continue
            warm = _warm_vector(m.gp) if m.gp is not None else None
            gp = _refit(m.data, build_add_tree(m.spec), warm, self.seed, t, key=i + 1,
                        fit_config=self.fit_config)
            m.gp = gp or m.gp

    def hyperparameters(self):
        return {f"path{i}": m.gp.hyperparameters for i, m in enumerate(self.models)
                if m.gp is not None}


def independent_propose(state: IndependentGPStrategy, t: int) -> Proposal:
    """Plain GP-UCB on every leaf's own model; the best leaf wins.

    Leaves without a fitted model use their prior. A leaf with no
    continuous variables scores its best observed value, or zero if it has
    never been observed.
    """
    spec, cfg = state.spec, state.ucb
    # Data that arrived during the initial design is fitted lazily here.
    if any(m.dim and len(m.data) and m.gp is None for m in state.models):
        state._refit_all(t)
    points, scores = [], np.zeros(spec.n_paths)
    warm_path = spec.path_index(state._last_point) if state._last_point is not None else None
    for i, m in enumerate(state.models):
        if not m.dim:
            points.append(m.to_global(spec, np.zeros(0)))
            scores[i] = max(m.y_const) if m.y_const else 0.0
            continue
        gp = m.gp or prior_model(build_add_tree(m.spec))
        warm = m.to_local(state._last_point).values[0] if warm_path == i else None
        x, u = acquisition.optimize_vertex(gp, 0, t, cfg, warm)
        points.append(m.to_global(spec, x))
        scores[i] = u
    j = int(np.argmax(scores))
    return Proposal(points[j], j, {i: float(s) for i, s in enumerate(scores)},
                    float(scores[j]), scores, spec.n_paths)


class OneHotStrategy(Strategy):
    """A single GP over a flattened box with one-hot categorical indicators.

    Off-path continuous variables are imputed at their box midpoint when an
    observation is ingested. A proposal's relaxed indicators are rounded to
    the nearest valid pattern, i.e. the pattern of some root-to-leaf path.
    """

    kind = "onehot"

    def __init__(self, spec, seed=0, n_init=2, *, ucb: UcbConfig | None = None,
                 fit_config: FitConfig | None = None):
        super().__init__(spec, seed, n_init)
        self.ucb = ucb or UcbConfig(seed=self.seed)
        self.fit_config = fit_config
        names, lows, highs = [], [], []
        self.cont_slices, pos = {}, 0
        for v in spec.block_vertices:
            b = spec.vertices[v].block
            names.extend(b.names)
            lows.extend(b.lows)
            highs.extend(b.highs)
            self.cont_slices[v] = slice(pos, pos + b.dim)
            pos += b.dim
        self.indicator_index = {}
        for v in spec.branching_vertices:
            for label in spec.vertices[v].children:
                self.indicator_index[(v, label)] = pos
                names.append(f"__onehot[{v}={label}]")
                lows.append(0.0)
                highs.append(1.0)
                pos += 1
        self.dim = pos
        self.lows = np.array(lows)
        self.highs = np.array(highs)
        self.flat_spec = box_spec(names, self.lows, self.highs, name="onehot")
        self.patterns = np.array([self._pattern(i) for i in range(spec.n_paths)])
        self.data = Dataset.empty(self.flat_spec)
        self.gp: FittedGP | None = None

    def _pattern(self, path_index):
        z = np.zeros(len(self.indicator_index))
        base = self.dim - z.size
        path = self.spec.paths[path_index]
        for a, b in zip(path[:-1], path[1:]):
            z[self.indicator_index[(a, self.spec.vertices[b].label)] - base] = 1.0
        return z

    def encode(self, point: StructuredPoint) -> np.ndarray:
        x = 0.5 * (self.lows + self.highs)
        for v, sl in self.cont_slices.items():
            if v in point.values:
                x[sl] = point.values[v]
        i = self.spec.path_index(point)
        x[self.dim - self.patterns.shape[1]:] = self.patterns[i]
        return x

    def decode(self, x) -> tuple[StructuredPoint, int]:
        x = np.asarray(x, dtype=float)
        z = x[self.dim - self.patterns.shape[1]:]
        i = int(np.argmin(np.sum((self.patterns - z) ** 2, axis=1)))
        values = {v: np.clip(x[sl], self.lows[sl], self.highs[sl])
                  for v, sl in self.cont_slices.items()}
        return acquisition._assemble_point(self.spec, i, values), i

    def _propose(self, t):
        self.last_proposal = onehot_propose(self, t)
        return self.last_proposal.point

    def _observe(self, point, y):
        self.data = self.data.append(StructuredPoint({}, {0: self.encode(point)}), -y)
        if self.n_observed >= self.n_init:
            warm = _warm_vector(self.gp) if self.gp is not None else None
            gp = _refit(self.data, build_add_tree(self.flat_spec), warm, self.seed,
                        self.n_observed, fit_config=self.fit_config)
            self.gp = gp or self.gp

    def hyperparameters(self):
        return {} if self.gp is None else self.gp.hyperparameters


def onehot_propose(state: OneHotStrategy, t: int) -> Proposal:
    """GP-UCB over the flattened box, then projection onto a valid point."""
    gp = state.gp or prior_model(build_add_tree(state.flat_spec))
    x, u = acquisition.optimize_vertex(gp, 0, t, state.ucb)
    point, i = state.decode(x)
    scores = np.full(state.spec.n_paths, -np.inf)
    scores[i] = u
    return Proposal(point, i, {0: float(u)}, float(u), scores, 1)


STRATEGIES = {
    "addtree": AddTreeStrategy,
    "independent": IndependentGPStrategy,
    "random": RandomStrategy,
    "onehot": OneHotStrategy,
}


def make_strategy(kind: str, spec: TreeSpec, seed: int = 0, **kwargs) -> Strategy:
    """Instantiate a strategy by name (one of :data:`STRATEGIES`)."""
    try:
        cls = STRATEGIES[kind]
    except KeyError:
        raise ValueError(f"unknown strategy {kind!r}; choose from {sorted(STRATEGIES)}") from None
    return cls(spec, seed, **kwargs)
