"""Benchmark objectives, experiment loops, statistics and report files."""

from __future__ import annotations

import csv
import functools
import logging
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .baselines import make_strategy
from .estimator import AddTreeRegressor, IndependentGPRegressor
from .space import StructuredPoint, TreeSpec, parse_spec, sample_uniform

__all__ = [
    "BUILTINS",
    "Builtin",
    "BOTrace",
    "ExperimentSummary",
    "RegressionTable",
    "RunAborted",
    "ExperimentAborted",
    "load_builtin_spec",
    "jenatton_eval",
    "example_tree_eval",
    "run_bo",
    "run_bo_experiment",
    "summarize",
    "run_regression_experiment",
    "wilcoxon_one_sided",
    "write_trace_csv",
    "write_summary_csv",
    "read_external_trace",
    "plot_convergence",
    "REGRET_FLOOR",
]

logger = logging.getLogger(__name__)

REGRET_FLOOR = 1e-12
TRACE_HEADER = ["iter", "proposed_y", "best_so_far", "path", "seed", "strategy"]
SUMMARY_HEADER = ["iter", "mean_log10_regret", "two_std"]


# -- objectives ---------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def load_builtin_spec(name: str) -> TreeSpec:
    """A space shipped with the package: ``jenatton``, ``example`` or ``compression``."""
    source = resources.files("addtree").joinpath("data", f"{name}.json")
    if not source.is_file():
        raise KeyError(name)
    return parse_spec(source.read_text())


# leaf variable -> (offset, shared variable)
_JENATTON_LEAVES = {"x4": (0.1, "r8"), "x5": (0.2, "r8"), "x6": (0.3, "r9"), "x7": (0.4, "r9")}


def jenatton_eval(p: StructuredPoint, spec: TreeSpec | None = None, noise_std: float = 0.0,
                  rng: np.random.Generator | None = None) -> float:
    """Synthetic tree function with four leaves and global minimum 0.1.

    The value at a leaf is ``x_leaf**2 + offset + r``, where ``r`` is the
    variable shared by the two leaves under the same parent. Optional
    Gaussian noise with standard deviation ``noise_std`` is added.
    """
    spec = spec or load_builtin_spec("jenatton")
    params = spec.to_params(p)
    leaf = [n for n in params if n in _JENATTON_LEAVES]
    if len(leaf) != 1:
        raise ValueError(f"point does not select exactly one leaf: {sorted(params)}")
    offset, shared = _JENATTON_LEAVES[leaf[0]]
    value = params[leaf[0]] ** 2 + offset + params[shared]
    if noise_std:
        value += float((rng or np.random.default_rng()).normal(0.0, noise_std))
    return float(value)


def example_tree_eval(p: StructuredPoint, spec: TreeSpec | None = None) -> float:
    """Sum of squares of every active variable; minimum 0 on both branches."""
    return float(sum(np.sum(np.square(v)) for v in p.values.values()))


@dataclass(frozen=True)
class Builtin:
    spec_name: str
    evaluate: Callable
    f_min: float | None


BUILTINS = {
    "jenatton": Builtin("jenatton", jenatton_eval, 0.1),
    "example": Builtin("example", example_tree_eval, 0.0),
}


# -- optimization runs ----------------------------------------------------------


@dataclass
class BOTrace:
    """One optimization run. ``best`` is the running minimum of ``y``."""

    strategy: str
    seed: int
    points: list = field(default_factory=list)
    y: list = field(default_factory=list)
    best: list = field(default_factory=list)
    paths: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    hyperparameters: dict = field(default_factory=dict)
    error: str | None = None

    def __len__(self):
        return len(self.y)

    def record(self, point, y, path_labels, wall):
        self.points.append(point)
        self.y.append(float(y))
        self.best.append(min(self.best[-1], float(y)) if self.best else float(y))
        self.paths.append("/".join(path_labels))
        self.wall.append(float(wall))

    def regret(self, f_min: float) -> np.ndarray:
        return np.asarray(self.best) - f_min


class RunAborted(RuntimeError):
    """The objective failed; ``trace`` holds the iterations completed so far."""

    def __init__(self, message, trace: BOTrace):
        super().__init__(message)
        self.trace = trace


class ExperimentAborted(RuntimeError):
    """At least one repetition aborted. ``traces`` includes partial ones."""

    def __init__(self, message, traces):
        super().__init__(message)
        self.traces = traces


def run_bo(objective: Callable, spec: TreeSpec, kind: str, iters: int, seed: int = 0,
           **strategy_kwargs) -> BOTrace:
    """Minimize ``objective`` for ``iters`` evaluations with one strategy."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    strategy = make_strategy(kind, spec, seed, **strategy_kwargs)
    trace = BOTrace(kind, seed)
    for t in range(1, iters + 1):
        t0 = time.perf_counter()
        point = strategy.propose(t)
        try:
            y = float(objective(point))
        except Exception as exc:
            trace.error = f"iteration {t}: {exc}"
            trace.hyperparameters = strategy.hyperparameters()
            raise RunAborted(trace.error, trace) from exc
        if not math.isfinite(y):
            trace.error = f"iteration {t}: objective returned {y}"
            raise RunAborted(trace.error, trace)
        strategy.observe(point, y)
        trace.record(point, y, spec.path_labels(spec.path_index(point)),
                     time.perf_counter() - t0)
    trace.hyperparameters = strategy.hyperparameters()
    return trace


@dataclass(frozen=True)
class ExperimentSummary:
    """Per-iteration statistics over repetitions.

    When the minimum is known the statistic is ``log10(max(regret, floor))``;
    otherwise it is the raw incumbent value.
    """

    iters: np.ndarray
    mean: np.ndarray
    two_std: np.ndarray
    median: np.ndarray
    reps: int
    strategy: str
    log_regret: bool

    def at(self, t: int) -> tuple[float, float]:
        """Mean and median at iteration ``t`` (1-based)."""
        return float(self.mean[t - 1]), float(self.median[t - 1])


def summarize(traces: Sequence[BOTrace], f_min: float | None) -> ExperimentSummary:
    if not traces:
        raise ValueError("no traces to summarize")
    length = min(len(t) for t in traces)
    # Seed order fixes the summation order, so results do not depend on input order.
    ordered = sorted(traces, key=lambda t: t.seed)
    best = np.array([t.best[:length] for t in ordered])
    if f_min is not None:
        stat = np.log10(np.maximum(best - f_min, REGRET_FLOOR))
    else:
        stat = best
    return ExperimentSummary(
        iters=np.arange(1, length + 1),
        mean=stat.mean(axis=0),
        two_std=2.0 * stat.std(axis=0),
        median=np.median(stat, axis=0),
        reps=len(traces),
        strategy=traces[0].strategy,
        log_regret=f_min is not None,
    )


def _one_rep(objective, spec, kind, iters, seed, strategy_kwargs):
    try:
        return run_bo(objective, spec, kind, iters, seed, **strategy_kwargs)
    except RunAborted as exc:
        return exc.trace


def run_bo_experiment(objective: Callable, spec: TreeSpec, kind: str, iters: int = 80,
                      reps: int = 10, seed: int = 0, seeds: Sequence[int] | None = None,
                      f_min: float | None = None, n_jobs: int = 1, **strategy_kwargs):
    """Repeat :func:`run_bo` over seeds and summarize.

    Seeds default to ``seed, seed + 1, ...``. Repetitions are independent
    and run in parallel when ``n_jobs != 1``.

    Returns
    -------
    traces : list of BOTrace
    summary : ExperimentSummary

    Raises
    ------
    ExperimentAborted
        If any repetition's objective failed; partial traces are attached.
    """
    seeds = list(seeds) if seeds is not None else [seed + r for r in range(reps)]
    if len(seeds) < 1:
        raise ValueError("need at least one repetition")
    args = [(objective, spec, kind, iters, s, strategy_kwargs) for s in seeds]
    if n_jobs == 1:
        traces = [_one_rep(*a) for a in args]
    else:
        from joblib import Parallel, delayed

        traces = Parallel(n_jobs=n_jobs)(delayed(_one_rep)(*a) for a in args)
    failed = [t for t in traces if t.error is not None]
    if failed:
        raise ExperimentAborted(
            f"{len(failed)} of {len(traces)} runs aborted; first: seed {failed[0].seed}, "
            f"{failed[0].error}", traces)
    return traces, summarize(traces, f_min)


# -- regression ---------------------------------------------------------------------


@dataclass
class RegressionTable:
    """log10 test MSE per (model, train size), one value per repetition."""

    train_sizes: tuple
    log10_mse: dict
    failures: dict

    def mean(self, model: str, n: int) -> float:
        return float(np.nanmean(self.log10_mse[model, n]))

    def two_std(self, model: str, n: int) -> float:
        return float(2.0 * np.nanstd(self.log10_mse[model, n]))

    def ratio(self, n: int, num="independent", den="addtree") -> float:
        """Ratio of geometric-mean MSEs, ``num`` over ``den``."""
        return float(10.0 ** (self.mean(num, n) - self.mean(den, n)))


def run_regression_experiment(spec: TreeSpec | None = None, objective: Callable | None = None,
                              train_sizes=(20, 24, 32), test_size: int = 50, reps: int = 10,
                              seed: int = 0, tie="depth", n_restarts: int = 5) -> RegressionTable:
    """Compare Add-Tree with independent per-leaf GPs on random designs.

    Each repetition draws a uniform training set and then a uniform test set
    from one generator seeded with ``seed + rep``.
    """
    spec = spec or load_builtin_spec("jenatton")
    if objective is None:
        objective = functools.partial(jenatton_eval, spec=spec)
    models = {
        "addtree": lambda s: AddTreeRegressor(spec, tie=tie, n_restarts=n_restarts,
                                              random_state=s),
        "independent": lambda s: IndependentGPRegressor(spec, n_restarts=n_restarts,
                                                        random_state=s),
    }
    table = {(m, n): np.full(reps, np.nan) for m in models for n in train_sizes}
    failures = {}
    for n in train_sizes:
        for rep in range(reps):
            rng = np.random.default_rng(seed + rep)
            X = [sample_uniform(spec, rng) for _ in range(n)]
            X_test = [sample_uniform(spec, rng) for _ in range(test_size)]
            y = np.array([objective(p) for p in X])
            y_test = np.array([objective(p) for p in X_test])
            for name, make in models.items():
                try:
                    pred = make(seed + rep).fit(X, y).predict(X_test)
                    table[name, n][rep] = np.log10(np.mean((pred - y_test) ** 2))
                except (np.linalg.LinAlgError, ValueError) as exc:
                    failures[name, n, rep] = str(exc)
                    logger.warning("regression fit failed (%s, n=%d, rep=%d): %s",
                                   name, n, rep, exc)
    return RegressionTable(tuple(train_sizes), table, failures)


# -- Wilcoxon signed-rank -------------------------------------------------------------


def _exact_upper_tail(doubled_ranks: np.ndarray, w2: int) -> float:
    """P(W+ >= w) under random signs; ranks and ``w`` are doubled integers."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks:
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    return float(counts[w2:].sum() / 2.0 ** doubled_ranks.size)


def wilcoxon_one_sided(a, b, exact_max_n: int = 20) -> float:
    """One-sided signed-rank test that ``a`` tends to exceed ``b``.

    Zero differences are dropped, tied magnitudes get average ranks. The
    null distribution is enumerated exactly for up to ``exact_max_n``
    nonzero differences; above that a normal approximation with continuity
    and tie corrections is used. Returns NaN when every difference is zero.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("a and b must be 1-D with equal length")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return float("nan")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        return _exact_upper_tail(doubled, int(round(2 * w_plus)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return float(0.5 * special.erfc(z / math.sqrt(2.0)))


# -- report files -------------------------------------------------------------------------


def write_trace_csv(trace: BOTrace, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for t, (y, best, p) in enumerate(zip(trace.y, trace.best, trace.paths), start=1):
            w.writerow([t, repr(y), repr(best), p, trace.seed, trace.strategy])
    return path


def write_summary_csv(summary: ExperimentSummary, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for t, m, s in zip(summary.iters, summary.mean, summary.two_std):
            w.writerow([int(t), repr(float(m)), repr(float(s))])
    return path


def read_external_trace(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ``iteration,best_value`` CSV produced by another optimizer."""
    its, vals = [], []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"iteration", "best_value"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns iteration,best_value")
        for row in reader:
            its.append(int(row["iteration"]))
            vals.append(float(row["best_value"]))
    return np.array(its), np.array(vals)


def plot_convergence(summaries: dict, path, external: dict | None = None,
                     f_min: float | None = None, title: str | None = None) -> Path:
    """Mean curve with a two-standard-deviation band per strategy, as SVG.

    ``external`` maps a label to a list of ``(iterations, best_values)``
    runs; they are summarized the same way and drawn dashed.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    with matplotlib.rc_context({"svg.hashsalt": "addtree", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, s in summaries.items():
            line, = ax.plot(s.iters, s.mean, label=label)
            ax.fill_between(s.iters, s.mean - s.two_std, s.mean + s.two_std,
                            color=line.get_color(), alpha=0.2, linewidth=0)
        for label, runs in (external or {}).items():
            length = min(len(v) for _, v in runs)
            vals = np.array([np.minimum.accumulate(v[:length]) for _, v in runs])
            if f_min is not None:
                vals = np.log10(np.maximum(vals - f_min, REGRET_FLOOR))
            it = np.asarray(runs[0][0][:length])
            m, sd = vals.mean(axis=0), 2.0 * vals.std(axis=0)
            line, = ax.plot(it, m, linestyle="--", label=label)
            ax.fill_between(it, m - sd, m + sd, color=line.get_color(), alpha=0.15, linewidth=0)
        ax.set_xlabel("iteration")
        ax.set_ylabel("log10 regret" if f_min is not None else "best value")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
