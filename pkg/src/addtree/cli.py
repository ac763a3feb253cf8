"""Command-line interface.

``addtree run``
    Optimize a built-in or external objective and write per-run traces, a
    summary, a convergence plot and a manifest. ``addtree run --manifest
    FILE`` repeats a recorded run exactly.
``addtree regress``
    Compare Add-Tree against independent per-leaf GPs in regression.

Exit status: 0 on success, 2 for a bad spec or objective selector, 3 when
the objective fails, 4 when outputs cannot be written. Set ``ADDTREE_LOG``
to a logging level name (e.g. ``INFO``) for progress messages.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .baselines import STRATEGIES
from .bench import (
    BUILTINS,
    ExperimentAborted,
    load_builtin_spec,
    plot_convergence,
    read_external_trace,
    run_bo_experiment,
    run_regression_experiment,
    summarize,
    write_summary_csv,
    write_trace_csv,
)
from .objective import ExternalObjective
from .space import SpecError, parse_spec, spec_to_dict

logger = logging.getLogger("addtree")

EXIT_SPEC, EXIT_OBJECTIVE, EXIT_WRITE = 2, 3, 4


class CliError(Exception):
    def __init__(self, message, status):
        super().__init__(message)
        self.status = status


def _spec_text(args):
    """The spec document as text, from a file or from the built-in objective."""
    if args.spec:
        try:
            return Path(args.spec).read_text()
        except OSError as exc:
            raise CliError(f"cannot read spec {args.spec}: {exc}", EXIT_SPEC) from None
    if args.objective.startswith("builtin:"):
        name = _builtin_name(args.objective)
        return json.dumps(spec_to_dict(load_builtin_spec(BUILTINS[name].spec_name)))
    raise CliError("--spec is required with an external objective", EXIT_SPEC)


def _builtin_name(selector):
    name = selector.split(":", 1)[1]
    if name not in BUILTINS:
        raise CliError(f"unknown builtin objective {name!r}; valid: "
                       + ", ".join(f"builtin:{n}" for n in sorted(BUILTINS)), EXIT_SPEC)
    return name


def _objective(args, spec):
    """Return ``(callable, f_min)`` for the selector."""
    sel = args.objective
    if sel.startswith("builtin:"):
        b = BUILTINS[_builtin_name(sel)]
        builtin_spec = load_builtin_spec(b.spec_name)
        if spec != builtin_spec:
            raise CliError(f"builtin:{b.spec_name} needs its own space; omit --spec or pass "
                           f"a matching one", EXIT_SPEC)
        if b.spec_name == "jenatton" and args.noise:
            return _NoisyJenatton(args.noise, args.seed), b.f_min
        return b.evaluate, b.f_min
    if sel.startswith("cmd:"):
        return ExternalObjective(sel[4:], spec, timeout=args.timeout), args.f_min
    raise CliError(f"objective must be builtin:NAME or cmd:COMMAND, got {sel!r}", EXIT_SPEC)


class _NoisyJenatton:
    """Jenatton objective with Gaussian noise from a seeded stream."""

    def __init__(self, noise, seed):
        import numpy as np

        self.noise = float(noise)
        self.rng = np.random.default_rng([int(seed), 1])

    def __call__(self, point):
        from .bench import jenatton_eval

        return jenatton_eval(point, noise_std=self.noise, rng=self.rng)


RUN_KEYS = ("objective", "algo", "iters", "reps", "seed", "noise", "interactions", "timeout",
            "tie", "f_min", "n_init", "n_jobs")


def _write_outputs(out: Path, traces, f_min, config, spec_text, overlays):
    try:
        out.mkdir(parents=True, exist_ok=True)
        for tr in traces:
            write_trace_csv(tr, out / f"trace_{tr.strategy}_seed{tr.seed}.csv")
        complete = [t for t in traces if t.error is None and len(t)]
        if complete:
            summary = summarize(complete, f_min)
            write_summary_csv(summary, out / f"summary_{summary.strategy}.csv")
            external = {label: [read_external_trace(p) for p in paths]
                        for label, paths in overlays.items()}
            plot_convergence({summary.strategy: summary}, out / "convergence.svg",
                             external=external, f_min=f_min)
        manifest = {
            "version": __version__,
            "command": "run",
            "config": config,
            "seeds": [t.seed for t in traces],
            "spec": json.loads(spec_text),
            "spec_sha256": hashlib.sha256(spec_text.encode()).hexdigest(),
            "hyperparameters": {str(t.seed): t.hyperparameters for t in traces},
            "errors": {str(t.seed): t.error for t in traces if t.error},
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise CliError(f"cannot write outputs to {out}: {exc}", EXIT_WRITE) from None


def _parse_overlays(items):
    overlays = {}
    for item in items or ():
        label, sep, path = item.partition("=")
        if not sep:
            raise CliError(f"--overlay expects LABEL=FILE, got {item!r}", EXIT_SPEC)
        overlays.setdefault(label, []).append(path)
    return overlays


def cmd_run(args) -> int:
    if args.manifest:
        try:
            manifest = json.loads(Path(args.manifest).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read manifest {args.manifest}: {exc}", EXIT_SPEC) from None
        for k in RUN_KEYS:
            setattr(args, k, manifest["config"][k])
        spec_text = json.dumps(manifest["spec"], sort_keys=True)
        if hashlib.sha256(spec_text.encode()).hexdigest() != manifest["spec_sha256"]:
            raise CliError("manifest spec does not match its recorded hash", EXIT_SPEC)
        args.spec = None
    else:
        spec_text = _spec_text(args)
    if args.iters < 1 or args.reps < 1:
        raise CliError("--iters and --reps must be at least 1", EXIT_SPEC)
    try:
        spec = parse_spec(spec_text)
    except (SpecError, ValueError) as exc:
        raise CliError(f"invalid spec: {exc}", EXIT_SPEC) from None
    # Normalize so that manifests written from a file and from a rerun agree.
    spec_text = json.dumps(spec_to_dict(spec), sort_keys=True)
    objective, f_min = _objective(args, spec)
    config = {k: getattr(args, k) for k in RUN_KEYS}
    kwargs = {"n_init": args.n_init}
    if args.algo == "addtree":
        kwargs.update(tie=args.tie, interactions=args.interactions)
    elif args.interactions or args.tie:
        logger.warning("--interactions/--tie only apply to --algo addtree")
    out = Path(args.out)
    status = 0
    try:
        traces, _ = run_bo_experiment(objective, spec, args.algo, iters=args.iters,
                                      reps=args.reps, seed=args.seed, f_min=f_min,
                                      n_jobs=args.n_jobs, **kwargs)
    except ExperimentAborted as exc:
        print(f"objective failed: {exc}", file=sys.stderr)
        traces, status = exc.traces, EXIT_OBJECTIVE
    finally:
        if isinstance(objective, ExternalObjective):
            objective.close()
    _write_outputs(out, traces, f_min, config, spec_text, _parse_overlays(args.overlay))
    if status == 0:
        best = min(min(t.best) for t in traces)
        print(f"{args.algo}: {len(traces)} runs x {args.iters} iterations, best {best:.6g}; "
              f"outputs in {out}")
    return status


def cmd_regress(args) -> int:
    if args.spec:
        raise CliError("regress only supports the built-in jenatton space", EXIT_SPEC)
    table = run_regression_experiment(train_sizes=tuple(args.sizes), test_size=args.test_size,
                                      reps=args.reps, seed=args.seed,
                                      tie=None if args.tie == "none" else args.tie)
    lines = ["model,n_train,mean_log10_mse,two_std"]
    for n in table.train_sizes:
        for m in ("addtree", "independent"):
            lines.append(f"{m},{n},{table.mean(m, n)!r},{table.two_std(m, n)!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "regression.csv").write_text(text)
        except OSError as exc:
            raise CliError(f"cannot write outputs to {args.out}: {exc}", EXIT_WRITE) from None
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="addtree", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an optimization experiment")
    run.add_argument("--spec", help="tree spec JSON file (defaults to the builtin's space)")
    run.add_argument("--objective", default="builtin:jenatton",
                     help="builtin:NAME or cmd:COMMAND (line protocol on stdin/stdout)")
    run.add_argument("--algo", choices=sorted(STRATEGIES), default="addtree")
    run.add_argument("--iters", type=int, default=80)
    run.add_argument("--reps", type=int, default=10)
    run.add_argument("--seed", type=int, default=0, help="seed of the first repetition")
    run.add_argument("--out", default="addtree-out", help="output directory")
    run.add_argument("--noise", type=float, default=0.0,
                     help="observation noise std for builtin:jenatton")
    run.add_argument("--interactions", action="store_true",
                     help="add ancestor/descendant interaction terms to the kernel")
    run.add_argument("--tie", choices=["depth", "all"], default=None,
                     help="share kernel parameters between vertices")
    run.add_argument("--n-init", type=int, default=2, help="random points before the first fit")
    run.add_argument("--timeout", type=float, default=600.0,
                     help="seconds per external evaluation")
    run.add_argument("--f-min", type=float, default=None,
                     help="known minimum of an external objective, for regret")
    run.add_argument("--overlay", action="append", metavar="LABEL=FILE",
                     help="external iteration,best_value CSV to draw on the plot (repeatable)")
    run.add_argument("--n-jobs", type=int, default=1, help="parallel repetitions")
    run.add_argument("--manifest", help="repeat the run recorded in this manifest")
    run.set_defaults(func=cmd_run)

    reg = sub.add_parser("regress", help="regression comparison on the synthetic function")
    reg.add_argument("--spec", help=argparse.SUPPRESS)
    reg.add_argument("--sizes", type=int, nargs="+", default=[20, 24, 32])
    reg.add_argument("--test-size", type=int, default=50)
    reg.add_argument("--reps", type=int, default=10)
    reg.add_argument("--seed", type=int, default=0)
    reg.add_argument("--tie", choices=["none", "depth", "all"], default="depth")
    reg.add_argument("--out", help="directory for regression.csv")
    reg.set_defaults(func=cmd_regress)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("ADDTREE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"addtree: {exc}", file=sys.stderr)
        return exc.status


if __name__ == "__main__":
    sys.exit(main())
