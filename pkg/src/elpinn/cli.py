"""Command-line entry point: ``elpinn {run,compare,gradient-check,reference}``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bench
from . import classical
from . import ocp
from .losses import UnsupportedBaseline

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise bench.SpecError(message)


def _weights(text: str) -> dict:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if ":" not in item and "=" not in item:
            raise bench.SpecError(f"weight {item!r} must look like NAME:VALUE")
        k, v = item.replace("=", ":").split(":", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError:
            raise bench.SpecError(f"weight {item!r}: {v!r} is not a number") from None
    return out


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off", ""):
        return False
    raise bench.SpecError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elpinn", description="Euler-Lagrange neural solvers for optimal control")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one method on one problem")
    run.add_argument("--config", help="key = value file preloading any run flag")
    run.add_argument("--problem")
    run.add_argument("--method", choices=bench.METHODS)
    run.add_argument("--iters", "--iterations", dest="iterations", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--weights", help="fixed loss weights, e.g. L_u1:11.1,L_u2:10.1")
    run.add_argument("--out", help="root directory for run directories")
    run.add_argument("--trace-interval", type=int)
    run.add_argument("--lr-params", type=float)
    run.add_argument("--lr-s", type=float)
    run.add_argument("--omega-assignment", choices=("control", "terminal"))
    run.add_argument("--reference", help="reference CSV for problems without a closed form")
    run.add_argument("--n-colloc", type=int)
    run.add_argument("--resample", action="store_const", const=True)
    run.add_argument("--rescale-time", action="store_const", const=True)

    cmp_ = sub.add_parser("compare", help="tabulate averaged errors of finished runs")
    cmp_.add_argument("--problem", required=True)
    cmp_.add_argument("--methods", required=True, help="comma-separated method names")
    cmp_.add_argument("--seeds", default="0", help="comma-separated seeds")
    cmp_.add_argument("--out", default="runs")
    cmp_.add_argument("--run-missing", action="store_true",
                      help="run missing (problem, method, seed) combinations first")
    cmp_.add_argument("--iters", "--iterations", dest="iterations", type=int)

    gc = sub.add_parser("gradient-check", help="finite-difference checks of the autodiff stack")
    gc.add_argument("--problem", default="ex1")
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.add_argument("--seed", type=int, default=0)

    ref = sub.add_parser("reference", help="build the TPBVP reference solution")
    ref.add_argument("--problem", required=True)
    ref.add_argument("--out", help="CSV path (default runs/<problem>/reference.csv)")
    ref.add_argument("--fine-h", type=float, default=1e-4)
    return p


_SPEC_KEYS = {f for f in bench.RunSpec.__dataclass_fields__}
_CASTS = {"iterations": int, "seed": int, "trace_interval": int, "lr_params": float,
          "lr_s": float, "n_colloc": int, "resample": _bool, "rescale_time": _bool,
          "weights": _weights}


def parse_cli(args) -> bench.RunSpec:
    """Parse ``run`` arguments into a validated :class:`bench.RunSpec`."""
    ns = build_parser().parse_args(list(args))
    if ns.command != "run":
        raise bench.SpecError("parse_cli expects the 'run' subcommand")
    return _spec_from_namespace(ns)


def _spec_from_namespace(ns) -> bench.RunSpec:
    values = {}
    if ns.config:
        raw = bench.read_config(ns.config)
        unknown = sorted(set(raw) - _SPEC_KEYS)
        if unknown:
            raise bench.SpecError(f"{ns.config}: unknown keys {unknown}")
        values.update(raw)
    for key in _SPEC_KEYS:
        v = getattr(ns, key, None)
        if v is not None:
            values[key] = v
    for key, cast in _CASTS.items():
        if key in values and isinstance(values[key], str):
            try:
                values[key] = cast(values[key]) if values[key] != "" or key == "weights" else None
            except ValueError:
                raise bench.SpecError(f"{key}: cannot parse {values[key]!r}") from None
    if "problem" not in values or "method" not in values:
        raise bench.SpecError("--problem and --method are required (on the command line "
                              "or in the config file)")
    spec = bench.RunSpec(**values)
    bench.validate(spec)
    return spec


def _cmd_run(ns) -> int:
    spec = _spec_from_namespace(ns)
    outcome = bench.run_experiment(spec)
    ev = outcome.evaluation
    print(f"{spec.problem} {spec.method} seed={spec.seed}: status={outcome.status} "
          f"avg MAE={ev.avg_mae:.3e} avg RLE={ev.avg_rle:.3e} -> {outcome.run_dir}")
    if outcome.message:
        print(outcome.message, file=sys.stderr)
    return EXIT_OK if outcome.ok else EXIT_NUMERICAL


def _cmd_compare(ns) -> int:
    methods = [m.strip() for m in ns.methods.split(",") if m.strip()]
    try:
        seeds = [int(s) for s in ns.seeds.split(",") if s.strip()]
    except ValueError:
        raise bench.SpecError(f"--seeds must be integers, got {ns.seeds!r}") from None
    if ns.run_missing:
        for m in methods:
            for s in (seeds if m in bench.NETWORK_METHODS else [0]):
                spec = bench.RunSpec(problem=ns.problem, method=m, seed=s, out=ns.out,
                                     iterations=ns.iterations)
                if not (spec.run_dir / "summary.csv").exists():
                    bench.run_experiment(spec)
    try:
        table = bench.compare(ns.problem, methods, seeds, ns.out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    root = Path(ns.out) / ns.problem
    table.write_csv(root / "results.csv")
    table.write_detail_csv(root / "results_detail.csv")
    text = table.text()
    (root / "results.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_gradient_check(ns) -> int:
    report = bench.gradient_check(ns.problem, tol=ns.tol, seed=ns.seed)
    print(report.text())
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def _cmd_reference(ns) -> int:
    prob = ocp.get_problem(ns.problem)
    if prob.players != 1:
        raise bench.SpecError(f"reference needs a single-player problem; {prob.name} has "
                              f"{prob.players}")
    res = bench.build_reference(prob, fine_h=ns.fine_h)
    print(f"{prob.name}: {res.status}, terminal defect {res.terminal_defect:.3e}, "
          f"{res.iterations} Newton steps, attempt {res.attempts}")
    if res.status != "converged":
        return EXIT_NUMERICAL
    path = Path(ns.out) if ns.out else Path("runs") / prob.name / "reference.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    classical.save_reference(path, prob, res.trajectories)
    print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        handler = {"run": _cmd_run, "compare": _cmd_compare,
                   "gradient-check": _cmd_gradient_check, "reference": _cmd_reference}
        return handler[ns.command](ns)
    except (bench.SpecError, UnsupportedBaseline) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, classical.NonFiniteState) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
