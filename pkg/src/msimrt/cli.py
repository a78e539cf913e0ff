"""Command-line entry point: ``msimrt <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline as pl
from .artifacts import write_dose
from .evaluate import EvaluationReport, comparison_table
from .model import ModelError
from .sddp import StagePolicy
from .simulate import simulate, write_trace_doses, write_traces_csv

EXIT_OK, EXIT_USAGE, EXIT_SOLVER = 0, 2, 3

log = logging.getLogger("msimrt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--case", help="YAML run config or bare case spec")
    p.add_argument("--F", type=int, help="number of fractions")
    p.add_argument("--P", type=int, help="number of motion realisations")
    p.add_argument("--risk", help="E, avar:0.8, worst, E+avar:0.8 or E+worst")
    p.add_argument("--voxel-rate", type=float, dest="voxel_rate")
    p.add_argument("--n-sim", type=int, dest="n_sim")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--margin", help="planning margin in mm, or 'ptv' / 'ctv+'")
    p.add_argument("--threads", type=int)
    p.add_argument("--lp-backend", dest="lp_backend", choices=["simplex", "highs"])
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--out", default="out")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="msimrt", description="Stochastic fractionated IMRT planning with SDDP.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("generate", help="write the case geometry and nominal dose matrix")
    _common(g)
    p = sub.add_parser("plan", help="train a stochastic policy or solve the deterministic plan")
    _common(p)
    s = sub.add_parser("simulate", help="simulate a stored plan and evaluate it")
    _common(s)
    e = sub.add_parser("evaluate", help="plan, simulate and evaluate in one go")
    _common(e)
    c = sub.add_parser("compare", help="compare two evaluation reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--out", default=None)
    w = sub.add_parser("sweep", help="margin or fraction sweep")
    _common(w)
    w.add_argument("--axis", choices=["margin", "fractions"], required=True)
    w.add_argument("--values", required=True, help="comma separated list")
    return ap


def resolve_config(args) -> pl.RunConfig:
    doc = {}
    if args.case:
        if not os.path.exists(args.case):
            raise UsageError(f"case file not found: {args.case}")
        doc = pl.RunConfig.load(args.case).to_dict()
    for key in ("F", "P", "risk", "voxel_rate", "n_sim", "seed", "threads", "lp_backend", "deterministic"):
        v = getattr(args, key, None)
        if v is not None:
            doc[key] = v
    margin = getattr(args, "margin", None)
    if margin is not None:
        if margin in ("ptv", "ctv+"):
            doc["margin_mm"] = None
            if margin == "ptv":
                doc["deterministic"] = True
        else:
            try:
                doc["margin_mm"] = float(margin)
            except ValueError:
                raise UsageError(f"bad margin {margin!r}") from None
    if getattr(args, "max_iters", None) is not None:
        doc.setdefault("sddp", dict(pl.RunConfig().sddp))["max_iters"] = args.max_iters
    try:
        return pl.RunConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _run_dir(cfg: pl.RunConfig, root: str) -> str:
    return os.path.join(root, cfg.case.name, cfg.model_id)


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    case = pl.prepare_case(cfg)
    base = os.path.join(args.out, cfg.case.name)
    os.makedirs(base, exist_ok=True)
    from .phantom import nominal_dose_matrix

    write_dose(os.path.join(base, "nominal.dose"),
               nominal_dose_matrix(case.grid, case.tissues, case.beamlets, cfg.case.kernel).matrix)
    with open(os.path.join(base, "tissues.json"), "w") as fh:
        json.dump({t.name: {"kind": t.kind, "voxels": t.voxels.tolist(), "t_min": t.t_min, "t_max": t.t_max}
                   for t in case.tissues}, fh)
        fh.write("\n")
    cfg.save(os.path.join(base, "config.yaml"))
    print(base)
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = resolve_config(args)
    case = pl.prepare_case(cfg)
    base = _run_dir(cfg, args.out)
    os.makedirs(os.path.join(base, "policy"), exist_ok=True)
    cfg.save(os.path.join(base, "config.yaml"))
    if cfg.deterministic:
        x, _ = pl.deterministic_plan(cfg, case)
        with open(os.path.join(base, "policy", "plan.json"), "w") as fh:
            json.dump({"x": x.tolist()}, fh)
            fh.write("\n")
    else:
        policy, rep = pl.train_policy(cfg, case, log=log.info)
        policy.save(os.path.join(base, "policy", "policy.json"))
        with open(os.path.join(base, "policy", "train_report.json"), "w") as fh:
            json.dump(rep.to_dict(), fh, indent=1)
            fh.write("\n")
    print(base)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    base = _run_dir(cfg, args.out)
    case = pl.prepare_case(cfg)
    seed = pl.derive_seed(cfg.seed, pl.STREAM_SIM)
    if cfg.deterministic:
        path = os.path.join(base, "policy", "plan.json")
        if not os.path.exists(path):
            raise UsageError(f"missing plan file {path}")
        with open(path) as fh:
            import numpy as np

            x = np.asarray(json.load(fh)["x"], dtype=float)
        if x.shape[0] != cfg.F:
            raise UsageError("stored plan does not match the configured number of fractions")
        from .simulate import replay_deterministic

        traces = replay_deterministic(x, case.scen.probabilities, cfg.n_sim, seed, case.bank,
                                      None, cfg.out_of_sample, case.scen)
    else:
        path = os.path.join(base, "policy", "policy.json")
        if not os.path.exists(path):
            raise UsageError(f"missing policy file {path}")
        data = pl.stochastic_data(cfg, case)
        try:
            policy = StagePolicy.load(path, data, pl.get_solver(cfg.lp_backend, cfg.threads))
        except (ValueError, KeyError) as exc:
            raise UsageError(f"policy does not match the case: {exc}") from None
        traces = simulate(policy, cfg.n_sim, seed, case.bank, cfg.out_of_sample, case.scen)
    _write_results(cfg, base, traces, case)
    print(base)
    return EXIT_OK


def _write_results(cfg, base, traces, case) -> None:
    from .evaluate import evaluate

    for sub in ("traces", "reports"):
        os.makedirs(os.path.join(base, sub), exist_ok=True)
    write_traces_csv(traces, os.path.join(base, "traces", "traces.csv"))
    write_trace_doses(traces, case.bank, os.path.join(base, "traces", "doses.dose"))
    report = evaluate(traces, case.bank, cfg.case.name, cfg.model_id, cfg.seed)
    report.provenance.update(pl._provenance(cfg, None))
    report.save(os.path.join(base, "reports", "report.json"))
    with open(os.path.join(base, "reports", "report.txt"), "w") as fh:
        fh.write(report.table())
    report.write_dvh(os.path.join(base, "reports"))


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    result = pl.run(cfg, log=log.info)
    print(pl.write_run(result, args.out))
    return EXIT_OK


def cmd_compare(args) -> int:
    for p in (args.report_a, args.report_b):
        if not os.path.exists(p):
            raise UsageError(f"report not found: {p}")
    try:
        a, b = EvaluationReport.load(args.report_a), EvaluationReport.load(args.report_b)
        text = comparison_table(a, b)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    values = [v for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("empty axis list")
    try:
        nums = [float(v) for v in values]
    except ValueError:
        raise UsageError(f"bad axis values {args.values!r}") from None
    if args.axis == "margin":
        reports = pl.margin_sweep(cfg, nums, log=log.info)
    else:
        if any(v < 1 or v != int(v) for v in nums):
            raise UsageError("fractions must be positive integers")
        reports = pl.fraction_sweep(cfg, [int(v) for v in nums], log=log.info)
    text = pl.sweep_table(reports)
    base = os.path.join(args.out, cfg.case.name)
    os.makedirs(base, exist_ok=True)
    with open(os.path.join(base, f"sweep_{args.axis}.tsv"), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "plan": cmd_plan, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
            "compare": cmd_compare, "sweep": cmd_sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"msimrt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"msimrt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        print(f"msimrt: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
