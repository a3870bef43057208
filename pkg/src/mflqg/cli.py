"""Command-line entry point: ``mflqg <subcommand> --scenario FILE [options]``.

Exit codes: 0 success, 1 usage or I/O error, 2 failed assumption check,
3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .model import ModelError, load_scenario, validate_assumptions

EXIT_OK, EXIT_USAGE, EXIT_ASSUMPTION, EXIT_SOLVER = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text: str):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated integer list: {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mflqg", description="Major/minor mean-field LQG solver and experiments")
    p.add_argument("--version", action="version", version=f"mflqg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--scenario", required=True, help="scenario JSON file")
        sp.add_argument("--steps", type=int, default=2000, help="grid override (default 2000)")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--paths", type=int, default=1000)
        sp.add_argument("--tol", type=float, default=1e-10)
        sp.add_argument("--max-iter", type=int, default=200)
        sp.add_argument("--N", type=int, default=8)
        sp.add_argument("--Ns", type=_int_list, default=[8, 16, 32, 64, 128, 256])
        sp.add_argument("--include-eta", action="store_true",
                        help="add the common-noise integrand of the minor feedforward to its control")
        return sp

    c = common(sub.add_parser("check", help="assumption and contraction report"))
    c.add_argument("--require-h3", action="store_true", help="treat a failed contraction inequality as failure")
    common(sub.add_parser("riccati", help="solve both Riccati equations"))
    c = common(sub.add_parser("cc", help="decoupling field and Picard iteration"))
    c.add_argument("--coupling-scale", type=float, default=1.0,
                   help="multiply the coupling blocks before solving")
    c = common(sub.add_parser("simulate", help="population run and costs"))
    c.add_argument("--export-paths", type=int, default=5, help="paths written to the trajectory CSV")
    common(sub.add_parser("oracle", help="stacked social-cost oracle comparison"))
    c = common(sub.add_parser("sweep", help="convergence tables and slope fits"))
    c.add_argument("--functionals", default="lemma2,lemma4,major_gap",
                   help="comma list among lemma2,lemma3,lemma4,major_gap,social_gap")
    common(sub.add_parser("h4", help="adjoint representation and BSDE averaging tables"))
    return p


def _manifest(args, model) -> dict:
    scen = Path(args.scenario)
    digest = hashlib.sha256(scen.read_bytes()).hexdigest()
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("command",)}
    return {
        "tool": "mflqg", "version": __version__, "subcommand": args.command,
        "scenario": str(scen), "scenario_sha256": digest, "seed": args.seed,
        "grid": {"T": model.grid.T, "steps": model.grid.steps}, "flags": flags,
    }


def _emit(out: Path | None, name: str, payload: dict) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True, default=_json_default)
    print(text)
    if out is not None:
        (out / name).write_text(text + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o).__name__)


def _cmd_check(args, model, out):
    from .ccfield import assemble_stacked, contraction_report
    from .riccati import RiccatiError, solve_major_riccati, solve_minor_riccati
    rep = validate_assumptions(model)
    payload = {"assumptions": rep.as_dict()}
    try:
        cc = assemble_stacked(model, solve_major_riccati(model), solve_minor_riccati(model),
                              include_eta=args.include_eta)
        payload["contraction"] = contraction_report(cc).as_dict()
    except RiccatiError as exc:
        payload["contraction"] = {"error": str(exc)}
    _emit(out, "check.json", payload)
    ok = rep.h1_ok and rep.h2_ok and rep.sa_ok and (rep.h3_ok or not args.require_h3)
    return EXIT_OK if ok else EXIT_ASSUMPTION


def _cmd_riccati(args, model, out):
    from .riccati import solve_major_riccati, solve_minor_riccati
    p0 = solve_major_riccati(model)
    p = solve_minor_riccati(model)
    if out is not None:
        p0.to_csv(out / "riccati_P0.csv")
        p.to_csv(out / "riccati_P.csv")
    _emit(out, "riccati.json", {"P0_at_0": p0.P[0], "P_at_0": p.P[0],
                                "Theta1_at_0": p0.gain[0], "Lambda1_at_0": p.gain[0]})
    return EXIT_OK


def _cmd_cc(args, model, out):
    from .ccfield import (CCError, PicardDivergence, assemble_stacked, contraction_report,
                          picard_rate, solve_cc_decoupling, solve_cc_picard)
    from .riccati import RiccatiError, solve_major_riccati, solve_minor_riccati
    cc = assemble_stacked(model, solve_major_riccati(model), solve_minor_riccati(model),
                          include_eta=args.include_eta)
    if args.coupling_scale != 1.0:
        cc = cc.scaled(args.coupling_scale)
    dec, dec_error = None, None
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            dec = solve_cc_decoupling(cc)
    except (RiccatiError, CCError) as exc:
        dec_error = str(exc)
    try:
        pic, log = solve_cc_picard(cc, tol=args.tol, max_iter=args.max_iter)
    except PicardDivergence as exc:
        print(json.dumps({"error": str(exc), "last_factor": exc.last_factor,
                          "iterations": len(exc.iterations), "decoupling_error": dec_error},
                         default=_json_default), file=sys.stderr)
        return EXIT_SOLVER
    if dec is None:
        print(json.dumps({"error": f"decoupling failed: {dec_error}"}), file=sys.stderr)
        return EXIT_SOLVER
    rate = picard_rate(log)
    if out is not None:
        dec.to_csv(out / "cc_field")
        with open(out / "cc_picard_log.csv", "w") as fh:
            fh.write("iteration,change,factor\n")
            for r in log:
                fh.write(f"{r['iteration']},{r['change']!r},{r['factor']!r}\n")
    _emit(out, "cc_summary.json", {
        "decoupling_residual": dec.residual, "kcond_gap": dec.kcond_gap, "flags": dec.flags,
        "picard_iterations": len(log), "picard_rate": rate, "picard_residual": pic.residual,
        "sup_distance": dec.sup_distance(pic),
        "contraction": contraction_report(cc, picard_rate=rate).as_dict(),
    })
    return EXIT_OK


def _cmd_simulate(args, model, out):
    from .population import evaluate_costs, simulate_population, write_trajectories_csv
    from .verify import prepare
    b = prepare(model, include_eta=args.include_eta)
    prof, _ = b.sample(args.seed, 0, args.paths)
    run = simulate_population(model, prof, args.N, args.paths, args.seed,
                              store_agents=True, store_controls=True)
    rep = evaluate_costs(run, model)
    if out is not None:
        k = min(args.export_paths, args.paths)
        sub = type(run)(run.N, run.seed, run.path_start, run.x0[:k], run.xbar[:k], run.J0_path[:k],
                        run.Ji_path[:k], run.x[:k], run.u0[:k], run.u[:k])
        write_trajectories_csv(out / "simulate_trajectories.csv", sub, model)
        (out / "simulate_costs.json").write_text(rep.to_json() + "\n")
    print(rep.to_json())
    return EXIT_OK


def _cmd_oracle(args, model, out):
    from .population import build_social_oracle, simulate_population
    from .verify import prepare
    b = prepare(model, include_eta=args.include_eta)
    oracle = build_social_oracle(model, args.N)
    prof, _ = b.sample(args.seed, 0, args.paths)
    run = simulate_population(model, prof, args.N, args.paths, args.seed,
                              store_agents=False, store_controls=False)
    w = model.grid.trapezoid_weights()
    stacked, states = oracle.simulate(prof, args.paths, args.seed, dt=model.grid.dt, weights=w)
    summed = run.Ji_path.sum(axis=1)
    printed = np.zeros(args.paths)
    for k in range(states.shape[1]):
        x = states[:, k]
        printed += 0.5 * w[k] * np.einsum("pi,ij,pj->p", x, oracle.Q_printed[k] - oracle.Q[k], x)
    printed += stacked
    js, jo, jp = float(summed.mean()), float(stacked.mean()), float(printed.mean())
    _emit(out, "oracle_summary.json", {
        "N": args.N, "paths": args.paths, "Jsoc_summed": js, "Jsoc_stacked": jo,
        "relative_difference": abs(jo - js) / max(abs(js), 1e-300),
        "Jsoc_stacked_printed_weight": jp,
        "printed_weight_relative_difference": abs(jp - js) / max(abs(js), 1e-300),
        "printed_weight_max_block_discrepancy": oracle.q_discrepancy(),
    })
    return EXIT_OK


def _cmd_sweep(args, model, out):
    from .verify import FUNCTIONALS, fit_slope, prepare, summary_json, sweep_population
    names = [f.strip() for f in args.functionals.split(",") if f.strip()]
    bad = [f for f in names if f not in FUNCTIONALS]
    if bad:
        print(f"unknown functionals {bad}", file=sys.stderr)
        return EXIT_USAGE
    b = prepare(model, include_eta=args.include_eta)
    tables = [sweep_population(model, b, args.Ns, args.paths, args.seed, f) for f in names]
    if out is not None:
        for t in tables:
            t.to_csv(out / f"sweep_{t.functional}.csv")
    text = summary_json(tables)
    print(text)
    if out is not None:
        (out / "sweep_summary.json").write_text(text + "\n")
    return EXIT_OK


def _cmd_h4(args, model, out):
    from .verify import adjoint_representation, estimate_h4, plateau_ratio, prepare, summary_json
    b = prepare(model, include_eta=args.include_eta)
    rep = adjoint_representation(model, b.field, b.cc)
    ty, tz = estimate_h4(model, rep, b, args.Ns, args.paths, args.seed)
    if out is not None:
        rep.to_csv(out / "h4_gamma.csv")
        ty.to_csv(out / "h4_y.csv")
        tz.to_csv(out / "h4_z.csv")
    summary = {"representation_residual": rep.residual, "flags": rep.flags,
               "field_discrepancy": rep.field_discrepancy(b.field, model.n),
               "plateau_ratio_y": plateau_ratio(ty), "plateau_ratio_z": plateau_ratio(tz),
               "tables": json.loads(summary_json([ty, tz]))}
    _emit(out, "h4_summary.json", summary)
    return EXIT_OK


COMMANDS = {"check": _cmd_check, "riccati": _cmd_riccati, "cc": _cmd_cc, "simulate": _cmd_simulate,
            "oracle": _cmd_oracle, "sweep": _cmd_sweep, "h4": _cmd_h4}


def run(argv=None) -> int:
    from .ccfield import CCError, PicardDivergence
    from .population import PopulationError
    from .riccati import RiccatiError
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        model = load_scenario(args.scenario, steps=args.steps)
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = None
    if args.out is not None:
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "manifest.json").write_text(
                json.dumps(_manifest(args, model), indent=1, sort_keys=True, default=_json_default) + "\n")
        except OSError as exc:
            print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
            return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, model, out)
    except PicardDivergence as exc:
        print(json.dumps({"error": str(exc), "last_factor": exc.last_factor}, default=_json_default),
              file=sys.stderr)
        return EXIT_SOLVER
    except (RiccatiError, CCError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return EXIT_SOLVER
    except PopulationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
