"""Command-line front end.

Verbs: ``design``, ``verify``, ``simulate``, ``faultbank-design``,
``faultbank-run``, ``steady-state``.  Human-readable reports go to stdout
(matrices at 6 significant digits); machine artifacts (observer documents,
CSV trajectories, optional plots) go to the output directory, which
defaults to $FUNCOBS_OUTDIR or the working directory.  Exit status: 0 on
success, 1 on an infeasible design, 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import design as D
from . import diagnose as G
from . import model as M
from . import sim as S
from .expr import EvalError, ExprError, to_text

USAGE_ERROR = 2
INFEASIBLE = 1


def _fmt_matrix(name: str, mat: np.ndarray) -> str:
    body = np.array2string(np.atleast_2d(mat), precision=6, suppress_small=False,
                           max_line_width=100)
    return f"{name} =\n{body}"


def _parse_eigenvalues(text: str) -> tuple:
    out = []
    for tok in text.split(","):
        tok = tok.strip().replace("i", "j")
        if not tok:
            continue
        value = complex(tok)
        out.append(value.real if value.imag == 0.0 else value)
    if not out:
        raise ValueError("empty eigenvalue list")
    return tuple(out)


def _out_dir(args) -> Path:
    base = args.out_dir or os.environ.get("FUNCOBS_OUTDIR") or "."
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _spec_from_args(args, eigenvalues) -> D.DesignSpec:
    return D.DesignSpec(order=args.order, eigenvalues=eigenvalues,
                        n_samples=args.samples, tol=args.tol, seed=args.seed)


def _maybe_plot(path, series, title, xlabel, ylabel):
    """series: list of (t, values, label)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for t, v, label in series:
        ax.plot(t, v, label=label, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --------------------------------------------------------------------------
# verb implementations

def cmd_steady_state(args) -> int:
    model = M.load_model(args.model)
    guess = [float(v) for v in args.guess.split(",")]
    op = M.find_steady_state(model, guess, tol=args.tol, max_iter=args.max_iter)
    print(f"operating point of {args.model}:")
    for s, v in zip(op.states, op.values):
        print(f"  {s:8s} = {v:.10g}")
    print(f"residual (inf-norm): {op.residual:.3e}")
    if args.deviation_out:
        dev = M.to_deviation_form(model, op)
        M.save_model(dev, args.deviation_out)
        print(f"deviation-form model written to {args.deviation_out}")
    return 0


def cmd_design(args) -> int:
    eigenvalues = _parse_eigenvalues(args.eigenvalues)
    spec = _spec_from_args(args, eigenvalues)
    exo = None
    if args.fault:
        if not args.exo:
            print("error: --fault requires --exo", file=sys.stderr)
            return USAGE_ERROR
        kind, _, omega = args.exo.partition(":")
        exo = M.make_exosystem(kind, omega=float(omega) if omega else None)
    result = D.design_end_to_end(args.model, spec, decouple=args.decouple,
                                 fault=args.fault, exo=exo, v_max=args.v_max)
    if not result.feasible:
        print("design is INFEASIBLE; verification residuals per order:")
        for v, res in result.attempts:
            print(f"  order {v}: {res:.6e}")
        return INFEASIBLE
    obs = result.observer
    sol = result.solution
    print(f"design FEASIBLE at order v = {obs.v} ({obs.provenance})")
    print(f"verification residual: {sol.verification_residual:.3e}"
          f"  (tol {sol.tol:g}, rhs scale {sol.rhs_scale:.3g})")
    print(f"solution-space dimension: {sol.nullspace_dim}")
    with np.printoptions(precision=6):
        print(_fmt_matrix("A", obs.A))
        print(_fmt_matrix("B", obs.B))
        print(_fmt_matrix("C", obs.C))
        print(_fmt_matrix("D", obs.D))
    for k, t in enumerate(obs.T, 1):
        print(f"T{k}(x) = {to_text(t)}")
    print("identity residuals at fresh samples:")
    print(result.report.summary())
    out = _out_dir(args) / (args.out or "observer.txt")
    D.save_observer(obs, out)
    print(f"observer document written to {out}")
    return 0


def cmd_verify(args) -> int:
    model = M.load_model(args.model)
    observer = D.load_observer(args.observer, params=model.params)
    struct = M.extract_structure(model)
    report = D.verify_conditions(struct, observer, n_samples=args.samples,
                                 seed=args.seed)
    print(f"identity residuals over {args.samples} samples:")
    print(report.summary())
    worst = report.max_abs()
    print(f"overall max residual: {worst:.3e} (tol {args.tol:g})")
    if worst > args.tol:
        print("verification FAILED")
        return INFEASIBLE
    print("verification passed")
    return 0


def cmd_simulate(args) -> int:
    model = M.load_model(args.model)
    observer = D.load_observer(args.observer, params=model.params)
    scenario = S.load_scenario(args.scenario)
    traj = S.simulate(model, observer, scenario)
    out = _out_dir(args) / (args.out or "trajectory.csv")
    S.export_csv(traj, out)
    err = traj.err
    print(f"simulated {traj.t[-1]:g} time units, {traj.t.size} grid points")
    print(f"|zhat - z|: start {abs(err[0]):.6g}, end {abs(err[-1]):.6g},"
          f" max {np.max(np.abs(err)):.6g}")
    print(f"trajectory written to {out}")
    if args.plot:
        plot_path = _out_dir(args) / args.plot
        _maybe_plot(plot_path,
                    [(traj.t, traj.z, "z"), (traj.t, traj.zhat, "zhat")],
                    "functional and estimate", "t", "z")
        print(f"plot written to {plot_path}")
    return 0


def cmd_faultbank_design(args) -> int:
    model = M.load_model(args.model)
    exo_kinds = {}
    specs = {}
    for spec_text in args.observer:
        parts = [p.strip() for p in spec_text.split(":")]
        if len(parts) != 3:
            print(f"error: --observer expects FAULT:EXO:EIGENVALUES, got {spec_text!r}",
                  file=sys.stderr)
            return USAGE_ERROR
        fault, exo_text, eig_text = parts
        kind, _, omega = exo_text.partition("@")
        exo_kinds[fault] = M.make_exosystem(kind, omega=float(omega) if omega else None)
        eigenvalues = _parse_eigenvalues(eig_text)
        specs[fault] = D.DesignSpec(order=len(eigenvalues), eigenvalues=eigenvalues,
                                    n_samples=args.samples, tol=args.tol,
                                    seed=args.seed)
    bank = G.design_bank(model, exo_kinds, specs, v_max=args.v_max)
    out = _out_dir(args) / (args.out or "bank")
    G.save_bank(bank, out)
    print(f"designed {len(bank.entries)} observers:")
    for entry in bank:
        eigs = np.linalg.eigvals(entry.observer.A)
        print(f"  {entry.fault}: {entry.exo.kind} generator, order {entry.observer.v},"
              f" poles {np.array2string(eigs, precision=6)},"
              f" max residual {entry.report.max_abs():.3e}")
    print(f"bank written to {out}")
    return 0


def cmd_faultbank_run(args) -> int:
    model = M.load_model(args.model)
    bank = G.load_bank(args.bank, params=model.params)
    scenario = S.load_scenario(args.scenario)
    run = G.run_bank(bank, model, scenario)
    out = _out_dir(args)
    for fault in bank.faults():
        csv_path = out / f"estimate_{fault}.csv"
        with open(csv_path, "w") as fh:
            fh.write(f"t,fhat_{fault},f_{fault}\n")
            for k in range(run.t.size):
                fh.write(f"{run.t[k]!r},{run.estimates[fault][k]!r},"
                         f"{run.truths[fault][k]!r}\n")
        print(f"estimate trace for {fault} written to {csv_path}")
    if args.threshold:
        thresholds = {}
        for part in args.threshold.split(","):
            key, _, value = part.partition("=")
            thresholds[key.strip()] = float(value)
        policy = G.DetectionPolicy(thresholds=thresholds, hold=args.hold)
    else:
        policy = G.calibrate_policy(bank, model, scenario)
    events = G.detect(run, policy)
    report = out / "events.txt"
    with open(report, "w") as fh:
        fh.write("# fault  detection_time  peak_estimate\n")
        for e in events:
            fh.write(f"{e.fault} {e.time!r} {e.peak!r}\n")
    if events:
        print("detected events:")
        for e in events:
            print(f"  {e.fault}: t = {e.time:g} (peak |estimate| {e.peak:.4g})")
    else:
        print("no events detected")
    print(f"events report written to {report}")
    if args.plot:
        series = [(run.t, run.estimates[f], f"estimate {f}") for f in bank.faults()]
        series += [(run.t, run.truths[f], f"true {f}") for f in bank.faults()]
        plot_path = out / args.plot
        _maybe_plot(plot_path, series, "fault estimates", "t", "fault value")
        print(f"plot written to {plot_path}")
    return 0


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="funcobs",
        description="Design, verify and simulate disturbance-decoupled "
                    "functional observers; build fault estimation banks.")
    parser.add_argument("--out-dir", default=None,
                        help="output directory (default: $FUNCOBS_OUTDIR or '.')")
    sub = parser.add_subparsers(dest="verb", required=True)

    ss = sub.add_parser("steady-state", help="solve for an equilibrium")
    ss.add_argument("model")
    ss.add_argument("--guess", required=True, help="comma-separated initial state")
    ss.add_argument("--tol", type=float, default=1e-10)
    ss.add_argument("--max-iter", type=int, default=100)
    ss.add_argument("--deviation-out", default=None,
                    help="also write the deviation-form model here")
    ss.set_defaults(func=cmd_steady_state)

    de = sub.add_parser("design", help="design a functional observer")
    de.add_argument("model")
    de.add_argument("--order", type=int, default=1)
    de.add_argument("--eigenvalues", required=True,
                    help="comma-separated, conjugate-closed (use --eigenvalues=-1,-2)")
    de.add_argument("--decouple", action=argparse.BooleanOptionalAction, default=True)
    de.add_argument("--fault", default=None, help="design for this fault symbol")
    de.add_argument("--exo", default=None, help="step | ramp | sine:OMEGA")
    de.add_argument("--samples", type=int, default=None)
    de.add_argument("--tol", type=float, default=1e-6)
    de.add_argument("--seed", type=int, default=0)
    de.add_argument("--v-max", type=int, default=None)
    de.add_argument("--out", default=None, help="observer document file name")
    de.set_defaults(func=cmd_design)

    ve = sub.add_parser("verify", help="re-check an observer document against a model")
    ve.add_argument("model")
    ve.add_argument("observer")
    ve.add_argument("--samples", type=int, default=100)
    ve.add_argument("--seed", type=int, default=777)
    ve.add_argument("--tol", type=float, default=1e-6)
    ve.set_defaults(func=cmd_verify)

    si = sub.add_parser("simulate", help="co-simulate plant and observer")
    si.add_argument("model")
    si.add_argument("observer")
    si.add_argument("--scenario", required=True)
    si.add_argument("--out", default=None, help="CSV file name")
    si.add_argument("--plot", default=None, help="PNG file name")
    si.set_defaults(func=cmd_simulate)

    bd = sub.add_parser("faultbank-design", help="design one observer per fault")
    bd.add_argument("model")
    bd.add_argument("--observer", action="append", required=True,
                    metavar="FAULT:EXO:EIGENVALUES",
                    help="e.g. f1:ramp:-3.3333e-4 (repeatable; sine uses sine@OMEGA)")
    bd.add_argument("--samples", type=int, default=None)
    bd.add_argument("--tol", type=float, default=1e-6)
    bd.add_argument("--seed", type=int, default=0)
    bd.add_argument("--v-max", type=int, default=None)
    bd.add_argument("--out", default=None, help="bank directory name")
    bd.set_defaults(func=cmd_faultbank_design)

    br = sub.add_parser("faultbank-run", help="run a bank against a scenario")
    br.add_argument("model")
    br.add_argument("bank")
    br.add_argument("--scenario", required=True)
    br.add_argument("--threshold", default=None,
                    help="per-fault detection thresholds, e.g. f1=0.05,f2=0.5")
    br.add_argument("--hold", type=float, default=0.0,
                    help="detection hold time (with --threshold)")
    br.add_argument("--plot", default=None, help="PNG file name")
    br.set_defaults(func=cmd_faultbank_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (M.ModelError, ExprError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
