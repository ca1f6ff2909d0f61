"""Command-line entry point: ``conformal-smpc {calibrate,run,evaluate,compare}``.

Exit codes: 0 success, 2 configuration, 3 data, 4 calibration, 5 infeasible.
All results are computed before anything is written, so a failing command
leaves no partial outputs. Reports carry no timestamps; those go to a
``<command>.log`` sidecar.
"""
import argparse
import datetime
import json
import logging
import os
import sys

from . import evaluation as ev
from . import pipeline
from .calibration import save_region
from .config import load_config, normalize_mode
from .exceptions import InitialInfeasibilityError, SmpcError

log = logging.getLogger("conformal_smpc")


def _parser():
    p = argparse.ArgumentParser(prog="conformal-smpc",
                                description="Conformal stochastic MPC experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode=True):
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", help="output directory (default: output_dir in config)")
        sp.add_argument("--seed", type=int, help="test seed (default: data.seeds.test)")
        if mode:
            sp.add_argument("--mode", choices=["state", "output", "state_feedback",
                                               "output_feedback"])
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("calibrate", help="calibrate the conformal region"))
    sp = sub.add_parser("run", help="simulate one closed-loop rollout")
    common(sp)
    sp.add_argument("--zero-noise", action="store_true", help="use w = 0 and eta = 0")
    sp = sub.add_parser("evaluate", help="Monte Carlo evaluation")
    common(sp)
    sp.add_argument("--no-baselines", action="store_true")
    sp.add_argument("--zero-noise", action="store_true")
    sp = sub.add_parser("compare", help="region and policy comparison")
    common(sp, mode=False)
    sp.add_argument("--no-baselines", action="store_true")
    return p


class _Outputs:
    """Collects files in memory and writes them only once the command succeeded."""

    def __init__(self):
        self.files = {}

    def json(self, name, payload):
        self.files[name] = ("json", payload)

    def text(self, name, lines):
        self.files[name] = ("text", "\n".join(lines) + "\n")

    def call(self, name, writer, *args):
        self.files[name] = ("call", (writer, args))

    def flush(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        for name, (kind, payload) in sorted(self.files.items()):
            path = os.path.join(out_dir, name)
            if kind == "json":
                ev.write_json(path, payload)
            elif kind == "text":
                with open(path, "w") as f:
                    f.write(payload)
            else:
                writer, args = payload
                writer(path, *args)
        return sorted(self.files)


def _prepare(args, mode_override=None):
    rc = load_config(args.config)
    mode = normalize_mode(mode_override or getattr(args, "mode", None) or rc.mode)
    return rc, mode


def cmd_calibrate(args, outputs):
    rc, mode = _prepare(args)
    system = pipeline.build_system(rc, mode)
    region = pipeline.calibrate_region(rc, system, mode)
    summary = {"mode": mode, "qhat": region.qhat, "k": region.k, "M_cal": region.M_cal,
               "M_fit": len(region.fit_indices), "level": region.level, "kind": region.kind,
               "horizon": region.horizon}
    if region.pac is not None:
        summary["pac_epsilon"], summary["theta_tilde"] = region.pac
    outputs.call(f"region_{mode}.json", lambda path: save_region(region, path))
    outputs.json("calibration.json", summary)
    lines = ev.format_text(summary)
    outputs.text("calibration.txt", lines)
    return rc, lines


def cmd_run(args, outputs):
    rc, mode = _prepare(args)
    exp = pipeline.build_experiment(rc, mode, zero_noise=args.zero_noise)
    seed = rc["data.seeds.test"] if args.seed is None else args.seed
    seq = ev.rollout_seeds(seed, 1)[0]
    w, eta = ev.draw_realization(seq, exp.w_model, exp.eta_model if mode == "output_feedback"
                                 else None, exp.cfg.N_bar)
    rec = ev.simulate_closed_loop(exp.cfg, exp.x0, w, eta, keep_diagnostics=True)
    summary = {"mode": mode, "seed": seed, "cost": rec.cost, "max_score": float(rec.scores.max()),
               "qhat": exp.region.qhat, "score_ok": rec.score_ok, "state_ok": rec.state_ok,
               "input_ok": rec.input_ok, "candidates_ok": rec.candidates_ok,
               "fallbacks": rec.fallbacks, "identity_residual": rec.identity_residual}
    outputs.json("run.json", summary)
    outputs.call("trajectory.csv", ev.write_trajectory_csv, rec)
    outputs.call("diagnostics.csv", ev.write_diagnostics_csv, rec.diagnostics)
    fams = pipeline.baseline_families(exp)
    outputs.call("plot_data", lambda path: ev.write_plot_data(path, fams, [rec]))
    lines = ev.format_text(summary)
    outputs.text("run.txt", lines)
    return rc, lines


def cmd_evaluate(args, outputs):
    rc, mode = _prepare(args)
    exp = pipeline.build_experiment(rc, mode, zero_noise=args.zero_noise)
    baselines = rc["evaluation.baselines"] and not args.no_baselines
    payload, records, fams = pipeline.evaluate(exp, args.seed, baselines)
    outputs.json("evaluation.json", payload)
    lines = ev.format_text(payload)
    outputs.text("evaluation.txt", lines)
    outputs.call("rollouts.csv", ev.write_records_csv, records)
    n_plot = rc["evaluation.plot_rollouts"]
    plot_fams = fams or [ev.conformal_family(exp.region)]
    outputs.call("plot_data", lambda path: ev.write_plot_data(path, plot_fams, records,
                                                              max_rollouts=n_plot))
    short = {k: payload[k] for k in ("mode", "n_test", "coverage", "joint_rate", "cost_mean",
                                     "recursive_feasibility_rate")}
    return rc, ev.format_text(short)


def cmd_compare(args, outputs):
    rc, _ = _prepare(args, "state_feedback")
    exp = pipeline.build_experiment(rc, "state_feedback")
    seed = rc["data.seeds.test"] if args.seed is None else args.seed
    n_test = rc["evaluation.n_test"]
    payload = {"seed": seed, "n_test": n_test}
    if rc["evaluation.baselines"] and not args.no_baselines:
        fams = pipeline.baseline_families(exp)
        rows = ev.compare_regions(fams)
        payload["regions"] = ev.summarize_comparison(rows, fams)
        outputs.call("regions.csv", lambda path: ev.write_csv(
            path, list(rows[0]), [list(r.values()) for r in rows]))
    comparison = ev.compare_policies(exp.cfg, exp.x0, n_test, seed, exp.w_model,
                                     workers=rc["evaluation.workers"])
    payload["policies"] = comparison.to_dict()
    outputs.json("compare.json", payload)
    lines = ev.format_text(payload)
    outputs.text("compare.txt", lines)
    return rc, lines


COMMANDS = {"calibrate": cmd_calibrate, "run": cmd_run, "evaluate": cmd_evaluate,
            "compare": cmd_compare}


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = datetime.datetime.now().isoformat(timespec="seconds")
    outputs = _Outputs()
    try:
        rc, lines = COMMANDS[args.command](args, outputs)
    except InitialInfeasibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for name in exc.violated:
            print(f"  violated: {name}", file=sys.stderr)
        return exc.exit_code
    except SmpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    out_dir = args.out or rc["output_dir"]
    written = outputs.flush(out_dir)
    with open(os.path.join(out_dir, f"{args.command}.log"), "a") as f:
        f.write(json.dumps({"command": args.command, "started": started,
                            "finished": datetime.datetime.now().isoformat(timespec="seconds"),
                            "config": os.path.abspath(args.config), "files": written}) + "\n")
    print("\n".join(lines))
    return 0


if __name__ == "__main__":
    sys.exit(main())
