"""Command-line entry point.

Subcommands: train, eval, compare, transcribe.  Every run is reproducible
from the echoed effective config plus the seed; artifacts (JSON/CSV/SVG)
contain no timestamps so repeated runs are byte-identical.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Set ECOFOLLOW_LOG=debug|info|warning to control stderr verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, learner
from .config import ConfigError, RunConfig, ScenarioSpec, load_config, \
    write_effective_config
from .harness import generate_lead, load_lead_csv, run_rhc, \
    training_leads, episode_sampler, make_controller, \
    pretrain_actor, refine_actor, write_trace_csv, write_report_json
from .transcription import fit_segments, reconstruct_dp, init_substate, \
    step_substate

log = logging.getLogger("ecofollow")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Bad invocation or configuration; maps to exit code 2."""


def _setup_logging():
    level = os.environ.get("ECOFOLLOW_LOG", "info").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out"] = args.out
    if getattr(args, "episodes", None) is not None:
        updates["learner"] = dataclasses.replace(cfg.learner,
                                                 episodes=args.episodes)
    if getattr(args, "scenario", None):
        scen = args.scenario
        if scen.endswith(".csv"):
            updates["scenario"] = dataclasses.replace(cfg.scenario, csv=scen)
        else:
            updates["scenario"] = dataclasses.replace(cfg.scenario, kind=scen,
                                                      csv="")
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    return cfg


def _resolve_lead(scen: ScenarioSpec, dt: float):
    if scen.csv:
        return load_lead_csv(scen.csv, dt)
    return generate_lead(scen.kind, scen.duration, scen.seed, dt,
                         speed=scen.speed)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_traces_svg(path, traces, dt):
    """Gap / speed / power panels; ``traces`` is {label: trace-dict}."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "ecofollow"
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(3, 1, figsize=(8, 8), sharex=True)
    panels = (("d_f", "gap [m]"), ("v", "speed [m/s]"), ("P_veh", "power [W]"))
    for ax, (col, label) in zip(axes, panels):
        for name, tr in traces.items():
            ax.plot(tr["t"], tr[col], label=name, lw=1.0)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    axes[0].legend(loc="best")
    axes[-1].set_xlabel("t [s]")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg)
    model = cfg.model()
    leads = training_leads(cfg.training_duration, cfg.transcription.dt)
    sampler = episode_sampler(leads, model)
    lcfg = dataclasses.replace(cfg.learner, seed=cfg.seed)
    actor0 = None
    if lcfg.bc_iters > 0 and any(cfg.demo_runs):
        log.info("cloning baseline closed-loop behavior (%s runs per lead)",
                 list(cfg.demo_runs))
        rng = np.random.default_rng(cfg.seed)
        actor0 = pretrain_actor(leads, model, cfg.rhc, lcfg, rng,
                                cfg.demo_runs)
        if lcfg.refine_rounds > 0:
            log.info("refining cloned policy for %d rounds",
                     lcfg.refine_rounds)
            actor0 = refine_actor(actor0, leads, model, cfg.rhc, lcfg, rng)
    log.info("training for %d episodes (seed %d)", lcfg.episodes, cfg.seed)
    result = learner.train(lcfg, sampler, model, actor_init=actor0)
    write_effective_config(cfg, out / "effective_config.json")
    learner.write_log(result.log, out / "train_log.jsonl")
    learner.save_checkpoint(out / "checkpoint.npz", result.actor,
                            result.critic)
    log.info("wrote %s", out / "checkpoint.npz")
    return EXIT_OK


def _build_controller(cfg: RunConfig, model, controller: str, checkpoint):
    if controller == "mpc":
        return make_controller("mpc", model)
    if not checkpoint:
        raise UsageError("the pilc controller needs --checkpoint")
    try:
        actor, _ = learner.load_checkpoint(checkpoint)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {checkpoint}")
    except ValueError as exc:
        raise UsageError(str(exc))
    return make_controller("pilc", model, actor=actor)


def cmd_eval(args) -> int:
    cfg = _load(args)
    model = cfg.model()
    lead = _resolve_lead(cfg.scenario, cfg.transcription.dt)
    controller = _build_controller(cfg, model, args.controller,
                                   args.checkpoint)
    metrics = run_rhc(lead, controller, model, cfg.rhc)
    out = _out_dir(cfg)
    write_effective_config(cfg, out / "effective_config.json")
    write_report_json(metrics.summary(), out / "metrics.json")
    write_trace_csv(metrics, out / "trace.csv")
    _save_traces_svg(out / "trace.svg", {args.controller: metrics.trace},
                     cfg.transcription.dt)
    log.info("eval metrics: %s", metrics.summary())
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load(args)
    model = cfg.model()
    lead = _resolve_lead(cfg.scenario, cfg.transcription.dt)
    results = {}
    for name in ("pilc", "mpc"):
        kind = args.controller if name == "pilc" else "mpc"
        controller = _build_controller(cfg, model, kind, args.checkpoint)
        results[name] = run_rhc(lead, controller, model, cfg.rhc)
    report = harness.compare(results["pilc"], results["mpc"])
    out = _out_dir(cfg)
    write_effective_config(cfg, out / "effective_config.json")
    write_report_json(report, out / "report.json")
    for name, met in results.items():
        write_trace_csv(met, out / f"trace_{name}.csv")
    _save_traces_svg(out / "overlay.svg",
                     {n: m.trace for n, m in results.items()},
                     cfg.transcription.dt)
    log.info("comparison: %s", report)
    return EXIT_OK


def cmd_transcribe(args) -> int:
    cfg = _load(args)
    tcfg = cfg.transcription
    try:
        lead = load_lead_csv(args.csv_in, tcfg.dt)
    except FileNotFoundError:
        raise UsageError(f"input file not found: {args.csv_in}")
    except ValueError as exc:
        raise UsageError(str(exc))
    horizon = tcfg.horizon
    if lead.n_steps < horizon:
        raise UsageError(
            f"trace too short: {lead.n_steps} steps < horizon {horizon}")
    max_err = 0.0
    with open(args.csv_out, "w", newline="") as fh:
        cols = ["window_start", "interval"]
        cols += [f"p{j}" for j in range(tcfg.poly_order + 1)]
        cols += ["max_abs_err"]
        fh.write(",".join(cols) + "\n")
        for start in range(0, lead.n_steps - horizon + 1, horizon):
            window = harness.window_positions(lead, start, horizon)
            rebased = harness.rebase_window(window)
            segments, _ = fit_segments(rebased, tcfg)
            state = init_substate(segments, tcfg)
            errs = np.empty(horizon + 1)
            for k in range(horizon + 1):
                errs[k] = reconstruct_dp(state, k, tcfg) - rebased[k]
                if k < horizon:
                    state = step_substate(state, tcfg)
            max_err = max(max_err, float(np.max(np.abs(errs))))
            for i, seg in enumerate(segments):
                lo = i * tcfg.interval_steps
                hi = lo + tcfg.interval_steps + 1
                werr = float(np.max(np.abs(errs[lo:hi])))
                row = [str(start), str(i)]
                row += [repr(float(c)) for c in seg.coeffs]
                row += [repr(werr)]
                fh.write(",".join(row) + "\n")
    print(f"max reconstruction error: {max_err:.6f} m")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecofollow",
        description="energy-optimal car following: training, evaluation, "
                    "and trajectory transcription")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("train", help="train the learning controller")
    common(p)
    p.add_argument("--episodes", type=int, help="override the episode budget")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="closed-loop evaluation of a controller")
    common(p)
    p.add_argument("--controller", choices=("pilc", "mpc"), default="pilc")
    p.add_argument("--checkpoint", help="trained policy (.npz)")
    p.add_argument("--scenario",
                   help="lead scenario: constant|stop_and_go|urban or a CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="run both controllers on one scenario")
    common(p)
    p.add_argument("--controller", choices=("pilc", "mpc"), default="pilc",
                   help="controller compared against the MPC baseline")
    p.add_argument("--checkpoint", help="trained policy (.npz)")
    p.add_argument("--scenario",
                   help="lead scenario: constant|stop_and_go|urban or a CSV path")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("transcribe",
                       help="fit piecewise polynomials to a lead trace")
    common(p)
    p.add_argument("csv_in", help="input trace CSV with columns t,d_p")
    p.add_argument("csv_out", help="output CSV of coefficients and errors")
    p.set_defaults(func=cmd_transcribe)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        log.error("%s", exc)
        if os.environ.get("ECOFOLLOW_LOG", "").lower() == "debug":
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
