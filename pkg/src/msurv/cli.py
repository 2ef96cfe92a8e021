"""Command line: simulate, fit, predict, km, aj, summarize.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from .estimators import aalen_johansen, kaplan_meier, kaplan_meier_panel, posterior_survival
from .mcmc import ImpossibleDataError, run_chains
from .statespace import GraphError
from .trajectory import observe_panel, simulate_population

log = logging.getLogger("msurv")

OK, USAGE, DATA, NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(spec: str) -> io.ConfigDocument:
    if spec.startswith("builtin:"):
        return io.builtin_config(spec.split(":", 1)[1])
    return io.read_config(spec)


def _parse_grid(text: str | None, default_end: float) -> np.ndarray:
    """``a:b:n`` (n points from a to b), a comma list, or a single end time."""
    if text is None:
        return np.linspace(0.0, default_end, 200)
    try:
        if ":" in text:
            a, b, n = text.split(":")
            return np.linspace(float(a), float(b), int(n))
        vals = np.array([float(x) for x in text.split(",") if x.strip()])
    except ValueError:
        raise UsageError(f"cannot parse grid {text!r}") from None
    if vals.size == 1 and vals[0] > 0:
        return np.linspace(0.0, vals[0], 200)
    if vals.size == 0 or np.any(np.diff(vals) < 0) or np.any(vals < 0):
        raise UsageError("grid must be non-empty, non-negative and sorted")
    return vals


def _chain_path(out: Path, k: int, n: int) -> Path:
    return out if n == 1 else out.with_name(f"{out.stem}_chain{k + 1}{out.suffix}")


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    params = cfg.model_params()
    horizon = math.inf if args.horizon is None else args.horizon
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out)
    if horizon <= 0 or args.n == 0:
        traj = None
    else:
        traj = simulate_population(args.n, cfg.initial_states(args.n), params, horizon, seed)
    if traj is None:
        with open(out, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(io.TRAJECTORY_COLUMNS)
    else:
        io.write_trajectory_csv(out, traj)
    every = args.observe_every if args.observe_every is not None else None
    if every is not None:
        panel_out = Path(args.panel_out) if args.panel_out else out.with_name(out.stem + ".panel.csv")
        if traj is None:
            with open(panel_out, "w", newline="", encoding="utf-8") as f:
                csv.writer(f, lineterminator="\n").writerow(io.PANEL_COLUMNS)
        else:
            io.write_panel_csv(panel_out, observe_panel(traj, cfg.structure, every))
    return OK


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    reader = io.read_cav_csv if args.format == "cav" else io.read_panel_csv
    panel = reader(args.data, cfg.graph)
    if panel.n == 0:
        raise io.FormatError(f"{args.data}: no units")
    try:
        mc = cfg.mcmc_config(iterations=args.iters, burn_in=args.burnin, latent_period=args.latent_period,
                             seed=args.seed if args.seed is not None else cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    chains = run_chains(panel, cfg.structure, cfg.prior, mc, args.chains, cfg.rho)
    out = Path(args.out)
    for k, draws in enumerate(chains):
        path = _chain_path(out, k, len(chains))
        io.write_draws(path, draws)
        io.write_acceptance(path.with_name(path.stem + ".acceptance.json"), draws)
        io.save_latents(io.latents_path(path), draws, cfg)
        means = ", ".join(f"{n}={v:.4g}" for n, v in draws.mean().items())
        log.info("chain %d: %s", k + 1, means)
    return OK


def cmd_predict(args) -> int:
    draws = io.read_draws(args.draws)
    side = io.latents_path(args.draws)
    if not side.exists():
        raise io.FormatError(f"{args.draws}: latent snapshot file {side.name} not found (re-run fit)")
    draws, cfg = io.load_latents(side, draws)
    if draws.n_draws == 0:
        raise io.FormatError(f"{args.draws}: no draws")
    g = cfg.graph
    if not 1 <= args.baseline_state <= g.s:
        raise UsageError(f"baseline state {args.baseline_state} out of range 1..{g.s}")
    if g.is_absorbing(args.baseline_state):
        raise UsageError(f"baseline state {args.baseline_state} is absorbing")
    last = max(t.last_time() for t in draws.latents)
    grid = _parse_grid(args.grid, last)
    curve = posterior_survival(draws, args.baseline_state, grid, at_time=args.at_time, thin=args.thin,
                               method=args.method, n_paths=args.paths, seed=args.seed)
    io.write_curve(args.out, curve)
    return OK


def cmd_km(args) -> int:
    if io.is_trajectory_csv(args.data):
        traj = io.read_trajectory_csv(args.data)
        if traj.n == 0:
            raise io.FormatError(f"{args.data}: no units")
        # units without a censoring row were absorbed at their last jump
        died = [not math.isfinite(p.end) for p in traj.units]
        t = [(p.times[-1] if d else p.end) - p.entry for p, d in zip(traj.units, died)]
        curve = kaplan_meier(t, died)
    else:
        panel = io.read_panel_csv(args.data)
        if panel.n == 0:
            raise io.FormatError(f"{args.data}: no units")
        curve = kaplan_meier_panel(panel)
    io.write_curve(args.out, curve)
    return OK


def cmd_aj(args) -> int:
    if not io.is_trajectory_csv(args.data):
        raise io.FormatError(f"{args.data}: Aalen-Johansen needs a complete trajectory CSV, not a panel")
    traj = io.read_trajectory_csv(args.data, args.states)
    if traj.n == 0:
        raise io.FormatError(f"{args.data}: no units")
    occ = aalen_johansen(traj)
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["time"] + [f"p{i}" for i in range(1, traj.s + 1)])
        for t, row in zip(occ.times, occ.probs):
            w.writerow([io.fmt(t)] + [io.fmt(v) for v in row])
    return OK


def cmd_summarize(args) -> int:
    draws = io.read_draws(args.draws)
    rows = draws.summary() if draws.n_draws else []
    f = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["parameter", "mean", "q05", "q95"])
        for name, mean, lo, hi in rows:
            w.writerow([name, io.fmt(mean), io.fmt(lo), io.fmt(hi)])
    finally:
        if f is not sys.stdout:
            f.close()
    return OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msurv", description="Exchangeable multi-state survival models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate complete trajectories")
    s.add_argument("--config", required=True, help="JSON config or builtin:<name>")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--horizon", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--observe-every", type=float, help="also write a panel observed on this grid")
    s.add_argument("--panel-out")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="posterior sampling from a panel")
    f.add_argument("--data", required=True)
    f.add_argument("--format", choices=("panel", "cav"), default="panel")
    f.add_argument("--config", required=True)
    f.add_argument("--iters", type=int)
    f.add_argument("--burnin", type=int)
    f.add_argument("--latent-period", type=int)
    f.add_argument("--chains", type=int, default=1)
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    q = sub.add_parser("predict", help="posterior predictive survival curve")
    q.add_argument("--draws", required=True)
    q.add_argument("--baseline-state", type=int, required=True)
    q.add_argument("--grid", help="a:b:n, a comma list, or an end time")
    q.add_argument("--at-time", type=float, default=0.0)
    q.add_argument("--thin", type=int, default=1)
    q.add_argument("--method", choices=("exact", "mc"), default="exact")
    q.add_argument("--paths", type=int, default=200)
    q.add_argument("--seed", type=int)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_predict)

    k = sub.add_parser("km", help="Kaplan-Meier curve")
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_km)

    a = sub.add_parser("aj", help="Aalen-Johansen occupancy (complete data only)")
    a.add_argument("--data", required=True)
    a.add_argument("--states", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_aj)

    m = sub.add_parser("summarize", help="posterior mean and 5%%/95%% quantiles")
    m.add_argument("--draws", required=True)
    m.add_argument("--out")
    m.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        for name in ("n", "chains", "thin", "paths"):
            v = getattr(args, name, None)
            if v is not None and v < (0 if name == "n" else 1):
                raise UsageError(f"--{name} must be positive")
        return args.func(args)
    except UsageError as exc:
        print(f"msurv: usage error: {exc}", file=sys.stderr)
        return USAGE
    except (ImpossibleDataError, io.FormatError, GraphError, FileNotFoundError) as exc:
        print(f"msurv: data error: {exc}", file=sys.stderr)
        return DATA
    except (ArithmeticError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"msurv: numeric failure: {exc}", file=sys.stderr)
        return NUMERIC
    except ValueError as exc:
        print(f"msurv: data error: {exc}", file=sys.stderr)
        return DATA


if __name__ == "__main__":
    sys.exit(main())
