"""Command-line surface: scenario runs and bit-exact CSV emission.

Commands: simulate, fixed-point, sweep, bifurcation, classify, verify,
reproduce-wheatstone. Exit codes: 0 success, 1 scenario/validation failure,
2 numerical failure. All floats are written with 17 significant digits and
LF line endings, so identical scenario bytes and seed give identical files.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .game import (
    ConfigurationError,
    CostEvalError,
    PopulationGame,
    classify_equilibrium,
    monomorphic_vertices,
    potential_symmetry_check,
    uniform_configuration,
    vertex_configuration,
)
from .logit import fixed_point
from .dynamics import (
    Trajectory,
    exact_target_check,
    integrate,
    logit_protocol,
    monotonicity_check,
)
from .analysis import continuation_sweep, dedup_curves, bifurcation_scan
from .routing import RouteError, RoutingGame, link_flow, decoupled_check, wardrop_check
from .scenario import Scenario, ScenarioError, load_scenario

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """A solver or integrator failed to meet its tolerance."""


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _derive_rng(seed: int, stream: int) -> np.random.Generator:
    # counter-based splitting: one root seed, disjoint child streams
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(stream,)))


def _x_headers(game: PopulationGame) -> list[str]:
    return [f"x_{a}_{p}" for a in game.actions for p in game.populations]


def _write_lines(path: Path, lines) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_trajectory_csv(path: Path, traj: Trajectory, game: PopulationGame,
                         rgame: RoutingGame | None = None) -> None:
    header = ["t"] + _x_headers(game) + [f"w_{a}" for a in game.actions]
    if rgame is not None:
        header += [f"y_{lid}" for lid in rgame.route_set.link_ids]
    w = traj.aggregate_flows()
    y = traj.link_flows(rgame.incidence) if rgame is not None else None
    lines = [",".join(header)]
    for k, t in enumerate(traj.times):
        vals = [t, *traj.states[k].reshape(-1), *w[k]]
        if y is not None:
            vals.extend(y[k])
        lines.append(",".join(_fmt(v) for v in vals))
    _write_lines(path, lines)


def write_sweep_csv(path: Path, curves, game: PopulationGame) -> None:
    header = ["eta", "branch_id", "residual", "stable", "l1_margin"] + _x_headers(game)
    lines = [",".join(header)]
    n_grid = max(len(c.etas) for c in curves)
    for k in range(n_grid):
        for b, c in enumerate(curves):
            if k >= len(c.etas):
                continue
            vals = [_fmt(c.etas[k]), str(b), _fmt(c.residuals[k]),
                    str(int(c.stable[k])), _fmt(c.l1_margins[k])]
            vals += [_fmt(v) for v in c.points[k].reshape(-1)]
            lines.append(",".join(vals))
    _write_lines(path, lines)


def write_bifurcation_csv(path: Path, sweep) -> None:
    lines = ["eta,n_fixed_points,n_stable"]
    for eta, nf, ns in zip(sweep.etas, sweep.n_fixed_points, sweep.n_stable):
        lines.append(f"{_fmt(eta)},{nf},{ns}")
    _write_lines(path, lines)


def write_fixed_point_csv(path: Path, result, game: PopulationGame) -> None:
    header = (["eta", "residual", "iterations", "converged", "l1_log_norm",
               "spectral_abscissa", "locally_stable"] + _x_headers(game))
    st = result.stability
    vals = [_fmt(result.eta), _fmt(result.residual), str(result.iterations),
            str(int(result.converged)),
            _fmt(st.l1_log_norm) if st else "nan",
            _fmt(st.spectral_abscissa) if st else "nan",
            str(int(st.locally_stable)) if st else "0"]
    vals += [_fmt(v) for v in result.x.reshape(-1)]
    _write_lines(path, [",".join(header), ",".join(vals)])


# ---------------------------------------------------------------------------
# Commands


def _cmd_simulate(scn: Scenario, out: Path, seed: int, threads: int, quiet: bool) -> int:
    game, rgame = scn.build_game()
    protocol = scn.build_protocol()
    x0 = scn.initial_configuration(game, _derive_rng(seed, 0))
    traj = integrate(game, protocol, x0,
                     scn.run_float("horizon", 50.0), scn.run_float("dt", 0.01))
    path = out / "trajectory.csv"
    write_trajectory_csv(path, traj, game, rgame)
    if not quiet:
        print(f"wrote {path} ({len(traj.times)} records, "
              f"mass drift {traj.mass_drift:.2e})")
    return 0


def _cmd_fixed_point(scn: Scenario, out: Path, seed: int, threads: int,
                     quiet: bool) -> int:
    game, _ = scn.build_game()
    eta = scn.eta()
    x0 = scn.initial_configuration(game, _derive_rng(seed, 0))
    result = fixed_point(game, eta, x0)
    path = out / "fixed_point.csv"
    write_fixed_point_csv(path, result, game)
    if not result.converged:
        raise NumericalFailure(f"fixed-point solve stalled at residual "
                               f"{result.residual:.3e} (eta={eta:g})")
    if not quiet:
        print(f"wrote {path} (residual {result.residual:.2e}, "
              f"{result.iterations} iterations)")
    return 0


def _sweep_seeds(game: PopulationGame) -> list[np.ndarray]:
    return monomorphic_vertices(game) + [uniform_configuration(game)]


def _cmd_sweep(scn: Scenario, out: Path, seed: int, threads: int, quiet: bool) -> int:
    game, _ = scn.build_game()
    eta_hi = scn.run_float("eta_hi", 2.0)
    eta_lo = scn.run_float("eta_lo", 1e-3)
    steps = scn.run_int("steps", 60)
    seeds = _sweep_seeds(game)

    def one(si_seed):
        si, x = si_seed
        try:
            return continuation_sweep(game, eta_hi, eta_lo, steps, [x])
        except ValueError:
            return []

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            chunks = list(ex.map(one, enumerate(seeds)))
    else:
        chunks = [one(item) for item in enumerate(seeds)]
    curves = dedup_curves([c for chunk in chunks for c in chunk])
    if not curves:
        raise NumericalFailure(f"no continuation branch converged at eta_hi={eta_hi}")
    path = out / "sweep.csv"
    write_sweep_csv(path, curves, game)
    if not quiet:
        print(f"wrote {path} ({len(curves)} branch(es), "
              f"eta {eta_hi:g} down to {eta_lo:g})")
    return 0


def _cmd_bifurcation(scn: Scenario, out: Path, seed: int, threads: int,
                     quiet: bool) -> int:
    game, _ = scn.build_game()
    grid = np.geomspace(scn.run_float("eta_hi", 2.0),
                        scn.run_float("eta_lo", 1e-3),
                        scn.run_int("steps", 25))
    sweep = bifurcation_scan(game, grid, multistart=scn.run_int("multistart", 8),
                             rng=_derive_rng(seed, 1))
    path = out / "bifurcation.csv"
    write_bifurcation_csv(path, sweep)
    if not quiet:
        print(f"wrote {path} (stable counts {sweep.n_stable.min()}"
              f"..{sweep.n_stable.max()})")
    return 0


def _cmd_classify(scn: Scenario, out: Path, seed: int, threads: int,
                  quiet: bool) -> int:
    game, rgame = scn.build_game()
    x0 = scn.initial_configuration(game, _derive_rng(seed, 0))
    lines = [f"scenario: {scn.name}", f"kind: {scn.kind}"]
    if rgame is not None:
        topo = rgame.topology
        lines.append(f"topology: {topo.kind}")
        if topo.stages:
            for k, st in enumerate(topo.stages, start=1):
                lines.append(f"stage {k}: {st.origin}->{st.destination} "
                             f"links {','.join(st.link_ids)}")
        for name, links in zip(rgame.route_set.names, rgame.route_set.routes):
            lines.append(f"route {name}: {','.join(links)}")
        wr = wardrop_check(rgame, x0)
        lines.append(f"x0 link flow: {','.join(_fmt(v) for v in wr.y)}")
        rep = wr.equilibrium
        lines.append(f"x0 is equilibrium flow witness: {str(wr.is_wardrop_witness).lower()}")
    else:
        rep = classify_equilibrium(game, x0)
    lines.append(f"x0 nash: {str(rep.is_nash).lower()}")
    lines.append(f"x0 strict: {str(rep.is_strict).lower()}")
    lines.append(f"x0 monomorphic: {str(rep.is_monomorphic).lower()}")
    if rep.cost_gap_alpha is not None:
        lines.append(f"cost gap alpha: {_fmt(rep.cost_gap_alpha)}")
    for pop, worse, better, gap in rep.violations:
        lines.append(f"violation: population {pop} uses {worse}, "
                     f"{_fmt(gap)} above best ({better})")
    path = out / "classify.txt"
    _write_lines(path, lines)
    if not quiet:
        print("\n".join(lines))
        print(f"wrote {path}")
    return 0


def _cmd_verify(scn: Scenario, out: Path, seed: int, threads: int,
                quiet: bool) -> int:
    game, rgame = scn.build_game()
    protocol = scn.build_protocol()
    rng = _derive_rng(seed, 3)
    lines = []
    required_ok = True

    ok, worst = exact_target_check(protocol, game, samples=20, rng=rng)
    required_ok &= ok
    lines.append(f"{'PASS' if ok else 'FAIL'} exact_target "
                 f"max_violation={worst:.3e}")

    x0 = scn.initial_configuration(game, _derive_rng(seed, 0))
    traj = integrate(game, protocol, x0, horizon=2.0, dt=scn.run_float("dt", 0.01))
    ok = traj.mass_drift <= 1e-7 and traj.min_entry >= -1e-9
    required_ok &= ok
    lines.append(f"{'PASS' if ok else 'FAIL'} trajectory_validity "
                 f"drift={traj.mass_drift:.3e} min_entry={traj.min_entry:.3e}")

    fp = fixed_point(game, scn.eta(), x0)
    required_ok &= fp.converged
    lines.append(f"{'PASS' if fp.converged else 'FAIL'} fixed_point "
                 f"residual={fp.residual:.3e}")

    mono_ok, viol = monotonicity_check(protocol, game, samples=5, rng=rng)
    lines.append(f"INFO monotone: {str(mono_ok).lower()} ({len(viol)} violations)")
    sym_ok, asym = potential_symmetry_check(game, samples=5, rng=rng)
    lines.append(f"INFO potential_symmetry: {str(sym_ok).lower()} "
                 f"max_asymmetry={asym:.3e}")
    if rgame is not None:
        lines.append(f"INFO topology: {rgame.topology.kind}")
        if rgame.topology.kind == "series_of_parallel" and rgame.topology.n_stages >= 2:
            rep = decoupled_check(protocol, rgame, samples=20, rng=rng)
            lines.append(f"INFO decoupled: {str(rep.ok).lower()} "
                         f"max_error={rep.max_error:.3e}")
    path = out / "verify.txt"
    _write_lines(path, lines)
    if not quiet:
        print("\n".join(lines))
        print(f"wrote {path}")
    if not required_ok:
        raise NumericalFailure("a required invariant failed; see verify.txt")
    return 0


def _cmd_reproduce_wheatstone(scn: Scenario, out: Path, seed: int, threads: int,
                              quiet: bool) -> int:
    game, rgame = scn.build_game()
    if rgame is None:
        raise ScenarioError("reproduce-wheatstone needs a routing scenario")
    rs = rgame.route_set
    try:
        ia = rs.index_of(("e1", "e4"))
        ib = rs.index_of(("e2", "e5"))
    except KeyError:
        raise ScenarioError("scenario lacks the expected diamond routes "
                            "(e1,e4) and (e2,e5)") from None
    eta = 0.2
    protocol = logit_protocol(eta)
    trajs = []
    for idx, fname in ((ia, "wheatstone_traj_1.csv"), (ib, "wheatstone_traj_2.csv")):
        x0 = vertex_configuration(game, rs.names[idx])
        traj = integrate(game, protocol, x0, horizon=50.0, dt=0.01)
        write_trajectory_csv(out / fname, traj, game, rgame)
        trajs.append(traj)
    gap = float(np.abs(trajs[0].terminal - trajs[1].terminal).sum())
    seeds = [vertex_configuration(game, rs.names[ia]),
             vertex_configuration(game, rs.names[ib]),
             uniform_configuration(game)]
    curves = continuation_sweep(game, scn.run_float("eta_hi", 2.0),
                                scn.run_float("eta_lo", 1e-3),
                                scn.run_int("steps", 60), seeds)
    write_sweep_csv(out / "wheatstone_sweep.csv", curves, game)
    y_limit = link_flow(rs, curves[0].terminal_limit)
    if not quiet:
        print(f"terminal l1 gap between the two runs: {gap:.3e}")
        print(f"limit link flow: {','.join(_fmt(v) for v in y_limit)}")
        print(f"wrote {out / 'wheatstone_traj_1.csv'}, "
              f"{out / 'wheatstone_traj_2.csv'}, {out / 'wheatstone_sweep.csv'}")
    if gap > 1e-4:
        raise NumericalFailure(f"trajectories disagree by {gap:.3e} at the horizon")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fixed-point": _cmd_fixed_point,
    "sweep": _cmd_sweep,
    "bifurcation": _cmd_bifurcation,
    "classify": _cmd_classify,
    "verify": _cmd_verify,
    "reproduce-wheatstone": _cmd_reproduce_wheatstone,
}


def run(command: str, scenario: Scenario, out_dir=".", seed: int | None = None,
        threads: int = 1, quiet: bool = False) -> int:
    """Execute one command against a loaded scenario; returns the exit code."""
    if command not in _COMMANDS:
        raise ScenarioError(f"unknown command {command!r}")
    out = Path(out_dir)
    effective_seed = scenario.seed() if seed is None else int(seed)
    t0 = time.perf_counter()
    code = _COMMANDS[command](scenario, out, effective_seed, max(1, threads), quiet)
    if not quiet:
        print(f"{command} finished in {time.perf_counter() - t0:.2f}s")
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gamedyn",
        description="Population-game dynamics: simulate, solve, sweep, classify.")
    ap.add_argument("command", choices=sorted(_COMMANDS))
    ap.add_argument("--scenario", required=True, help="scenario file path")
    ap.add_argument("--out", default=".", help="output directory for CSV/text")
    ap.add_argument("--seed", type=int, default=None,
                    help="override the scenario's random seed")
    ap.add_argument("--threads", type=int, default=1,
                    help="worker threads for independent solves")
    ap.add_argument("--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return run(args.command, scenario, out_dir=args.out, seed=args.seed,
                   threads=args.threads, quiet=args.quiet)
    except (ScenarioError, ConfigurationError, RouteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (CostEvalError, NumericalFailure) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
