"""Evolutionary dynamics x' = F(x) - x: protocols, integration, aggregation.

Revision protocols declare capability flags (cost-based, monotone, decoupled)
that sampling checks verify and downgrade when violated. Integration is
classical fixed-step RK4 with no projection; mass conservation is a property
of exact-target protocols, so drift is monitored rather than corrected.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .game import (
    PopulationGame,
    CapabilityError,
    ConfigurationError,
    evaluate_costs,
    validate_configuration,
    sample_configuration,
)
from .logit import softmax_target

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RevisionProtocol:
    """Exact-target revision protocol: x -> target configuration.

    ``cost_fn(game, c)`` computes the target from the cost matrix alone and
    implies cost_based; otherwise ``target_fn(game, x)`` is used directly.
    Flags are declarations; run verify_protocol to test them by sampling.
    """

    name: str
    cost_based: bool = False
    monotone: bool = False
    decoupled: bool = False
    params: dict = field(default_factory=dict)
    target_fn: object = None
    cost_fn: object = None

    def __post_init__(self):
        if self.cost_fn is None and self.target_fn is None:
            raise ValueError("protocol needs target_fn or cost_fn")
        if self.cost_based and self.cost_fn is None:
            raise ValueError("cost_based declared but no cost_fn given")

    def target(self, game: PopulationGame, x: np.ndarray) -> np.ndarray:
        if self.cost_fn is not None:
            return np.asarray(self.cost_fn(game, evaluate_costs(game, x)), dtype=float)
        return np.asarray(self.target_fn(game, x), dtype=float)

    def target_from_costs(self, game: PopulationGame, c: np.ndarray) -> np.ndarray:
        if self.cost_fn is None:
            raise CapabilityError(f"protocol {self.name!r} is not cost-based")
        return np.asarray(self.cost_fn(game, np.asarray(c, dtype=float)), dtype=float)


def logit_protocol(eta: float) -> RevisionProtocol:
    """The noisy best-response protocol at noise level eta."""
    if eta <= 0:
        raise ValueError("eta must be positive")

    def cost_fn(game, c):
        return softmax_target(game, c, eta)

    return RevisionProtocol(name=f"logit[eta={eta:g}]", cost_based=True,
                            monotone=True, decoupled=True,
                            params={"eta": float(eta)}, cost_fn=cost_fn)


# ---------------------------------------------------------------------------
# Capability checks


def exact_target_check(protocol: RevisionProtocol, game: PopulationGame,
                       samples: int = 20, rng: np.random.Generator | None = None,
                       tol: float = 1e-9) -> tuple[bool, float]:
    """Sampled test of mass preservation and support: returns (ok, max violation)."""
    if samples < 1:
        raise ValueError("samples must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for _ in range(samples):
        x = sample_configuration(game, rng)
        F = protocol.target(game, x)
        worst = max(worst, float(np.abs(F.sum(axis=0) - game.masses).max()))
        worst = max(worst, float(np.abs(np.where(game.mask, 0.0, F)).max()))
        worst = max(worst, float(max(0.0, -(F.min()))))
    return worst <= tol, worst


def monotonicity_check(protocol: RevisionProtocol, game: PopulationGame,
                       samples: int = 10, fd_step: float = 1e-6,
                       rng: np.random.Generator | None = None,
                       tol: float = 1e-7) -> tuple[bool, list]:
    """Finite-difference sign test of the target's cost sensitivities.

    On sampled cost matrices, dG_ip/dc_ip must be <= tol, dG_ip/dc_jp >= -tol
    for j != i within population p, and cross-population sensitivities must
    vanish. Returns (ok, violations) with entries (kind, (i,p), (j,q), value).
    """
    if not protocol.cost_based or protocol.cost_fn is None:
        raise CapabilityError(f"protocol {protocol.name!r} is not cost-based; "
                              "monotonicity is defined on cost matrices")
    rng = rng if rng is not None else np.random.default_rng(0)
    violations = []
    for _ in range(samples):
        x = sample_configuration(game, rng)
        c = evaluate_costs(game, x)
        for (j, q) in game.valid_pairs:
            cp = c.copy()
            cp[j, q] += fd_step
            cm = c.copy()
            cm[j, q] -= fd_step
            dG = (protocol.target_from_costs(game, cp)
                  - protocol.target_from_costs(game, cm)) / (2 * fd_step)
            for (i, p) in game.valid_pairs:
                v = float(dG[i, p])
                if p == q and i == j:
                    if v > tol:
                        violations.append(("own_cost_increasing", (i, p), (j, q), v))
                elif p == q:
                    if v < -tol:
                        violations.append(("cross_cost_decreasing", (i, p), (j, q), v))
                else:
                    if abs(v) > tol:
                        violations.append(("cross_population_coupling", (i, p), (j, q), v))
    return not violations, violations


def verify_protocol(protocol: RevisionProtocol, game: PopulationGame,
                    samples: int = 10, rng: np.random.Generator | None = None
                    ) -> tuple[RevisionProtocol, dict]:
    """Test declared capabilities by sampling; downgrade flags that fail.

    Returns the (possibly downgraded) protocol and a report. The decoupled
    flag needs a series-composition routing context and is checked there,
    not here.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    exact_ok, worst = exact_target_check(protocol, game, samples=samples, rng=rng)
    report = {"exact_target": exact_ok, "max_target_violation": worst}
    out = protocol
    if protocol.cost_based and protocol.monotone:
        mono_ok, viol = monotonicity_check(protocol, game, samples=samples, rng=rng)
        report["monotone"] = mono_ok
        report["monotone_violations"] = viol
        if not mono_ok:
            log.warning("protocol %s declared monotone but failed the sampled "
                        "sign test (%d violations); downgrading flag",
                        protocol.name, len(viol))
            out = dataclasses.replace(protocol, monotone=False)
    return out, report


# ---------------------------------------------------------------------------
# Integration


@dataclass(frozen=True)
class Trajectory:
    """Recorded solution of x' = target(x) - x on a fixed time grid."""

    times: np.ndarray          # (T,)
    states: np.ndarray         # (T, S, P)
    protocol_name: str
    eta: float | None          # noise level when the protocol carries one
    mass_drift: float          # max |column sum - mass| over recorded states
    min_entry: float           # most negative recorded entry

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def aggregate_flows(self) -> np.ndarray:
        """Per-action totals w(t) as a (T, S) array."""
        return self.states.sum(axis=2)

    def link_flows(self, incidence: np.ndarray) -> np.ndarray:
        """Link flows y(t) = A w(t) as a (T, E) array for a routing context."""
        return self.aggregate_flows() @ np.asarray(incidence, dtype=float).T


def integrate(game: PopulationGame, protocol: RevisionProtocol, x0,
              horizon: float, dt: float) -> Trajectory:
    """Fixed-step RK4 integration with states recorded at every step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if horizon < dt:
        raise ValueError("horizon must be at least one step")
    x = validate_configuration(game, x0)
    n = int(round(horizon / dt))
    if abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        log.warning("horizon %g is not a multiple of dt %g; integrating to %g",
                    horizon, dt, n * dt)

    def f(state, step):
        F = protocol.target(game, state)
        if F.min() < -1e-12:
            i, p = np.unravel_index(np.argmin(F), F.shape)
            raise ConfigurationError(
                f"protocol {protocol.name!r} produced negative target entry "
                f"{F[i, p]!r} at ({game.actions[i]}, {game.populations[p]}), "
                f"step {step} (t={step * dt:g})")
        return F - state

    states = np.empty((n + 1, game.n_actions, game.n_pops))
    states[0] = x
    for k in range(n):
        k1 = f(x, k)
        k2 = f(x + 0.5 * dt * k1, k)
        k3 = f(x + 0.5 * dt * k2, k)
        k4 = f(x + dt * k3, k)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        states[k + 1] = x
    times = dt * np.arange(n + 1)
    drift = float(np.abs(states.sum(axis=1) - game.masses).max())
    min_entry = float(states.min())
    if drift > 1e-7:
        log.warning("mass drift %.3e exceeds the 1e-7 monitor bound", drift)
    return Trajectory(times=times, states=states, protocol_name=protocol.name,
                      eta=protocol.params.get("eta"), mass_drift=drift,
                      min_entry=min_entry)


# ---------------------------------------------------------------------------
# Aggregate (per-action total mass) dynamics


@dataclass(frozen=True)
class ReducedFixedPoint:
    w: np.ndarray
    residual: float
    iterations: int
    converged: bool


class ReducedSystem:
    """Autonomous dynamics of the per-action totals, w' = sum_p G_p(cbar(w)) - w.

    Exists when the protocol is cost-based and every cost depends on the
    configuration only through its own action's total mass.
    """

    def __init__(self, game: PopulationGame, protocol: RevisionProtocol):
        if not protocol.cost_based:
            raise CapabilityError("aggregate dynamics needs a cost-based protocol")
        if not game.costs.per_action_aggregate:
            raise CapabilityError("aggregate dynamics needs per-action aggregate "
                                  "costs (c_ip a function of w_i alone)")
        self.game = game
        self.protocol = protocol

    def target(self, w: np.ndarray) -> np.ndarray:
        """Configuration-valued target G(cbar(w)) at aggregate flow w."""
        c = self.game.costs.aggregate_cost(np.asarray(w, dtype=float))
        return self.protocol.target_from_costs(self.game, c)

    def field(self, w: np.ndarray) -> np.ndarray:
        return self.target(w).sum(axis=1) - np.asarray(w, dtype=float)

    def integrate(self, w0, horizon: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """RK4 on the reduced field; returns (times, flows (T, S))."""
        if dt <= 0 or horizon < dt:
            raise ValueError("need dt > 0 and horizon >= dt")
        w = np.asarray(w0, dtype=float).copy()
        if w.shape != (self.game.n_actions,):
            raise ValueError(f"w0 must have shape ({self.game.n_actions},)")
        n = int(round(horizon / dt))
        flows = np.empty((n + 1, self.game.n_actions))
        flows[0] = w
        for k in range(n):
            k1 = self.field(w)
            k2 = self.field(w + 0.5 * dt * k1)
            k3 = self.field(w + 0.5 * dt * k2)
            k4 = self.field(w + dt * k3)
            w = w + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            flows[k + 1] = w
        return dt * np.arange(n + 1), flows

    def _damping_cap(self, w, ceiling: float) -> float:
        # same sizing rule as the full-state solver: the damped update is
        # stable while lam * (1 + rho) < 2 for rho bounding |eig| of d(phi)/dw
        rho = float(np.abs(self.jacobian_fd(w) + np.eye(self.game.n_actions)
                           ).sum(axis=0).max())
        return min(ceiling, 1.5 / (1.0 + rho))

    def fixed_point(self, w0, tol: float = 1e-10, max_iter: int = 10 ** 5,
                    damping: float = 0.5) -> ReducedFixedPoint:
        """Adaptive damped iteration w <- (1-lam) w + lam sum_p G_p(cbar(w))."""
        w = np.asarray(w0, dtype=float).copy()
        cap = self._damping_cap(w, float(damping))
        lam = cap
        phi = self.target(w).sum(axis=1)
        r = float(np.abs(phi - w).sum())
        best_w, best_r = w, r
        accepts = 0
        it = 0
        while it < max_iter and best_r > tol:
            it += 1
            if it % 250 == 0:
                cap = self._damping_cap(w, 1.0)
                lam = cap
                accepts = 0
            w_new = (1.0 - lam) * w + lam * phi
            phi_new = self.target(w_new).sum(axis=1)
            r_new = float(np.abs(phi_new - w_new).sum())
            if r_new <= 1.05 * r or lam <= 1e-7:
                w, phi, r = w_new, phi_new, r_new
                if r < best_r:
                    best_w, best_r = w, r
                accepts += 1
                if accepts >= 5:
                    lam = min(cap, lam * 1.25)
                    accepts = 0
            else:
                lam = max(1e-7, 0.5 * lam)
                accepts = 0
        return ReducedFixedPoint(w=best_w, residual=best_r, iterations=it,
                                 converged=best_r <= tol)

    def jacobian_fd(self, w, h: float = 1e-6) -> np.ndarray:
        """Central finite differences of the reduced field."""
        w = np.asarray(w, dtype=float)
        S = self.game.n_actions
        J = np.empty((S, S))
        for j in range(S):
            wp = w.copy()
            wp[j] += h
            wm = w.copy()
            wm[j] -= h
            J[:, j] = (self.field(wp) - self.field(wm)) / (2 * h)
        return J


def aggregate_dynamics(game: PopulationGame, protocol: RevisionProtocol) -> ReducedSystem:
    """Reduced system over per-action totals; errors when capabilities are missing."""
    return ReducedSystem(game, protocol)


def recover_configuration_limit(game: PopulationGame, protocol: RevisionProtocol,
                                w_star, residual_tol: float = 1e-8) -> np.ndarray:
    """Configuration limit x* = G(cbar(w*)) at a reduced fixed point w*."""
    sys = ReducedSystem(game, protocol)
    w_star = np.asarray(w_star, dtype=float)
    x_star = sys.target(w_star)
    residual = float(np.abs(x_star.sum(axis=1) - w_star).sum())
    if residual > residual_tol:
        raise ValueError(f"w_star is not a reduced fixed point: residual "
                         f"{residual:.3e} > {residual_tol:g}")
    return x_star


# ---------------------------------------------------------------------------
# Trajectory-pair contraction fit


@dataclass(frozen=True)
class RateFit:
    """Least-squares exponential decay rate of an l1 distance sequence."""

    rate: float | None
    intercept: float | None
    residual_rms: float | None
    n_points: int
    non_monotone: bool
    defined: bool


def l1_contraction_test(traj_a: Trajectory, traj_b: Trajectory,
                        aggregate: bool = False, floor: float = 1e-14) -> RateFit:
    """Fit log distance vs time between two trajectories on one time grid.

    ``aggregate`` fits the per-action total flows instead of full states.
    Points with distance at or below ``floor`` are dropped from the fit
    (they are dominated by roundoff); an all-zero sequence yields an
    undefined rate, flagged via ``defined=False``.
    """
    if not np.array_equal(traj_a.times, traj_b.times):
        raise ValueError("trajectories must share one time grid")
    if aggregate:
        diff = traj_a.aggregate_flows() - traj_b.aggregate_flows()
        d = np.abs(diff).sum(axis=1)
    else:
        diff = traj_a.states - traj_b.states
        d = np.abs(diff).sum(axis=(1, 2))
    grow = d[1:] > d[:-1] * (1 + 1e-12) + 1e-14
    non_monotone = bool(np.any(grow))
    keep = d > floor
    if keep.sum() < 2:
        return RateFit(rate=None, intercept=None, residual_rms=None,
                       n_points=int(keep.sum()), non_monotone=non_monotone,
                       defined=False)
    t = traj_a.times[keep]
    logd = np.log(d[keep])
    A = np.vstack([t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(A, logd, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    resid = float(np.sqrt(np.mean((A @ coef - logd) ** 2)))
    return RateFit(rate=-slope, intercept=intercept, residual_rms=resid,
                   n_points=int(keep.sum()), non_monotone=non_monotone,
                   defined=True)
