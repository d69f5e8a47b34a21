"""Noisy best-response map: evaluation, Jacobian, fixed points, contraction.

The map sends a configuration x to per-population softmax distributions over
negative costs scaled by a noise level eta, times the population masses. Its
fixed points, local stability, and sampled l1 contraction certificates drive
everything downstream.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .game import (
    PopulationGame,
    evaluate_costs,
    validate_configuration,
    sample_configuration,
    monomorphic_vertices,
    classify_equilibrium,
    cost_jacobian,
)

log = logging.getLogger(__name__)


def softmax_target(game: PopulationGame, c: np.ndarray, eta: float) -> np.ndarray:
    """Mass-weighted per-population softmax of -c/eta.

    Exponentials are shifted by the per-population minimum cost, so the map
    stays finite for eta down to 1e-4 with costs of any magnitude. This sits
    in the innermost loop of every solver; keep it free of Python-level
    population loops.
    """
    m = game.mask
    cmin = np.min(np.where(m, c, np.inf), axis=0)
    z = np.where(m, (cmin - c) / eta, -np.inf)
    e = np.exp(z)
    return game.masses * e / e.sum(axis=0)


def logit_map(game: PopulationGame, x, eta: float) -> np.ndarray:
    """Target configuration F(x, eta) of the noisy best-response map."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    x = np.asarray(x, dtype=float)
    return softmax_target(game, evaluate_costs(game, x), eta)


@dataclass(frozen=True)
class LogitJacobian:
    """Partials of the noisy best-response map at (x, eta).

    ``matrix`` is square over the valid (action, population) index pairs in
    ``pairs`` (population-major). ``deltas[p]`` caches the pairwise cost
    differences c_sp - c_ip over population p's action set.
    """

    matrix: np.ndarray
    pairs: tuple
    eta: float
    deltas: tuple

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def pair_index(self, i: int, p: int) -> int:
        return self.pairs.index((i, p))


def logit_jacobian(game: PopulationGame, x, eta: float) -> LogitJacobian:
    """Analytic Jacobian of logit_map with respect to x.

    d F_ip / d x_jq = (v_p / eta) * pi_ip * (sum_s pi_sp dc_sp/dx_jq - dc_ip/dx_jq)
    with pi the softmax weights. Cost partials come from the field's analytic
    form when present, otherwise central finite differences.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    x = np.asarray(x, dtype=float)
    c = evaluate_costs(game, x)
    D = cost_jacobian(game, x)
    pairs = game.valid_pairs
    n = len(pairs)
    # stack cost partials as (S, P, n) with columns ordered like pairs
    Dcols = np.stack([D[:, :, j, q] for (j, q) in pairs], axis=-1)
    J = np.zeros((n, n))
    deltas = []
    row_of = {pair: k for k, pair in enumerate(pairs)}
    for p in range(game.n_pops):
        s = game.action_set(p)
        z = -(c[s, p] - c[s, p].min()) / eta
        e = np.exp(z)
        pi = e / e.sum()
        deltas.append(c[s, p][:, None] - c[s, p][None, :])
        block = Dcols[s, p, :]              # (|S_p|, n)
        avg = pi @ block                    # (n,)
        rows = np.array([row_of[(i, p)] for i in s])
        J[rows, :] = (game.masses[p] / eta) * pi[:, None] * (avg[None, :] - block)
    return LogitJacobian(matrix=J, pairs=pairs, eta=float(eta), deltas=tuple(deltas))


@dataclass(frozen=True)
class StabilityInfo:
    l1_log_norm: float
    spectral_abscissa: float
    locally_stable: bool


@dataclass(frozen=True)
class FixedPointResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool
    eta: float
    stability: StabilityInfo | None


def _column_measure(M: np.ndarray) -> float:
    """l1 log-norm: max over columns of diagonal plus off-diagonal abs sum."""
    d = np.diag(M)
    return float(np.max(d + np.abs(M).sum(axis=0) - np.abs(d)))


def local_stability(game: PopulationGame, x, eta: float) -> StabilityInfo:
    """Stability of the dynamics x' = F - x at a point, from J_F - I."""
    J = logit_jacobian(game, x, eta).matrix
    M = J - np.eye(J.shape[0])
    mu = _column_measure(M)
    abscissa = float(np.max(np.linalg.eigvals(M).real))
    return StabilityInfo(l1_log_norm=mu, spectral_abscissa=abscissa,
                         locally_stable=abscissa < 0.0)


def _damping_cap(game: PopulationGame, x, eta: float, ceiling: float) -> float:
    """Largest safe damping factor at x, from the l1 norm of the map Jacobian.

    The damped update has iteration matrix (1-lam)I + lam*J; with rho an upper
    bound on |eig(J)|, lam = 1.5/(1+rho) keeps the stiffest mode inside the
    unit disk with factor <= 0.5 to spare.
    """
    J = logit_jacobian(game, x, eta).matrix
    rho = float(np.abs(J).sum(axis=0).max())
    return min(ceiling, 1.5 / (1.0 + rho))


def residual_floor(game: PopulationGame, c: np.ndarray, eta: float) -> float:
    """Roundoff floor for the l1 fixed-point residual at noise level eta.

    The softmax exponent carries the absolute error of the costs amplified
    by 1/eta, so requesting residuals below eps * mass * |c| / eta is asking
    for noise. The constant is empirical with margin.
    """
    cabs = float(np.abs(np.where(game.mask, c, 0.0)).max())
    return 256.0 * np.finfo(float).eps * max(1.0, game.total_mass()) * (1.0 + cabs / eta)


def fixed_point(game: PopulationGame, eta: float, x0, *, tol: float = 1e-10,
                max_iter: int = 10 ** 5, damping: float = 0.5,
                compute_stability: bool = True) -> FixedPointResult:
    """Damped iteration x <- (1-lam)x + lam F(x) until the l1 residual meets tol.

    The damping factor is sized from the Jacobian norm at the current iterate
    (refreshed every few hundred steps, since stiffness varies across the
    polytope at small eta), halves whenever a step still increases the
    residual, and creeps back toward the cap after a run of accepted steps.
    The effective tolerance never goes below the roundoff residual_floor.
    The best iterate seen is always returned; non-convergence is reported in
    the flags, never raised.
    """
    x = validate_configuration(game, x0)
    cap = _damping_cap(game, x, eta, float(damping))
    lam = cap
    F = logit_map(game, x, eta)
    r = float(np.abs(F - x).sum())
    tol_eff = max(tol, residual_floor(game, evaluate_costs(game, x), eta))
    best_x, best_r = x, r
    accepts = 0
    it = 0
    while it < max_iter and best_r > tol_eff:
        it += 1
        if it % 250 == 0:
            cap = _damping_cap(game, x, eta, 1.0)
            lam = cap
            accepts = 0
            tol_eff = max(tol, residual_floor(game, evaluate_costs(game, x), eta))
        x_new = (1.0 - lam) * x + lam * F
        F_new = logit_map(game, x_new, eta)
        r_new = float(np.abs(F_new - x_new).sum())
        # 5% slack keeps roundoff jitter near the floor from collapsing lam;
        # genuine instability overshoots it within a few steps regardless
        if r_new <= 1.05 * r or lam <= 1e-7:
            x, F, r = x_new, F_new, r_new
            if r < best_r:
                best_x, best_r = x, r
            accepts += 1
            if accepts >= 5:
                lam = min(cap, lam * 1.25)
                accepts = 0
        else:
            lam = max(1e-7, 0.5 * lam)
            accepts = 0
    converged = best_r <= tol_eff
    stability = None
    if converged and compute_stability:
        stability = local_stability(game, best_x, eta)
    if not converged:
        log.warning("fixed_point: no convergence after %d iterations "
                    "(eta=%g, residual=%.3e)", it, eta, best_r)
    return FixedPointResult(x=best_x, residual=best_r, iterations=it,
                            converged=converged, eta=float(eta), stability=stability)


@dataclass(frozen=True)
class ContractionReport:
    margin: float
    rate_c: float
    samples_used: int
    certified: bool
    eta: float


def contraction_points(game: PopulationGame, sample_count: int = 200,
                       rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Sample set for contraction certification: uniform draws plus vertices."""
    rng = rng if rng is not None else np.random.default_rng(0)
    pts = [sample_configuration(game, rng) for _ in range(sample_count)]
    pts.extend(monomorphic_vertices(game))
    return pts


def contraction_margin(game: PopulationGame, eta: float, sample_count: int = 200,
                       rng: np.random.Generator | None = None,
                       points: list[np.ndarray] | None = None) -> ContractionReport:
    """Sampled column-dominance margin of J_F - I over the configuration set.

    margin < 0 on every sample certifies an l1 contraction at rate -margin
    on the samples (evidence, not proof: the true condition quantifies over
    all of the polytope).
    """
    if sample_count < 1:
        raise ValueError("sample_count must be at least 1")
    if points is None:
        points = contraction_points(game, sample_count, rng)
    n = len(game.valid_pairs)
    eye = np.eye(n)
    margin = -np.inf
    for x in points:
        J = logit_jacobian(game, x, eta).matrix
        margin = max(margin, _column_measure(J - eye))
    certified = margin < 0.0
    return ContractionReport(margin=float(margin),
                             rate_c=float(-margin) if certified else 0.0,
                             samples_used=len(points), certified=certified,
                             eta=float(eta))


def high_noise_threshold(game: PopulationGame, eta_lo: float = 0.05,
                         eta_hi: float = 1000.0, sample_count: int = 200,
                         rng: np.random.Generator | None = None,
                         rel_tol: float = 1e-2) -> float:
    """Smallest tested eta whose sampled contraction margin is negative.

    Bisects log(eta) on the certification predicate, reusing one sample set
    across all margin evaluations so the predicate is a fixed function of
    eta. Returns eta_lo outright when even eta_lo certifies.
    """
    if not (0 < eta_lo < eta_hi):
        raise ValueError("need 0 < eta_lo < eta_hi")
    points = contraction_points(game, sample_count, rng)

    def certified(eta):
        return contraction_margin(game, eta, points=points).certified

    if certified(eta_lo):
        return float(eta_lo)
    if not certified(eta_hi):
        raise ValueError(f"margin not certified even at eta_hi={eta_hi}; "
                         "widen the bracket upward")
    lo, hi = float(eta_lo), float(eta_hi)
    while hi / lo > 1.0 + rel_tol:
        mid = float(np.sqrt(lo * hi))
        if certified(mid):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Strict-equilibrium basin estimate


@dataclass(frozen=True)
class StrictBasinEstimate:
    epsilon_bar: float
    eta_epsilon: float
    alpha: float
    o_set_description: dict

    def contains(self, game: PopulationGame, x, epsilon: float | None = None) -> bool:
        """Membership in the per-population lower-bound set O_eps."""
        eps = self.epsilon_bar if epsilon is None else epsilon
        x = np.asarray(x, dtype=float)
        for pop_id, (action_id, _) in self.o_set_description.items():
            p = game.population_index(pop_id)
            i = game.action_index(action_id)
            if x[i, p] < game.masses[p] * (1.0 - eps) - 1e-12:
                return False
        return True


def _basin_samples(game: PopulationGame, support: dict[int, int], eps: float,
                   n_random: int, rng: np.random.Generator,
                   corner_cap: int = 512) -> list[np.ndarray]:
    """Points of O_eps: per-population corner deficits plus random interiors.

    Corners put the full deficit v_p*eps on a single alternative action; they
    realize the worst cost gap when costs are monotone in the flows.
    """
    active = [int(p) for p in game.active_populations]
    out = []
    # corner configurations: all populations at full deficit, one alternative each
    per_pop_corners = []
    for p in active:
        s = game.action_set(p)
        sp = support[p]
        alts = [j for j in s if j != sp]
        cols = []
        for j in alts:
            col = np.zeros(game.n_actions)
            col[sp] = game.masses[p] * (1.0 - eps)
            col[j] = game.masses[p] * eps
            cols.append(col)
        if not cols:
            col = np.zeros(game.n_actions)
            col[sp] = game.masses[p]
            cols.append(col)
        per_pop_corners.append(cols)
    counts = [len(c) for c in per_pop_corners]
    total = int(np.prod(counts))
    for flat in range(min(total, corner_cap)):
        x = np.zeros((game.n_actions, game.n_pops))
        rem = flat
        for k, p in enumerate(active):
            rem, idx = divmod(rem, counts[k])
            x[:, p] = per_pop_corners[k][idx]
        out.append(x)
    for _ in range(n_random):
        x = np.zeros((game.n_actions, game.n_pops))
        for p in range(game.n_pops):
            s = game.action_set(p)
            sp = support.get(p)
            if sp is None or game.masses[p] == 0:
                if len(s):
                    x[s, p] = game.masses[p] / len(s)
                continue
            deficit = game.masses[p] * eps * rng.uniform()
            x[sp, p] = game.masses[p] - deficit
            alts = np.array([j for j in s if j != sp])
            if len(alts):
                g = rng.exponential(size=len(alts))
                x[alts, p] = deficit * g / g.sum()
            else:
                x[sp, p] = game.masses[p]
        out.append(x)
    return out


def strict_basin_estimate(game: PopulationGame, x_star, *,
                          eps_grid=None, eta_grid=None, samples: int = 50,
                          rng: np.random.Generator | None = None) -> StrictBasinEstimate:
    """Basin radius and noise bound for a strict equilibrium.

    epsilon_bar is the largest grid eps such that every sampled point of
    O_eps (support actions hold at least v_p(1-eps)) keeps the cost gap of
    every population at or above alpha/2. eta_epsilon is the largest grid
    eta for which the map sends sampled O_epsilon_bar points back into the
    set. Both are sampling estimates.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x_star = validate_configuration(game, x_star)
    rep = classify_equilibrium(game, x_star)
    if not rep.is_strict:
        raise ValueError("x_star is not a strict equilibrium")
    alpha = rep.cost_gap_alpha
    support = {}
    for p in game.active_populations:
        s = game.action_set(p)
        support[int(p)] = int(s[np.argmax(x_star[s, p])])
    if eps_grid is None:
        eps_grid = np.concatenate([np.linspace(1.0, 0.05, 20),
                                   np.geomspace(0.04, 1e-3, 10)])
    if eta_grid is None:
        eta_grid = np.geomspace(10.0, 1e-4, 60)

    def gap_ok(eps):
        for x in _basin_samples(game, support, eps, samples, rng):
            c = evaluate_costs(game, x)
            for p in game.active_populations:
                s = game.action_set(p)
                sp = support[int(p)]
                others = s[s != sp]
                if len(others) and float((c[others, p] - c[sp, p]).min()) < alpha / 2:
                    return False
        return True

    epsilon_bar = None
    for eps in eps_grid:
        if gap_ok(float(eps)):
            epsilon_bar = float(eps)
            break
    if epsilon_bar is None:
        raise ValueError("no grid epsilon kept the sampled cost gap above alpha/2")

    def invariant_under(eta):
        for x in _basin_samples(game, support, epsilon_bar, samples, rng):
            F = logit_map(game, x, eta)
            for p in game.active_populations:
                sp = support[int(p)]
                if F[sp, p] < game.masses[p] * (1.0 - epsilon_bar) - 1e-12:
                    return False
        return True

    eta_epsilon = None
    for eta in eta_grid:
        if invariant_under(float(eta)):
            eta_epsilon = float(eta)
            break
    if eta_epsilon is None:
        raise ValueError("no grid eta kept the sampled basin invariant; "
                         "extend eta_grid downward")
    desc = {game.populations[p]: (game.actions[support[p]],
                                  float(game.masses[p] * (1.0 - epsilon_bar)))
            for p in support}
    return StrictBasinEstimate(epsilon_bar=epsilon_bar, eta_epsilon=eta_epsilon,
                               alpha=float(alpha), o_set_description=desc)
