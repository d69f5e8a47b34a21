"""Population games: configurations, cost fields, and equilibrium tests.

A game couples a finite action set, per-population action subsets, player
masses, and a cost field mapping configurations (mass matrices on a product
of scaled simplices) to per-action, per-population costs. Everything here is
a pure function of immutable inputs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """A matrix violates the configuration polytope constraints."""


class CapabilityError(ValueError):
    """An operation needs a capability the cost field or protocol lacks."""


class CostEvalError(RuntimeError):
    """Cost evaluation produced a non-finite entry."""


# ---------------------------------------------------------------------------
# Scalar cost curves


class ScalarFn:
    """Scalar cost curve c(y) with derivative and running integral.

    Two shapes: affine ``a*y + b`` (constants are ``a = 0``) and piecewise
    linear tables. Tables extrapolate with their edge slopes so central
    finite differences stay well-defined just below y = 0.
    """

    __slots__ = ("kind", "a", "b", "xs", "ys", "_cum")

    def __init__(self, kind, a=0.0, b=0.0, xs=None, ys=None):
        self.kind = kind
        self.a = float(a)
        self.b = float(b)
        if kind == "table":
            xs = np.asarray(xs, dtype=float)
            ys = np.asarray(ys, dtype=float)
            if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
                raise ValueError("table needs >= 2 breakpoints with matching values")
            if np.any(np.diff(xs) <= 0):
                raise ValueError("table breakpoints must be strictly increasing")
            self.xs = xs
            self.ys = ys
            # cumulative trapezoid areas at the breakpoints, from xs[0]
            seg = 0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)
            self._cum = np.concatenate([[0.0], np.cumsum(seg)])
        elif kind == "affine":
            self.xs = None
            self.ys = None
            self._cum = None
        else:
            raise ValueError(f"unknown scalar-fn kind {kind!r}")

    @staticmethod
    def affine(a: float, b: float) -> "ScalarFn":
        return ScalarFn("affine", a=a, b=b)

    @staticmethod
    def constant(k: float) -> "ScalarFn":
        return ScalarFn("affine", a=0.0, b=k)

    @staticmethod
    def table(points: Sequence[tuple[float, float]]) -> "ScalarFn":
        pts = sorted(points)
        return ScalarFn("table", xs=[p[0] for p in pts], ys=[p[1] for p in pts])

    def __call__(self, y):
        if self.kind == "affine":
            return self.a * y + self.b
        y_arr = np.asarray(y, dtype=float)
        out = np.interp(y_arr, self.xs, self.ys)
        lo = y_arr < self.xs[0]
        hi = y_arr > self.xs[-1]
        if np.any(lo):
            s = self._edge_slope(0)
            out = np.where(lo, self.ys[0] + s * (y_arr - self.xs[0]), out)
        if np.any(hi):
            s = self._edge_slope(-1)
            out = np.where(hi, self.ys[-1] + s * (y_arr - self.xs[-1]), out)
        return float(out) if np.isscalar(y) else out

    def deriv(self, y):
        if self.kind == "affine":
            return self.a * np.ones_like(np.asarray(y, dtype=float)) if not np.isscalar(y) else self.a
        y_arr = np.atleast_1d(np.asarray(y, dtype=float))
        slopes = np.diff(self.ys) / np.diff(self.xs)
        idx = np.clip(np.searchsorted(self.xs, y_arr, side="right") - 1, 0, len(slopes) - 1)
        out = slopes[idx]
        return float(out[0]) if np.isscalar(y) else out.reshape(np.shape(y))

    def integral(self, y):
        """Integral of the curve from 0 to y (signed)."""
        if self.kind == "affine":
            return 0.5 * self.a * y * y + self.b * y
        return self._antideriv(y) - self._antideriv(0.0)

    def _antideriv(self, t):
        # signed area from xs[0] to t, with edge-slope extrapolation
        t = float(t)
        if t <= self.xs[0]:
            f = self(t)
            return 0.5 * (f + self.ys[0]) * (t - self.xs[0])
        if t >= self.xs[-1]:
            f = self(t)
            return self._cum[-1] + 0.5 * (f + self.ys[-1]) * (t - self.xs[-1])
        k = int(np.searchsorted(self.xs, t, side="right") - 1)
        f = self(t)
        return self._cum[k] + 0.5 * (f + self.ys[k]) * (t - self.xs[k])

    def _edge_slope(self, side):
        if side == 0:
            return (self.ys[1] - self.ys[0]) / (self.xs[1] - self.xs[0])
        return (self.ys[-1] - self.ys[-2]) / (self.xs[-1] - self.xs[-2])

    def shifted(self, delta: float) -> "ScalarFn":
        """The same curve plus a constant offset."""
        if self.kind == "affine":
            return ScalarFn.affine(self.a, self.b + delta)
        return ScalarFn("table", xs=self.xs, ys=self.ys + delta)

    def is_nondecreasing(self) -> bool:
        if self.kind == "affine":
            return self.a >= 0.0
        return bool(np.all(np.diff(self.ys) >= -1e-12))

    def __eq__(self, other):
        if not isinstance(other, ScalarFn) or self.kind != other.kind:
            return NotImplemented if not isinstance(other, ScalarFn) else False
        if self.kind == "affine":
            return self.a == other.a and self.b == other.b
        return np.array_equal(self.xs, other.xs) and np.array_equal(self.ys, other.ys)

    def __repr__(self):
        if self.kind == "affine":
            return f"ScalarFn.affine({self.a}, {self.b})"
        return f"ScalarFn.table({list(zip(self.xs, self.ys))})"


# ---------------------------------------------------------------------------
# Cost fields


class CostField:
    """Maps a configuration to the (actions x populations) cost matrix.

    ``per_action_aggregate`` marks fields whose costs depend on the
    configuration only through the per-action total mass w, entrywise
    (cost of action i is a function of w_i alone). ``aggregate_only``
    marks the weaker property that costs factor through w.
    """

    per_action_aggregate = False
    aggregate_only = False

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray):
        """Analytic partials d c_ip / d x_jq as an (S,P,S,P) tensor, or None."""
        return None

    def aggregate_cost(self, w: np.ndarray) -> np.ndarray:
        raise CapabilityError("cost field does not factor through per-action aggregates")


class AggregateCostField(CostField):
    """Costs c_ip = f_ip(w_i) given by one scalar curve per valid entry."""

    per_action_aggregate = True
    aggregate_only = True

    def __init__(self, fns):
        fns = [list(row) for row in fns]
        self.fns = [[f if f is not None else ScalarFn.constant(0.0) for f in row] for row in fns]
        self.n_actions = len(self.fns)
        self.n_pops = len(self.fns[0]) if self.fns else 0
        self._affine = all(f.kind == "affine" for row in self.fns for f in row)
        if self._affine:
            self._a = np.array([[f.a for f in row] for row in self.fns])
            self._b = np.array([[f.b for f in row] for row in self.fns])

    def __call__(self, x):
        return self.aggregate_cost(np.asarray(x, dtype=float).sum(axis=1))

    def aggregate_cost(self, w):
        w = np.asarray(w, dtype=float)
        if self._affine:
            return self._a * w[:, None] + self._b
        c = np.empty((self.n_actions, self.n_pops))
        for i, row in enumerate(self.fns):
            for p, f in enumerate(row):
                c[i, p] = f(w[i])
        return c

    def jacobian(self, x):
        w = np.asarray(x, dtype=float).sum(axis=1)
        S, P = self.n_actions, self.n_pops
        if self._affine:
            slopes = self._a
        else:
            slopes = np.array([[f.deriv(w[i]) for f in row] for i, row in enumerate(self.fns)])
        D = np.zeros((S, P, S, P))
        for i in range(S):
            D[i, :, i, :] = slopes[i][:, None]  # d c_ip / d x_iq for every q
        return D


class CallableCostField(CostField):
    """Wraps an arbitrary evaluator, with optional analytic partials."""

    def __init__(self, func: Callable[[np.ndarray], np.ndarray], jac=None,
                 per_action_aggregate=False, aggregate_fn=None):
        self._func = func
        self._jac = jac
        self.per_action_aggregate = per_action_aggregate
        self.aggregate_only = per_action_aggregate
        self._aggregate_fn = aggregate_fn

    def __call__(self, x):
        return np.asarray(self._func(np.asarray(x, dtype=float)), dtype=float)

    def jacobian(self, x):
        return None if self._jac is None else np.asarray(self._jac(x), dtype=float)

    def aggregate_cost(self, w):
        if self._aggregate_fn is None:
            raise CapabilityError("cost field does not factor through per-action aggregates")
        return np.asarray(self._aggregate_fn(np.asarray(w, dtype=float)), dtype=float)


# ---------------------------------------------------------------------------
# The game


@dataclass(frozen=True, eq=False)
class PopulationGame:
    """Finite populations with masses, per-population action sets, and costs.

    ``mask[i, p]`` is True when action i is available to population p. Every
    action must be available to at least one population and every population
    must have a nonempty action set. Zero-mass populations are allowed; they
    are skipped by equilibrium tests.
    """

    populations: tuple[str, ...]
    masses: np.ndarray
    actions: tuple[str, ...]
    mask: np.ndarray
    costs: CostField

    def __post_init__(self):
        object.__setattr__(self, "populations", tuple(self.populations))
        object.__setattr__(self, "actions", tuple(self.actions))
        v = np.asarray(self.masses, dtype=float).copy()
        mask = np.asarray(self.mask, dtype=bool).copy()
        S, P = len(self.actions), len(self.populations)
        if v.shape != (P,):
            raise ValueError(f"masses must have shape ({P},)")
        if mask.shape != (S, P):
            raise ValueError(f"mask must have shape ({S}, {P})")
        if np.any(v < 0):
            raise ValueError("population masses must be nonnegative")
        if not np.any(v > 0):
            raise ValueError("at least one population must have positive mass")
        if not np.all(mask.any(axis=0)):
            raise ValueError("every population needs a nonempty action set")
        if not np.all(mask.any(axis=1)):
            raise ValueError("every action must belong to some population's action set")
        if len(set(self.actions)) != S or len(set(self.populations)) != P:
            raise ValueError("action and population ids must be unique")
        v.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "masses", v)
        object.__setattr__(self, "mask", mask)
        pairs = [(i, p) for p in range(P) for i in range(S) if mask[i, p]]
        object.__setattr__(self, "_pairs", tuple(pairs))

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_pops(self) -> int:
        return len(self.populations)

    @property
    def valid_pairs(self) -> tuple[tuple[int, int], ...]:
        """(action, population) index pairs with the action available, population-major."""
        return self._pairs

    def action_set(self, p: int) -> np.ndarray:
        return np.flatnonzero(self.mask[:, p])

    def action_index(self, action_id: str) -> int:
        return self.actions.index(action_id)

    def population_index(self, pop_id: str) -> int:
        return self.populations.index(pop_id)

    @property
    def active_populations(self) -> np.ndarray:
        return np.flatnonzero(self.masses > 0)

    def total_mass(self) -> float:
        return float(self.masses.sum())


def evaluate_costs(game: PopulationGame, x: np.ndarray) -> np.ndarray:
    """Cost matrix at x; raises CostEvalError naming the first bad entry."""
    c = np.asarray(game.costs(x), dtype=float)
    if c.shape != (game.n_actions, game.n_pops):
        raise CostEvalError(f"cost field returned shape {c.shape}, "
                            f"expected {(game.n_actions, game.n_pops)}")
    bad = ~np.isfinite(c) & game.mask
    if np.any(bad):
        i, p = np.argwhere(bad)[0]
        raise CostEvalError(f"non-finite cost for action {game.actions[i]!r}, "
                            f"population {game.populations[p]!r}")
    return c


# ---------------------------------------------------------------------------
# Configurations


def validate_configuration(game: PopulationGame, x, *, tol: float = 1e-9) -> np.ndarray:
    """Check nonnegativity, support, and column sums; returns x as float array."""
    x = np.asarray(x, dtype=float)
    if x.shape != (game.n_actions, game.n_pops):
        raise ConfigurationError(f"configuration has shape {x.shape}, "
                                 f"expected {(game.n_actions, game.n_pops)}")
    scale = np.maximum(1.0, game.masses)
    if np.any(x < -tol * scale):
        i, p = np.argwhere(x < -tol * scale)[0]
        raise ConfigurationError(f"negative mass {x[i, p]!r} at "
                                 f"({game.actions[i]}, {game.populations[p]})")
    off = np.abs(np.where(game.mask, 0.0, x))
    if np.any(off > tol * scale):
        i, p = np.argwhere(off > tol * scale)[0]
        raise ConfigurationError(f"mass {x[i, p]!r} on unavailable action "
                                 f"({game.actions[i]}, {game.populations[p]})")
    err = np.abs(x.sum(axis=0) - game.masses)
    if np.any(err > tol * scale):
        p = int(np.argmax(err / scale))
        raise ConfigurationError(f"column sum {x[:, p].sum()!r} != mass "
                                 f"{game.masses[p]!r} for {game.populations[p]}")
    return x


def uniform_configuration(game: PopulationGame) -> np.ndarray:
    x = np.zeros((game.n_actions, game.n_pops))
    for p in range(game.n_pops):
        s = game.action_set(p)
        x[s, p] = game.masses[p] / len(s)
    return x


def vertex_configuration(game: PopulationGame, action_by_pop) -> np.ndarray:
    """Monomorphic configuration; accepts one action id or one per population."""
    if isinstance(action_by_pop, str):
        action_by_pop = [action_by_pop] * game.n_pops
    x = np.zeros((game.n_actions, game.n_pops))
    for p, aid in enumerate(action_by_pop):
        i = game.action_index(aid)
        if not game.mask[i, p]:
            raise ConfigurationError(f"action {aid!r} not available to "
                                     f"population {game.populations[p]!r}")
        x[i, p] = game.masses[p]
    return x


def sample_configuration(game: PopulationGame, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw on the product of scaled simplices (exponential spacings)."""
    x = np.zeros((game.n_actions, game.n_pops))
    for p in range(game.n_pops):
        s = game.action_set(p)
        g = rng.exponential(size=len(s))
        x[s, p] = game.masses[p] * g / g.sum()
    return x


def monomorphic_vertices(game: PopulationGame, cap: int = 4096) -> list[np.ndarray]:
    """All configurations with each population massed on a single action.

    Truncated (deterministically) at ``cap`` vertices for large products.
    """
    per_pop = [game.action_set(p) for p in range(game.n_pops)]
    out = []
    for combo in itertools.product(*per_pop):
        x = np.zeros((game.n_actions, game.n_pops))
        for p, i in enumerate(combo):
            x[i, p] = game.masses[p]
        out.append(x)
        if len(out) >= cap:
            break
    return out


def aggregate_flow(game: PopulationGame, x) -> np.ndarray:
    """Total mass per action, w = x 1."""
    x = np.asarray(x, dtype=float)
    if x.shape != (game.n_actions, game.n_pops):
        raise ConfigurationError(f"configuration has shape {x.shape}, "
                                 f"expected {(game.n_actions, game.n_pops)}")
    return x.sum(axis=1)


# ---------------------------------------------------------------------------
# Equilibrium tests


@dataclass(frozen=True)
class EquilibriumReport:
    is_nash: bool
    is_strict: bool
    is_monomorphic: bool
    violations: tuple
    cost_gap_alpha: float | None

    @property
    def max_violation(self) -> float:
        """Largest cost excess over the population optimum among used actions."""
        return max((g for *_ids, g in self.violations), default=0.0)


def classify_equilibrium(game: PopulationGame, x, tol: float = 1e-8) -> EquilibriumReport:
    """Nash / strict / monomorphic test at relative mass tolerance ``tol``.

    An action counts as used when x_ip > tol * v_p; cost comparisons carry the
    same absolute tolerance. Zero-mass populations are skipped.
    """
    x = validate_configuration(game, x, tol=max(tol, 1e-9))
    c = evaluate_costs(game, x)
    violations = []
    monomorphic = True
    strict = True
    gaps = []
    for p in game.active_populations:
        s = game.action_set(p)
        used = s[x[s, p] > tol * game.masses[p]]
        if len(used) != 1:
            monomorphic = False
        best = float(c[s, p].min())
        for i in used:
            if c[i, p] > best + tol:
                j = int(s[np.argmin(c[s, p])])
                violations.append((game.populations[p], game.actions[i],
                                   game.actions[j], float(c[i, p] - best)))
        if len(used) == 1:
            others = s[s != used[0]]
            if len(others):
                gap = float((c[others, p] - c[used[0], p]).min())
                gaps.append(gap)
                if gap <= tol:
                    strict = False
        else:
            strict = False
    is_nash = not violations
    is_strict = bool(is_nash and monomorphic and strict)
    alpha = min(gaps) if (is_strict and gaps) else None
    return EquilibriumReport(is_nash=is_nash, is_strict=is_strict,
                             is_monomorphic=monomorphic,
                             violations=tuple(violations), cost_gap_alpha=alpha)


def best_response_sets(game: PopulationGame, x, tol: float = 0.0) -> dict[str, list[str]]:
    """Per-population optimal-action sets, ties within ``tol`` all included."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    x = validate_configuration(game, x)
    c = evaluate_costs(game, x)
    out = {}
    for p in range(game.n_pops):
        s = game.action_set(p)
        best = c[s, p].min()
        out[game.populations[p]] = [game.actions[i] for i in s if c[i, p] <= best + tol]
    return out


def _transfer_probes(game: PopulationGame, x_star: np.ndarray, radius: float):
    """Mass-transfer perturbations of x*: single moves and cross-population pairs.

    Paired moves are what it takes to walk along equilibrium continua (e.g.
    route games where one population's shift is compensated by another's).
    """
    moves = []  # (p, i, j): move mass from i to j within population p
    for p in game.active_populations:
        s = game.action_set(p)
        for i in s:
            if x_star[i, p] <= 0:
                continue
            for j in s:
                if j != i:
                    moves.append((p, i, j))
    probes = []
    delta = radius / 2.0
    for (p, i, j) in moves:
        d = min(delta, x_star[i, p])
        if d <= 0:
            continue
        y = x_star.copy()
        y[i, p] -= d
        y[j, p] += d
        probes.append(y)
    delta2 = radius / 4.0
    for (p, i, j), (q, k, l) in itertools.combinations(moves, 2):
        if p == q:
            continue
        d = min(delta2, x_star[i, p], x_star[k, q])
        if d <= 0:
            continue
        y = x_star.copy()
        y[i, p] -= d
        y[j, p] += d
        y[k, q] -= d
        y[l, q] += d
        probes.append(y)
    return probes


def isolation_probe(game: PopulationGame, x_star, radius: float,
                    samples: int = 200, rng: np.random.Generator | None = None,
                    nash_tol: float = 1e-9) -> bool:
    """Sampling evidence that x* is an isolated Nash equilibrium.

    Returns False as soon as a distinct configuration within l1 distance
    ``radius`` passes the Nash test at a near-zero tolerance. Probes combine
    uniform draws toward x* with structured mass transfers (single and
    cross-population pairs). A True result is evidence, not proof.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    x_star = validate_configuration(game, x_star)
    if not classify_equilibrium(game, x_star).is_nash:
        raise ValueError("x_star must be a Nash equilibrium")
    rng = rng if rng is not None else np.random.default_rng(0)
    probes = _transfer_probes(game, x_star, radius)
    for _ in range(samples):
        z = sample_configuration(game, rng)
        d = float(np.abs(z - x_star).sum())
        if d <= 0:
            continue
        theta = min(1.0, radius * rng.uniform() / d)
        probes.append(x_star + theta * (z - x_star))
    tested = 0
    for y in probes:
        if float(np.abs(y - x_star).sum()) <= max(10 * nash_tol, 1e-12):
            continue
        tested += 1
        if classify_equilibrium(game, y, tol=nash_tol).is_nash:
            return False
    if tested == 0:
        raise ValueError("degenerate sampling: no distinct configurations exist "
                         "within the requested radius")
    return True


# ---------------------------------------------------------------------------
# Cost-field differentiation and the potential-game symmetry test


def cost_jacobian(game: PopulationGame, x, fd_step: float | None = None,
                  force_fd: bool = False) -> np.ndarray:
    """Partials d c_ip / d x_jq as an (S,P,S,P) tensor.

    Uses the field's analytic partials when present, otherwise central
    finite differences over the valid (j, q) entries.
    """
    x = np.asarray(x, dtype=float)
    if not force_fd:
        D = game.costs.jacobian(x)
        if D is not None:
            return np.asarray(D, dtype=float)
    S, P = game.n_actions, game.n_pops
    D = np.zeros((S, P, S, P))
    for (j, q) in game.valid_pairs:
        h = fd_step if fd_step is not None else 1e-6 * max(1.0, game.masses[q])
        xp = x.copy()
        xp[j, q] += h
        xm = x.copy()
        xm[j, q] -= h
        D[:, :, j, q] = (evaluate_costs(game, xp) - evaluate_costs(game, xm)) / (2 * h)
    return D


def potential_symmetry_check(game: PopulationGame, samples: int = 10,
                             fd_step: float | None = None, tol: float = 1e-6,
                             rng: np.random.Generator | None = None
                             ) -> tuple[bool, float]:
    """Test d c_ip / d x_jq == d c_jq / d x_ip at sampled interior points.

    Returns (symmetric within tol everywhere, max observed asymmetry). The
    check runs finite differences regardless of analytic partials, and skips
    zero-mass populations.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    active = set(game.active_populations.tolist())
    pairs = [(i, p) for (i, p) in game.valid_pairs if p in active]
    worst = 0.0
    for _ in range(samples):
        x = sample_configuration(game, rng)
        D = cost_jacobian(game, x, fd_step=fd_step, force_fd=True)
        for a, (i, p) in enumerate(pairs):
            for (j, q) in pairs[a + 1:]:
                worst = max(worst, abs(D[i, p, j, q] - D[j, q, i, p]))
    return worst <= tol, worst


def lipschitz_probe(game: PopulationGame, samples: int = 50,
                    rng: np.random.Generator | None = None) -> float:
    """Largest observed ratio |c(x)-c(x')|_1 / |x-x'|_1 over sampled pairs."""
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for _ in range(samples):
        x = sample_configuration(game, rng)
        z = sample_configuration(game, rng)
        dx = float(np.abs(x - z).sum())
        if dx < 1e-12:
            continue
        dc = float(np.abs(evaluate_costs(game, x) - evaluate_costs(game, z)).sum())
        worst = max(worst, dc / dx)
    return worst
