"""Routing games on directed multigraphs.

Actions are node-simple origin-destination routes; costs are sums of link
costs evaluated at the induced link flows y = A x 1, with per-population
link cost functions. Includes topology classification (parallel stages and
their series compositions), the factorization test for stage-decoupled
protocols, and potential functions for toll-sensitivity instances.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .game import (
    PopulationGame,
    CostField,
    CapabilityError,
    ScalarFn,
    classify_equilibrium,
    EquilibriumReport,
    validate_configuration,
    sample_configuration,
)
from .dynamics import RevisionProtocol, integrate

ROUTE_GUARD = 10 ** 6


class RouteError(ValueError):
    """Route enumeration failed: unreachable destination or explosion."""


@dataclass(frozen=True)
class Link:
    id: str
    tail: str
    head: str


class Multigraph:
    """Directed multigraph; parallel links allowed, self-loops not."""

    def __init__(self, nodes, links):
        self.nodes = tuple(nodes)
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise ValueError("duplicate node ids")
        out = []
        seen = set()
        for item in links:
            link = item if isinstance(item, Link) else Link(*item)
            if link.id in seen:
                raise ValueError(f"duplicate link id {link.id!r}")
            seen.add(link.id)
            if link.tail not in node_set or link.head not in node_set:
                raise ValueError(f"link {link.id!r} references unknown node")
            if link.tail == link.head:
                raise ValueError(f"link {link.id!r} is a self-loop")
            out.append(link)
        self.links = tuple(out)
        self._by_id = {l.id: l for l in self.links}
        adj: dict[str, list[Link]] = {n: [] for n in self.nodes}
        for l in self.links:
            adj[l.tail].append(l)
        for n in adj:
            adj[n].sort(key=lambda l: l.id)
        self._adj = adj

    def link(self, link_id: str) -> Link:
        return self._by_id[link_id]

    def out_links(self, node: str) -> list[Link]:
        return self._adj[node]

    @property
    def link_ids(self) -> tuple[str, ...]:
        return tuple(l.id for l in self.links)


@dataclass(frozen=True)
class RouteSet:
    """All node-simple origin-destination routes, in link-id lexicographic order."""

    origin: str
    destination: str
    routes: tuple[tuple[str, ...], ...]
    names: tuple[str, ...]
    link_ids: tuple[str, ...]
    incidence: np.ndarray            # (links, routes), 0/1
    node_seqs: tuple[tuple[str, ...], ...]

    @property
    def n_routes(self) -> int:
        return len(self.routes)

    def index_of(self, links) -> int:
        """Route index by its link-id tuple (stable against name choices)."""
        key = tuple(links)
        try:
            return self.routes.index(key)
        except ValueError:
            raise KeyError(f"no route with links {key!r}") from None


def enumerate_routes(graph: Multigraph, origin: str, destination: str) -> RouteSet:
    """Exhaustive depth-first enumeration of node-simple routes.

    Out-links are scanned in link-id order, so routes come out in
    lexicographic order of their link-id sequences, deterministically.
    Aborts above ROUTE_GUARD routes.
    """
    if origin not in graph.nodes:
        raise RouteError(f"unknown origin {origin!r}")
    if destination not in graph.nodes:
        raise RouteError(f"unknown destination {destination!r}")
    if origin == destination:
        raise RouteError("origin equals destination; routes must move")
    routes: list[tuple[str, ...]] = []
    nodes_of: list[tuple[str, ...]] = []
    visited = {origin}
    path: list[str] = []
    path_nodes: list[str] = [origin]

    def dfs(node):
        for link in graph.out_links(node):
            if link.head == destination:
                routes.append(tuple(path + [link.id]))
                nodes_of.append(tuple(path_nodes + [destination]))
                if len(routes) > ROUTE_GUARD:
                    raise RouteError(f"more than {ROUTE_GUARD} routes; "
                                     "graph too large for explicit enumeration")
            elif link.head not in visited:
                visited.add(link.head)
                path.append(link.id)
                path_nodes.append(link.head)
                dfs(link.head)
                path.pop()
                path_nodes.pop()
                visited.remove(link.head)

    dfs(origin)
    if not routes:
        raise RouteError(f"destination {destination!r} not reachable from {origin!r}")
    link_ids = graph.link_ids
    row = {lid: e for e, lid in enumerate(link_ids)}
    A = np.zeros((len(link_ids), len(routes)))
    for r, rt in enumerate(routes):
        for lid in rt:
            A[row[lid], r] = 1.0
    names = tuple(f"r{k + 1}" for k in range(len(routes)))
    A.setflags(write=False)
    return RouteSet(origin=origin, destination=destination, routes=tuple(routes),
                    names=names, link_ids=link_ids, incidence=A,
                    node_seqs=tuple(nodes_of))


# ---------------------------------------------------------------------------
# Link costs


class LinkCostMatrix:
    """Non-decreasing scalar cost curve per (link, population).

    An optional toll decomposition tau_ep(y) = tau_e(y) + alpha_p * omega_e
    (common congestion curve plus population-scaled static toll) unlocks the
    potential-function machinery.
    """

    def __init__(self, link_ids, pop_ids, fns, *, common=None, omega=None, alpha=None):
        self.link_ids = tuple(link_ids)
        self.pop_ids = tuple(pop_ids)
        self.fns = [list(row) for row in fns]
        E, P = len(self.link_ids), len(self.pop_ids)
        if len(self.fns) != E or any(len(row) != P for row in self.fns):
            raise ValueError(f"need a {E}x{P} grid of cost curves")
        for e, row in enumerate(self.fns):
            for p, f in enumerate(row):
                if not f.is_nondecreasing():
                    raise ValueError(f"link cost for ({self.link_ids[e]}, "
                                     f"{self.pop_ids[p]}) is decreasing")
        self.common = tuple(common) if common is not None else None
        self.omega = np.asarray(omega, dtype=float) if omega is not None else None
        self.alpha = np.asarray(alpha, dtype=float) if alpha is not None else None
        self._affine = all(f.kind == "affine" for row in self.fns for f in row)
        if self._affine:
            self._a = np.array([[f.a for f in row] for row in self.fns])
            self._b = np.array([[f.b for f in row] for row in self.fns])

    @staticmethod
    def from_tolls(link_ids, pop_ids, common, omega, alpha) -> "LinkCostMatrix":
        common = list(common)
        omega = np.asarray(omega, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        fns = [[common[e].shifted(float(alpha[p] * omega[e]))
                for p in range(len(pop_ids))] for e in range(len(link_ids))]
        return LinkCostMatrix(link_ids, pop_ids, fns,
                              common=common, omega=omega, alpha=alpha)

    @property
    def has_tolls(self) -> bool:
        return self.common is not None

    def is_homogeneous(self) -> bool:
        return all(all(f == row[0] for f in row) for row in self.fns)

    def tau(self, y: np.ndarray) -> np.ndarray:
        """(links, populations) cost matrix at link flows y."""
        y = np.asarray(y, dtype=float)
        if self._affine:
            return self._a * y[:, None] + self._b
        out = np.empty((len(self.link_ids), len(self.pop_ids)))
        for e, row in enumerate(self.fns):
            for p, f in enumerate(row):
                out[e, p] = f(y[e])
        return out

    def slopes(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self._affine:
            return self._a * np.ones_like(y)[:, None]
        out = np.empty((len(self.link_ids), len(self.pop_ids)))
        for e, row in enumerate(self.fns):
            for p, f in enumerate(row):
                out[e, p] = f.deriv(y[e])
        return out

    def restrict(self, link_ids) -> "LinkCostMatrix":
        """Sub-matrix over a link subset, toll decomposition preserved."""
        idx = [self.link_ids.index(lid) for lid in link_ids]
        fns = [self.fns[e] for e in idx]
        common = [self.common[e] for e in idx] if self.has_tolls else None
        omega = self.omega[idx] if self.has_tolls else None
        return LinkCostMatrix(link_ids, self.pop_ids, fns,
                              common=common, omega=omega, alpha=self.alpha)


class RoutingCostField(CostField):
    """Route costs c = A^T tau(A x 1) with analytic partials.

    Carries the per-action aggregate capability exactly when routes are
    pairwise link-disjoint (each link flow then equals its route's total).
    """

    aggregate_only = True

    def __init__(self, incidence: np.ndarray, link_costs: LinkCostMatrix,
                 parallel: bool):
        self.A = np.asarray(incidence, dtype=float)
        self.link_costs = link_costs
        self.per_action_aggregate = bool(parallel)

    def __call__(self, x):
        y = self.A @ np.asarray(x, dtype=float).sum(axis=1)
        return self.A.T @ self.link_costs.tau(y)

    def aggregate_cost(self, w):
        if not self.per_action_aggregate:
            raise CapabilityError("routes share links; costs do not factor "
                                  "through per-action aggregates")
        y = self.A @ np.asarray(w, dtype=float)
        return self.A.T @ self.link_costs.tau(y)

    def jacobian(self, x):
        y = self.A @ np.asarray(x, dtype=float).sum(axis=1)
        T = self.link_costs.slopes(y)                       # (E, P)
        core = np.einsum("ei,ej,ep->ipj", self.A, self.A, T)
        R, P = core.shape[0], core.shape[1]
        D = np.empty((R, P, R, P))
        D[...] = core[:, :, :, None]
        return D


# ---------------------------------------------------------------------------
# Topology


@dataclass(frozen=True)
class Stage:
    origin: str
    destination: str
    link_ids: tuple[str, ...]
    segments: tuple[tuple[str, ...], ...]


@dataclass(frozen=True)
class TopologyClass:
    kind: str                                    # parallel | series_of_parallel | other
    stages: tuple[Stage, ...] | None
    route_stage_segments: tuple[tuple[int, ...], ...] | None

    @property
    def n_stages(self) -> int:
        return len(self.stages) if self.stages else 0


def classify_topology(graph: Multigraph, origin: str, destination: str,
                      route_set: RouteSet | None = None) -> TopologyClass:
    """Parallel / series-of-parallel / other, by cut-node decomposition.

    Parallel means no link lies on two routes. Otherwise, interior nodes
    shared by every route (in a consistent order) split the routes into
    stages; the class is series_of_parallel when every stage is parallel,
    stage link sets are disjoint, and the route set is the full product of
    stage segments.
    """
    rs = route_set if route_set is not None else enumerate_routes(graph, origin, destination)
    used = rs.incidence.sum(axis=1)
    used_ids = tuple(lid for e, lid in enumerate(rs.link_ids) if used[e] > 0)
    if used.max() <= 1:
        whole = Stage(origin=origin, destination=destination,
                      link_ids=used_ids, segments=rs.routes)
        return TopologyClass(kind="parallel", stages=(whole,),
                             route_stage_segments=tuple((r,) for r in range(rs.n_routes)))
    other = TopologyClass(kind="other", stages=None, route_stage_segments=None)
    common = set(rs.node_seqs[0][1:-1])
    for seq in rs.node_seqs[1:]:
        common &= set(seq[1:-1])
    if not common:
        return other
    order = [n for n in rs.node_seqs[0] if n in common]
    for seq in rs.node_seqs[1:]:
        if [n for n in seq if n in common] != order:
            return other
    cuts = [origin] + order + [destination]
    K = len(cuts) - 1
    seg_index: list[dict[tuple[str, ...], int]] = [{} for _ in range(K)]
    seg_lists: list[list[tuple[str, ...]]] = [[] for _ in range(K)]
    assignment = []
    for links, nodes in zip(rs.routes, rs.node_seqs):
        pos = [nodes.index(c) for c in cuts]
        idx = []
        for k in range(K):
            seg = tuple(links[pos[k]:pos[k + 1]])
            if seg not in seg_index[k]:
                seg_index[k][seg] = len(seg_lists[k])
                seg_lists[k].append(seg)
            idx.append(seg_index[k][seg])
        assignment.append(tuple(idx))
    # stage link sets must not overlap, and each stage must itself be parallel
    stage_links = []
    for k in range(K):
        lset = set(itertools.chain.from_iterable(seg_lists[k]))
        stage_links.append(lset)
        counts: dict[str, int] = {}
        for seg in seg_lists[k]:
            for lid in seg:
                counts[lid] = counts.get(lid, 0) + 1
        if max(counts.values()) > 1:
            return other
    for a in range(K):
        for b in range(a + 1, K):
            if stage_links[a] & stage_links[b]:
                return other
    # the route set must be the full product of stage segments
    want = set(itertools.product(*(range(len(s)) for s in seg_lists)))
    if set(assignment) != want or len(assignment) != len(want):
        return other
    stages = tuple(
        Stage(origin=cuts[k], destination=cuts[k + 1],
              link_ids=tuple(lid for lid in rs.link_ids if lid in stage_links[k]),
              segments=tuple(seg_lists[k]))
        for k in range(K))
    return TopologyClass(kind="series_of_parallel", stages=stages,
                         route_stage_segments=tuple(assignment))


# ---------------------------------------------------------------------------
# The lowered game


@dataclass(frozen=True)
class RoutingGame:
    graph: Multigraph
    route_set: RouteSet
    link_costs: LinkCostMatrix
    topology: TopologyClass
    game: PopulationGame

    @property
    def incidence(self) -> np.ndarray:
        return self.route_set.incidence


def build_routing_game(graph: Multigraph, origin: str, destination: str,
                       link_costs: LinkCostMatrix, populations, masses) -> RoutingGame:
    """Lower a routing instance to a population game over routes.

    All populations share the origin-destination pair, so every route is
    available to every population.
    """
    rs = enumerate_routes(graph, origin, destination)
    if tuple(link_costs.link_ids) != rs.link_ids:
        raise ValueError("link cost matrix must cover the graph's links in order")
    populations = tuple(populations)
    if tuple(link_costs.pop_ids) != populations:
        raise ValueError("link cost matrix population ids must match the game's")
    topo = classify_topology(graph, origin, destination, route_set=rs)
    field = RoutingCostField(rs.incidence, link_costs,
                             parallel=topo.kind == "parallel")
    mask = np.ones((rs.n_routes, len(populations)), dtype=bool)
    game = PopulationGame(populations=populations,
                          masses=np.asarray(masses, dtype=float),
                          actions=rs.names, mask=mask, costs=field)
    return RoutingGame(graph=graph, route_set=rs, link_costs=link_costs,
                       topology=topo, game=game)


def link_flow(route_set: RouteSet, x) -> np.ndarray:
    """Link flows y = A (x 1) induced by a configuration over routes."""
    x = np.asarray(x, dtype=float)
    return route_set.incidence @ x.sum(axis=1)


def route_costs(rgame: RoutingGame, y) -> np.ndarray:
    """(routes, populations) cost matrix at a given link flow vector."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("link flows must be nonnegative")
    return rgame.incidence.T @ rgame.link_costs.tau(y)


@dataclass(frozen=True)
class WardropReport:
    is_wardrop_witness: bool
    y: np.ndarray
    equilibrium: EquilibriumReport


def wardrop_check(rgame: RoutingGame, x, tol: float = 1e-8) -> WardropReport:
    """Link flow of x plus whether x witnesses it as an equilibrium flow."""
    x = validate_configuration(rgame.game, x)
    rep = classify_equilibrium(rgame.game, x, tol=tol)
    return WardropReport(is_wardrop_witness=rep.is_nash,
                         y=link_flow(rgame.route_set, x), equilibrium=rep)


# ---------------------------------------------------------------------------
# Series compositions and decoupled dynamics


def stage_games(rgame: RoutingGame) -> list[RoutingGame]:
    """Standalone routing game per stage of a series decomposition.

    Each stage keeps the full populations and masses; its route set must
    coincide with the stage's segments (recombinant paths inside a stage
    would break the correspondence and raise).
    """
    topo = rgame.topology
    if topo.stages is None or topo.n_stages < 2:
        raise CapabilityError("not a series composition: topology is "
                              f"{topo.kind!r} with {topo.n_stages} stage(s)")
    out = []
    for stage in topo.stages:
        links = [rgame.graph.link(lid) for lid in stage.link_ids]
        nodes = []
        for l in links:
            for n in (l.tail, l.head):
                if n not in nodes:
                    nodes.append(n)
        sub = Multigraph(nodes, links)
        costs = rgame.link_costs.restrict(stage.link_ids)
        sg = build_routing_game(sub, stage.origin, stage.destination, costs,
                                rgame.game.populations, rgame.game.masses)
        if set(sg.route_set.routes) != set(stage.segments):
            raise CapabilityError(f"stage {stage.origin}->{stage.destination} has "
                                  "routes outside the series decomposition")
        out.append(sg)
    return out


def marginal_stage_configuration(rgame: RoutingGame, stage_idx: int,
                                 stage_game: RoutingGame, x: np.ndarray) -> np.ndarray:
    """Stage configuration: composite route masses summed per stage segment."""
    topo = rgame.topology
    xk = np.zeros((stage_game.game.n_actions, stage_game.game.n_pops))
    segs = topo.stages[stage_idx].segments
    for r, idxs in enumerate(topo.route_stage_segments):
        seg = segs[idxs[stage_idx]]
        xk[stage_game.route_set.index_of(seg), :] += x[r, :]
    return xk


@dataclass(frozen=True)
class DecoupledReport:
    ok: bool
    max_error: float

    def __bool__(self) -> bool:
        return self.ok


def decoupled_check(protocol: RevisionProtocol, rgame: RoutingGame,
                    samples: int = 50, tol: float = 1e-10,
                    rng: np.random.Generator | None = None) -> DecoupledReport:
    """Does the composite target factor into independent per-stage choices?

    For sampled configurations, compares H_r against the product of the
    standalone stage targets over r's segments, divided by v_p per extra
    stage. Applies to series compositions only.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    stages = stage_games(rgame)
    topo = rgame.topology
    seg_route_idx = [[sg.route_set.index_of(seg) for seg in st.segments]
                     for sg, st in zip(stages, topo.stages)]
    game = rgame.game
    active = game.active_populations
    worst = 0.0
    for _ in range(samples):
        x = sample_configuration(game, rng)
        H = protocol.target(game, x)
        stage_targets = []
        for k, sg in enumerate(stages):
            xk = marginal_stage_configuration(rgame, k, sg, x)
            stage_targets.append(protocol.target(sg.game, xk))
        for r, idxs in enumerate(topo.route_stage_segments):
            for p in active:
                pred = 1.0
                for k, sg in enumerate(stages):
                    pred *= stage_targets[k][seg_route_idx[k][idxs[k]], p]
                pred /= game.masses[p] ** (len(stages) - 1)
                worst = max(worst, abs(H[r, p] - pred))
    return DecoupledReport(ok=bool(worst <= tol), max_error=float(worst))


def series_restriction_equivalence(rgame: RoutingGame, protocol: RevisionProtocol,
                                   x0, horizon: float, dt: float,
                                   stage_x0s: list | None = None) -> float:
    """Max link-flow gap between composite and standalone stage integrations.

    Stage initial conditions default to the marginalization of x0; explicit
    ones must induce the same initial stage link flows.
    """
    x0 = validate_configuration(rgame.game, x0)
    stages = stage_games(rgame)
    y0 = link_flow(rgame.route_set, x0)
    row = {lid: e for e, lid in enumerate(rgame.route_set.link_ids)}
    inits = []
    for k, sg in enumerate(stages):
        xk0 = (marginal_stage_configuration(rgame, k, sg, x0)
               if stage_x0s is None else np.asarray(stage_x0s[k], dtype=float))
        yk0 = link_flow(sg.route_set, xk0)
        ref = np.array([y0[row[lid]] for lid in sg.route_set.link_ids])
        if np.abs(yk0 - ref).max() > 1e-9:
            raise ValueError(f"stage {k} initial link flows inconsistent with "
                             "the composite initial condition")
        inits.append(xk0)
    traj = integrate(rgame.game, protocol, x0, horizon, dt)
    y = traj.link_flows(rgame.incidence)
    worst = 0.0
    for k, sg in enumerate(stages):
        traj_k = integrate(sg.game, protocol, inits[k], horizon, dt)
        yk = traj_k.link_flows(sg.incidence)
        cols = [row[lid] for lid in sg.route_set.link_ids]
        worst = max(worst, float(np.abs(y[:, cols] - yk).max()))
    return worst


# ---------------------------------------------------------------------------
# Potentials


def toll_sensitivity_potential(rgame: RoutingGame, x) -> float:
    """Potential for link costs tau_e(y) + alpha_p * omega_e.

    V(x) = sum_e integral_0^{y_e} tau_e + sum_p alpha_p sum_e omega_e y_e^(p)
    with y^(p) the population-p link flow. Its partial in x_ip is exactly
    the route cost c_ip, which is what makes V a potential; summing tolls
    against total flows instead would break that identity for P > 1.
    """
    lc = rgame.link_costs
    if not lc.has_tolls:
        raise CapabilityError("link costs do not declare a toll decomposition")
    x = np.asarray(x, dtype=float)
    A = rgame.incidence
    y = A @ x.sum(axis=1)
    V = sum(lc.common[e].integral(float(y[e])) for e in range(len(lc.link_ids)))
    y_per_pop = A @ x                                      # (E, P)
    V += float(np.sum(lc.alpha[None, :] * lc.omega[:, None] * y_per_pop))
    return float(V)


def routing_potential(rgame: RoutingGame):
    """Potential evaluator for instances that admit one.

    Toll decompositions use the toll-sensitivity potential; homogeneous
    instances (identical link costs across populations) use the plain
    congestion integral. Anything else has no declared potential.
    """
    lc = rgame.link_costs
    if lc.has_tolls:
        return lambda x: toll_sensitivity_potential(rgame, x)
    if lc.is_homogeneous():
        A = rgame.incidence
        fns = [row[0] for row in lc.fns]

        def V(x):
            y = A @ np.asarray(x, dtype=float).sum(axis=1)
            return float(sum(f.integral(float(ye)) for f, ye in zip(fns, y)))

        return V
    raise CapabilityError("no potential structure: need a toll decomposition "
                          "or homogeneous link costs")
