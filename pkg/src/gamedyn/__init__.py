"""Population games, noisy best-response dynamics, and routing on multigraphs."""

from .game import (
    AggregateCostField,
    CallableCostField,
    CapabilityError,
    ConfigurationError,
    CostEvalError,
    CostField,
    EquilibriumReport,
    PopulationGame,
    ScalarFn,
    aggregate_flow,
    best_response_sets,
    classify_equilibrium,
    cost_jacobian,
    evaluate_costs,
    isolation_probe,
    monomorphic_vertices,
    potential_symmetry_check,
    sample_configuration,
    uniform_configuration,
    validate_configuration,
    vertex_configuration,
)
from .logit import (
    ContractionReport,
    FixedPointResult,
    LogitJacobian,
    StabilityInfo,
    StrictBasinEstimate,
    contraction_margin,
    fixed_point,
    high_noise_threshold,
    local_stability,
    logit_jacobian,
    logit_map,
    strict_basin_estimate,
)
from .dynamics import (
    RateFit,
    ReducedSystem,
    RevisionProtocol,
    Trajectory,
    aggregate_dynamics,
    exact_target_check,
    integrate,
    l1_contraction_test,
    logit_protocol,
    monotonicity_check,
    recover_configuration_limit,
    verify_protocol,
)
from .routing import (
    Link,
    LinkCostMatrix,
    Multigraph,
    RouteError,
    RouteSet,
    RoutingGame,
    TopologyClass,
    build_routing_game,
    classify_topology,
    decoupled_check,
    enumerate_routes,
    link_flow,
    route_costs,
    routing_potential,
    series_restriction_equivalence,
    stage_games,
    toll_sensitivity_potential,
    wardrop_check,
)
from .analysis import (
    EquilibriumCurve,
    NoiseSweep,
    bifurcation_scan,
    continuation_sweep,
    homogeneous_aggregate_potential,
    limit_equilibria_estimate,
    lyapunov_check,
)
from .scenario import Scenario, ScenarioError, load_scenario

__version__ = "0.1.0"
