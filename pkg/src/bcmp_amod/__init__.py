"""Closed queueing-network models of autonomous mobility-on-demand fleets.

Stations are single-server queues, roads are infinite-server queues, and
vehicles switch origin-destination class when they reach a destination.
"""

from .analysis import (
    ProductFormModel,
    asymptotic_metrics,
    brute_force_stationary,
    bpr_time,
    convolution_G,
    expected_bpr_deviation,
    marginal_distribution,
    marginal_table,
    mva,
    mva_sweep,
)
from .network import (
    AmodNetwork,
    DemandSet,
    NetworkValidationError,
    RoadGraph,
    RoutingPolicy,
    assemble_routing_matrix,
    build_network,
    shortest_path_policy,
)
from .optimizer import (
    InfeasibleLPError,
    adjust_capacity,
    analyze_policy,
    decompose_to_policy,
    finite_m_gap,
    solve_a_oscarr,
    verify_balance,
)
from .scenario import load_scenario, parse_scenario
from .simulator import SimConfig, SimReport, occupancy_histogram, simulate
from .traffic import fold_check, solve_traffic_equations, utilization_profile

__version__ = "0.1.0"
