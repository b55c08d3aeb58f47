"""Outage analysis and energy-efficiency optimization for network-coded
multi-user relay networks with energy harvesting and inter-user energy
transfer."""

from .model import (
    ScenarioConfig,
    LinkCoefficients,
    Policy,
    EnergyLedger,
    FeasibilityReport,
    compute_link_coefficients,
    energy_ledger,
    energy_efficiency,
    total_energy,
    validate_policy,
    load_scenario,
    save_scenario,
    zero_policy,
)
from .outage import (
    OutageReport,
    MonomialTable,
    SubsetTables,
    subset_tables,
    per_link_outage_exact,
    per_link_outage_approx,
    relay_decode_prob,
    network_outage_exact,
    network_outage_approx,
    network_outage_report,
    build_outage_tables,
    outage_value_grad_hess,
)
from .solver import (
    SolverOptions,
    SolveResult,
    InfeasibleError,
    dinkelbach_optimize,
    evaluate_V_prime,
    inner_solve,
    transform_policy,
    inverse_transform_policy,
)
from .baselines import (
    BASELINE_KINDS,
    PolicyEvaluation,
    BruteForceResult,
    GridSpec,
    as_evaluation,
    brute_force_optimize,
    depleted_energy_policy,
    no_transfer_policy,
    nonc_df_policy,
    per_user_outage_exact,
    relay_assignment,
    uniform_power_policy,
)
from .montecarlo import (
    RngSpec,
    TrialOutcome,
    MonteCarloResult,
    sample_channel_power_gain,
    simulate_period,
    estimate_outage,
    wilson_interval,
)

__version__ = "0.1.0"
