"""Neural-network BSDE solvers for exposures and valuation adjustments."""

from .market import (MarketModel, PathBatch, TimeGrid, build_time_grid, derive_seed, simulate, simulate_euler,
                     simulate_exact)
from .neural import AdamConfig, AdamState, NetworkParams, adam_step, backward, forward, init_network, jacobian
from .bsde import (BsdeProblem, SolverConfig, TrainedBsde, TrainingDiverged, ValuePaths, evaluate, loss,
                   polish_xi, rollout, train)
from .xva import (NO_COLLATERAL, Adjustment, ClaimSolution, CollateralSpec, Curve, EuropeanClaim, ExposureProfile,
                  XvaRates, XvaSolution, a_posteriori_bound, adjustment_mc, aggregate_portfolio,
                  basket_call_claim, call_claim, clean_claim_problem, collateral, cva_dva_integrand,
                  exposure_profile, forward_claim, outer_paths, portfolio_paths, sensitivities, solve_xva,
                  train_claims, xva_driver, xva_paths)
from .oracles import OraclePrice, bs_call, finite_diff_jacobian, forward_exposures, fva_by_discounting, mc_price

__version__ = "0.1.0"
