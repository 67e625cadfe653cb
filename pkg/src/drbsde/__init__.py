"""Doubly reflected backward equations with a default time on binomial lattices and simulated paths."""
from .dynkin import GameSpec, StoppingRule, brute_force_value, ef_evaluate, payoff, saddle_from_solution, verify_saddle
from .errors import (AssumptionPError, BarrierError, ConfigurationError, ConsistencyError, DRBSDEError, DriverError,
                     HypothesisError, NumericRangeError, PreconditionError, RegressionError, RuleError, SizeError,
                     UndefinedNodeError)
from .filtration import (AdaptedProcess, AzemaBundle, DefaultLaw, LatticeModel, Measure, build_azema, build_model,
                         conditional_expectation, martingale_decompose, operator_T, reweight_to_Q)
from .links import first_link_check, project_second_link, verify_integrability_transfer
from .montecarlo import (BlackScholesConfig, CoxIntensity, MCConfig, MCEstimate, MCProblem, PathBatch, RegressionBasis,
                         apply_cox_default, black_scholes_example, lsmc_solve_drbsde, simulate_paths)
from .solver import (DRBSDEProblem, DRBSDESolution, DriverSpec, check_comparison, solve_bsde, solve_drbsde,
                     solve_penalized, weighted_norms)

__version__ = "0.1.0"
