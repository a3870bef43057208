"""Mean-field LQG with a major agent and a cooperating minor population.

Riccati solves, the consistency-condition system, decentralized strategies,
finite-population simulation and the asymptotic-optimality experiments.
"""

__version__ = "0.1.0"

from .model import Model, TimeGrid, load_scenario, model_from_dict, validate_assumptions
from .riccati import solve_major_riccati, solve_minor_riccati
from .ccfield import (StackedCC, DecouplingField, assemble_stacked, contraction_report,
                      solve_cc_decoupling, solve_cc_picard, sample_cc_paths)
from .population import (StrategyProfile, simulate_population, evaluate_costs,
                         build_social_oracle, frechet_gap)
from .verify import (ConvergenceTable, SlopeFit, sweep_population, fit_slope,
                     adjoint_representation, estimate_h4, prepare)
