"""Synchronized Fleming-Viot particle systems for killed Markov processes.

Simulation engine (:mod:`fvlab.engine`), exact finite-state oracles
(:mod:`fvlab.oracle`), model definitions (:mod:`fvlab.models`), the
replication/validation harness (:mod:`fvlab.stats`) and a command-line front
end (:mod:`fvlab.cli`).
"""

from .engine import (ConfigError, EnsembleState, FVConfig, FVRunRecord,
                     NonTerminationError, batch_size_from_theta, branch_step,
                     estimators_at_T, rho_estimator, run_fv)
from .models import (CEMETERY, CtmcModel, DiffusionModel, SkeletonSegment,
                     TestFunction, advance_with_skeleton, is_cemetery, load_model,
                     model_from_dict, pure_death, random_ctmc, sample_initial)
from .oracle import (BoundaryWarning, DegenerateQuantileError, OracleReport,
                     QuantileGrid, compute_oracle_report, cost_model, h_theta,
                     quantile_times, relative_variance_bounds, semigroup_apply,
                     sigma2_classical, sigma2_sync, sigma2_sync_alt,
                     survival_curve, survival_probability)
from .stats import (CostReport, CriterionCheck, ReplicaSummary, Tolerances,
                    clt_report, cost_report, evaluate_criteria, run_replicas)

__version__ = "0.1.0"
