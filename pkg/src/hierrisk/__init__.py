"""Risk-adjusted event counts for two-level recurrent-event data."""

from .cox import (FitConfig, FrailtyFit, HazardTable, RandomEffectSpec, breslow_hazard,
                  fit_cox, fit_frailty, fit_model, partial_loglik)
from .data import (AtRiskRow, Dataset, GroupId, IntervalRules, build_at_risk_intervals,
                   load_dataset, observed_by_program, observed_events, write_dataset)
from .errors import (ConvergenceError, DegenerateTestError, NumericalError, SchemaError,
                     SelectionError, ValidationError)
from .imputation import (MIStack, assemble_mi_stack, fill_missing, load_mi_stack,
                         locf_nocb, windowed_max_fill)
from .pooling import PooledEstimate, SelectionTrace, rubin_pool, stepdown_select
from .predict import (ProgramPrediction, expected_by_program, expected_events,
                      pool_expected, predict_programs)
from .simulate import SimConfig, SimTruth, gen_dataset, sim_diagnostics
from .variance import (BlockPlan, VarianceReport, block_jackknife_variance, block_partition,
                       confidence_interval, coverage, loo_jackknife_variance, mi_variance,
                       total_variance, z_test)

__version__ = "0.1.0"
