"""Distribution-system state estimation with unsynchronized SCADA and PMU data."""
from .chi2 import chi2_cdf, chi2_threshold
from .estimator import (EstimationResult, EstimatorDivergence, EstimatorObservabilityError, WeightMatrix,
                        cme_analysis, projection_and_indices, truncation_error, two_step_estimate, wls_solve)
from .experiment import (ExperimentMetrics, GrossError, ScenarioConfig, ScenarioError, fpr_summary, run_paired,
                         run_scenario, se_error)
from .grid import (Branch, Bus, CaseError, GridModel, PowerFlowDivergence, SingularBranchError, TrueState,
                   ac_power_flow, build_ybus, load_case, parse_case, power_flow_batch)
from .measurements import (MeasurementDef, MeasurementPlan, MeasurementSample, MeterSigmas, ObservabilityError,
                           PlanFunctions, apply_noise, build_plan, check_observable, generate_synthetic,
                           greedy_pmu_placement)
from .ou import OuLoadState, OuParams, OuPath, sample_step, stale_variance, variance_update
from .scheduler import ArrivalEvent, Schedule, SimulationSetup, Timeline, build_schedule, events_at, snapshot_stream

__version__ = "0.1.0"
