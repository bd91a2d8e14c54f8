"""Game-theoretic collaborative perception simulator: clustering, sidelink scheduling and baselines."""
from .channel import ChannelConfig, ChannelRealization, Schedule, Upload, validate_schedule
from .coalition import CoalitionConfig, Partition, form_clusters
from .metrics import CycleReport, RunSummary, aggregate_run, comm_overhead
from .perception import UtilityCurve, system_utility
from .scheduling import SCHEDULERS, SchedulerConfig, SchedulingContext, run_pdpg
from .world import ScenarioConfig, VehicleState, World

__version__ = "0.1.0"
