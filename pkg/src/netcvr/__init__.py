"""Cascaded delayed-feedback NetCVR simulator and online learner."""

from .domain import ClickEvent, EventTable, TrajectoryType, WindowConfig, resolve_labels
from .datagen import GroundTruthConfig, generate_log, generate_table, probe_truth
from .stream import DeliveryKind, SplitPlan, build_delivery_schedule, iterate_protocol
from .model import CascadeModel, ModelConfig
from .objective import RankingConfig, cvr_weights, rfr_weights
from .metrics import MetricsReport, TaskMetrics

__version__ = "0.1.0"
