"""Flow-guided prediction of bird's-eye-view semantic grids."""
from .baseline import GridPrediction, baseline_constant_velocity, baseline_persistence
from .config import RunConfig
from .dataset import Window, make_windows, stack_windows
from .estimators import ConstantVelocityPredictor, FlowGuidedPredictor, PersistencePredictor
from .grid import (
    FlowGrid,
    Frame,
    FrameSequence,
    GridGeometry,
    OccupancyStateGrid,
    Pose2D,
    SemanticGrid,
    VehicleInstance,
    VelocityGrid,
    to_allocentric,
)
from .losses import LossWeights, total_loss
from .metrics import evaluate, iou, pr_auc, retention
from .model import FlowGuidedNet, NetConfig
from .scene import ScenarioConfig, SensorNoise, VehicleSpec, ground_truth_flow, random_scenario, simulate
from .warp import WarpConfig, warp, warp_rollout

__version__ = "0.1.0"
