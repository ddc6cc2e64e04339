"""Energy-optimal car-following lab: physics-informed learning control,
an adjoint-MPC baseline, and a receding-horizon evaluation harness."""

from .vehicle import VehicleParams, EgoState, RewardWeights, ConstraintSpec
from .transcription import TranscriptionConfig, PolySegment, TrafficSubstate
from .envmodel import AugmentedState, EpisodeSpec, CarFollowModel, CarFollowEnv

__version__ = "0.1.0"
