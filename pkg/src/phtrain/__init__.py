"""Personal Health Train simulation: trains travel to stations, data stays put."""

from .bundle import ModelSpec, TaskSpec, TrainBundle, TrainRegistry, commit, create_train
from .learner import ModelParameters, TrainingConfig, forward, train_local
from .metrics import ConfusionMatrix, mean_accuracy_literal, mean_accuracy_per_class, mean_recall
from .orchestrator import ExperimentPlan, Policy, aggregate, run_centralized, run_fl, run_iil
from .partition import DatasetShard, PartitionSpec, split
from .preprocess import AugmentConfig, RawImage
from .station import Station, StationConfig, StationStore, ingest, resolve_dataset

__version__ = "0.1.0"
