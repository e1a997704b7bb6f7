"""Desk-scale test-time adaptation pipeline on synthetic shift benchmarks."""

from .adapt import AdaptConfig, AdaptReport, adapt, partition_parameters
from .data import (AugmentationPolicy, Dataset, GeneratorSpec, ImbalanceSpec,
                   ShiftSpec, UnlabeledView, apply_shift, augment, generate,
                   load_dataset, save_dataset, subsample_longtail)
from .distill import (CalibrateConfig, DistillConfig, PhaseSchedule, PseudoLabels,
                      ScaleVector, calibrate_classifier, distill, pseudo_label,
                      run_phase)
from .harness import ExperimentConfig, compare, run_experiment, run_seed
from .layers import ArchSpec, Network, build_network
from .metrics import MetricsReport, evaluate
from .optim import SGD, Schedule
from .selfsup import (ContrastiveConfig, InitializedStudent, make_student,
                      pretrain, random_backbone)
from .source import SourceConfig, train_source
from .tensor import Tensor

__version__ = "0.1.0"
