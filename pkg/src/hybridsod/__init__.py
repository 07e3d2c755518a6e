"""Saliency detection from a few real labels and many coarse ones."""

from .config import RunConfig, load_config
from .data import (ContaminationSpec, GroupPartition, LabelKind, Sample, contaminate,
                   generate_coarse_label, mbd_transform, partition)
from .estimators import CoarseLabeler, HybridLabelSOD, check_images, check_maps
from .exceptions import (ConfigError, DataError, HybridSODError, MisuseError, PipelineStateError,
                         ShapeError, TrainingAborted)
from .losses import LossWeights, bce, rnet_loss
from .metrics import MetricsReport, evaluate_corpus, mae, max_f, pr_curve, s_measure
from .orchestrator import (CredibilityState, EventLog, IterationPlan, Pipeline, Schedule,
                           build_schedule, credibility_gate)
from .rnet import RefinementNetwork, RNetConfig, predict_pseudo_labels
from .snet import ReferenceSNet, SaliencyNetwork, SNetConfig

__version__ = "0.1.0"
