"""Universal contrastive learning with pair-gated subspaces, at desk scale."""

from .analysis import (
    distribution_overlap,
    gate_report,
    kmeans_pseudo_labels,
    knn_eval,
    lowest_variance_subspace,
    similarity_distributions,
    singular_spectrum,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledBatch, SynthSpec, gen_hierarchical, load_table
from .loss import LossConfig, ucl_batch_loss
from .model import ModelConfig, embed, init_params
from .trainer import TrainConfig, train

__version__ = "0.1.0"
