"""BalaGAN: cross-modal image translation between imbalanced domains.

Pipeline stages: split construction (`data`), latent modality discovery
(`modality`), translation networks (`networks`), training objectives
(`losses`), the adversarial trainer (`training`), and evaluation
(`evaluation`). The `balagan` CLI exposes each stage as a subcommand.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .data import (AugmentationConfig, AugmentationSpec, ImageBatch,
                   SplitManifest, augment_pair, build_imbalanced_split,
                   load_batch)
from .evaluation import (ActivationStats, compute_activation_stats,
                         diversity_grid, evaluate_checkpoint, fid, k_sweep,
                         translate_dataset)
from .losses import LossWeights
from .modality import (ClusterModel, ModalityAssignment, StyleEncoder,
                       assign_modalities, choose_k, embed, nt_xent_loss,
                       spherical_kmeans, train_style_encoder)
from .networks import Discriminator, Generator, adain, translate
from .training import (ClassSet, TrainState, build_class_set, load_checkpoint,
                       sample_batch, save_checkpoint, train, train_step)

__all__ = [
    "ActivationStats", "AugmentationConfig", "AugmentationSpec", "ClassSet",
    "ClusterModel", "Discriminator", "Generator", "ImageBatch", "LossWeights",
    "ModalityAssignment", "RunConfig", "SplitManifest", "StyleEncoder",
    "TrainState", "adain", "assign_modalities", "augment_pair",
    "build_class_set", "build_imbalanced_split", "choose_k",
    "compute_activation_stats", "diversity_grid", "embed",
    "evaluate_checkpoint", "fid", "k_sweep", "load_batch", "load_checkpoint",
    "nt_xent_loss", "sample_batch", "save_checkpoint", "spherical_kmeans",
    "train", "train_step", "train_style_encoder", "translate",
    "translate_dataset",
]
