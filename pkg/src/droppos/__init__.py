"""DropPos: self-supervised position reconstruction for small Vision Transformers."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, FormatError, TrainingDiverged
from .tensor import Tensor, backward, grad_check, no_grad
from .vit import ViTConfig, build_sincos_pe, patchify, unpatchify
from .task import (
    DropPosModel,
    TaskConfig,
    affinity,
    assemble_pe,
    droppos_loss,
    forward_step,
    sample_patch_mask,
    sample_position_mask,
    sigma_at,
    smoothing_matrix,
)
from .data import ImageDataset, batches, gen_synthetic, read_cifar10_bin, synthetic_dataset
from .train import TrainConfig, adamw_step, load_checkpoint, lr_at, pretrain, save_checkpoint
from .evaluate import (
    accuracy_grid,
    linear_class_probe,
    linear_position_probe,
    position_accuracy,
    render_reconstruction,
)
