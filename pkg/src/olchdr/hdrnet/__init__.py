from .model import ABLATIONS, HdrArch, HdrModel, VqPrior, build_inputs, inputs_to_tensor
from .train import (HdrTrainConfig, hdr_losses, infer, load_hdr_checkpoint, load_prior, mapping_loss,
                    train_hdr, train_psnr_mu)
from .units import AlignmentUnit, FuseUnit, MergeUnit, residual_affine

__all__ = [
    "ABLATIONS", "AlignmentUnit", "FuseUnit", "HdrArch", "HdrModel", "HdrTrainConfig", "MergeUnit",
    "VqPrior", "build_inputs", "hdr_losses", "infer", "inputs_to_tensor", "load_hdr_checkpoint",
    "load_prior", "mapping_loss", "residual_affine", "train_hdr", "train_psnr_mu",
]
