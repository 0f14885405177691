from .checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .layers import DFTLayer, DistortionGuard, OmniFTB, backward_warp, dft_apply
from .network import (
    ABLATION_VARIANTS,
    DEFAULT_CHANNELS,
    BilateralFlow,
    InterpolationOutput,
    OmniVFINet,
    count_parameters,
)
