"""Frame interpolation for equirectangular 360-degree video."""
from .geometry import condition_map, weight_map
from .loss import WssL1Config, wss_l1
from .metrics import evaluate_pair, psnr, ssim, ws_psnr, ws_ssim
from .model import OmniVFINet

__version__ = "0.1.0"

__all__ = [
    "OmniVFINet",
    "WssL1Config",
    "condition_map",
    "evaluate_pair",
    "psnr",
    "ssim",
    "weight_map",
    "ws_psnr",
    "ws_ssim",
    "wss_l1",
]
