"""Head-and-neck tumor segmentation on MRI with a dual-stream UNet.

A small numpy autograd engine drives 3D encoder-decoder networks, a
preprocessing chain, SGD training with deep supervision and MixUp, and
sliding-window inference scored by the aggregated Dice coefficient.
"""

from .inference import aggregated_dsc, ensemble, sliding_window, tta_flips
from .models import BasicSegNet, DualFlowUNet, ModelConfig, build_model
from .tensor import Tensor, no_grad
from .volume import Volume, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "BasicSegNet",
    "DualFlowUNet",
    "ModelConfig",
    "Tensor",
    "Volume",
    "aggregated_dsc",
    "build_model",
    "ensemble",
    "no_grad",
    "read_volume",
    "sliding_window",
    "tta_flips",
    "write_volume",
]
