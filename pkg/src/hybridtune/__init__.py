"""Hybrid-tuning adapters for frozen vision transformers, built on a small numpy autodiff core."""

from .adapter import HTConfig, HTParams, LoRAParams, attach_ht, ht_forward, ht_param_count, lora_attach
from .backbone import ViTConfig, ViTWeights, init_backbone, text_encode, vit_forward
from .errors import HybridTuneError
from .tensor import Tensor, backward, core_op_set, finite_diff_grad

__version__ = "0.1.0"

__all__ = [
    "HTConfig", "HTParams", "LoRAParams", "attach_ht", "ht_forward", "ht_param_count", "lora_attach",
    "ViTConfig", "ViTWeights", "init_backbone", "text_encode", "vit_forward",
    "HybridTuneError", "Tensor", "backward", "core_op_set", "finite_diff_grad",
]
