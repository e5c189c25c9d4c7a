"""rmtlab: segment-level recurrent transformers with token memory."""

from .backbone import (ModelConfig, build_cache_extended_mask,
                       build_causal_mask, build_rmt_mask, forward_stack,
                       init_params)
from .mechanisms import LayerCache, MechanismKind
from .tensor import Tensor, backward, detach, finite_difference_grad, no_grad
from .trainer import TrainConfig, Trainer, split_into_segments, truncated_bptt_step

__all__ = [
    "ModelConfig", "MechanismKind", "LayerCache", "Tensor", "TrainConfig",
    "Trainer", "backward", "detach", "finite_difference_grad", "no_grad",
    "build_causal_mask", "build_rmt_mask", "build_cache_extended_mask",
    "forward_stack", "init_params", "split_into_segments",
    "truncated_bptt_step",
]

__version__ = "0.1.0"
