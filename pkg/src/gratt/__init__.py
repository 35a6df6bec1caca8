"""Gated residual attention for frame-to-frame query propagation, on a numpy autodiff engine."""

from gratt.decoder import DecoderConfig, GatePlacement, MaskConfig, decoder_forward
from gratt.gating import GateMode
from gratt.propagation import GRAttModel, TrainConfig, propagate_clip, train
from gratt.synthworld import ScenarioSpec, generate_scene

__all__ = [
    "DecoderConfig",
    "GateMode",
    "GatePlacement",
    "GRAttModel",
    "MaskConfig",
    "ScenarioSpec",
    "TrainConfig",
    "decoder_forward",
    "generate_scene",
    "propagate_clip",
    "train",
]
__version__ = "0.1.0"
