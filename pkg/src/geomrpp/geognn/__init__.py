"""Geometric graph network: encoder, interaction layers, action mapper."""
from .basis import BasisConfig, bbf, rbf, sbf, spherical_bessel_roots
from .model import (ActionMapper, DimeConv, Encoder, GeoGNN, GraphBatch, InteractionLayer,
                    ModelConfig, action_of, forward_centralized)

__all__ = [
    "ActionMapper", "BasisConfig", "DimeConv", "Encoder", "GeoGNN", "GraphBatch",
    "InteractionLayer", "ModelConfig", "action_of", "bbf", "forward_centralized", "rbf", "sbf",
    "spherical_bessel_roots",
]
