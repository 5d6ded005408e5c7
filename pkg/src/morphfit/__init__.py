"""Blendshape head model, scan fitting, supervision losses and evaluation metrics."""
from .kernels import BACKEND
from .model import ModelAsset, ParamVector, forward, forward_jacobian, project, synth_model

__version__ = "0.1.0"

__all__ = ["BACKEND", "ModelAsset", "ParamVector", "forward", "forward_jacobian", "project", "synth_model"]
