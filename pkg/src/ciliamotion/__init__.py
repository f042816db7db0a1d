"""Automated ciliary-motion analysis: segmentation, flow invariants, patch
sampling, and sequence classification, built on a small float64 autodiff core."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad
from .containers import VideoClip, load_manifest, read_tensor, read_video, write_tensor, write_video
from .flow import FlowField, InvariantField, clip_flow, horn_schunck, invariants, rotation_sequence

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "VideoClip",
    "load_manifest",
    "read_tensor",
    "read_video",
    "write_tensor",
    "write_video",
    "FlowField",
    "InvariantField",
    "clip_flow",
    "horn_schunck",
    "invariants",
    "rotation_sequence",
    "__version__",
]
