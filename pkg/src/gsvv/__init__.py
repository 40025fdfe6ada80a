"""Scalable vector quantization, tiled LoD streaming and color-adaptive
rendering for Gaussian-splat volumetric video."""

__version__ = "0.1.0"

from .errors import GsvvError, ParseError, ValidationError
from .gaussian_model import (
    DifferentialFrame,
    Gaussian,
    GaussianFrame,
    apply_differential,
    diff_frames,
    load_frame,
    save_frame,
)
from .renderer import Camera, RenderOutput, render
from .svq import AttributeSpec, SvqCodebook, build_codebook, decode, encode

__all__ = [
    "GsvvError", "ParseError", "ValidationError",
    "Gaussian", "GaussianFrame", "DifferentialFrame",
    "load_frame", "save_frame", "apply_differential", "diff_frames",
    "Camera", "RenderOutput", "render",
    "AttributeSpec", "SvqCodebook", "build_codebook", "encode", "decode",
]
