"""Feature-export helper producing shapeminer-format artifacts from images."""

from .backbones import ModelUnavailableError, make_backbone
from .export import AugmentationSpec, ExportJob, export_features

__all__ = [
    "AugmentationSpec",
    "ExportJob",
    "ModelUnavailableError",
    "export_features",
    "make_backbone",
]
