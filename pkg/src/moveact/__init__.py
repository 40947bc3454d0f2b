"""Consistent image editing: move an object into a user box and edit its action.

Two branches only — inversion (with the latent-update loop that transfers the
object's cross-attention mass into the target box) and editing (with
inversion-stage self-attention K/V injected for appearance and background
consistency).
"""

from .backbone import ToyBackbone, create_backbone
from .config import Config, load_config
from .pipeline import EditRequest, EditResult, InversionTrace, edit, invert, run_edit
from .regions import BoundingBox

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Config",
    "EditRequest",
    "EditResult",
    "InversionTrace",
    "ToyBackbone",
    "create_backbone",
    "edit",
    "invert",
    "load_config",
    "run_edit",
]
