"""Bridge from a pretrained open-vocabulary detector to the craterkit
interchange files (predictions JSON-lines plus the anchor JSON)."""
from .backends import BackendUnavailable, Owlv2Backend, SyntheticBackend, make_backend
from .export import export_anchor, export_predictions, tile_key_from_stem
from .manifest import ExportManifest

__version__ = "0.1.0"

__all__ = [
    "BackendUnavailable",
    "ExportManifest",
    "Owlv2Backend",
    "SyntheticBackend",
    "export_anchor",
    "export_predictions",
    "make_backend",
    "tile_key_from_stem",
]
