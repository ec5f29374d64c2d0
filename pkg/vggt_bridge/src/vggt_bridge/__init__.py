"""Adapter exporting pointmap-model output as PMAP interchange files."""

from .backends import Backend, SyntheticBackend, VGGTBackend, ViewPrediction
from .errors import BridgeError
from .exporter import export
from .pmap import read_pmap, write_pmap

__all__ = [
    "Backend",
    "BridgeError",
    "SyntheticBackend",
    "VGGTBackend",
    "ViewPrediction",
    "export",
    "read_pmap",
    "write_pmap",
]
