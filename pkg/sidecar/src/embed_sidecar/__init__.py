"""Embedding sidecar: language-model hidden states behind HTTP POST /embed."""

from .config import SidecarConfig
from .service import EmbeddingService

__version__ = "0.1.0"
__all__ = ["EmbeddingService", "SidecarConfig"]
