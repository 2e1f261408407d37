"""Service configuration."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SidecarConfig:
    """Which model to serve and how.

    model_name is anything transformers can load (a hub id or a local
    directory). layer is the default hidden-state index used when a request
    does not specify one; requests may pick any layer below the model depth.
    """

    model_name: str
    layer: int = 0
    device: str = "cpu"
    max_text_length: int = 4096

    def __post_init__(self):
        if self.layer < 0:
            raise ValueError("layer must be nonnegative")
        if self.max_text_length <= 0:
            raise ValueError("max_text_length must be positive")
