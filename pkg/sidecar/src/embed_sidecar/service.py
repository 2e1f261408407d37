"""Model wrapper: deterministic per-token hidden states.

One model instance, one lock: requests are serialized, so callers should
treat the service as a slow external dependency. No pooling is applied; the
full (tokens, dim) matrix of the requested layer is returned so clients can
cross-attend over the tokens themselves.
"""
from __future__ import annotations

import threading

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer

from .config import SidecarConfig


class LayerOutOfRange(ValueError):
    pass


class TextTooLong(ValueError):
    pass


class EmbeddingService:
    def __init__(self, config: SidecarConfig):
        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(config.model_name)
        self.model = AutoModel.from_pretrained(config.model_name)
        self.model.to(config.device)
        self.model.eval()
        self.depth = int(self.model.config.num_hidden_layers)
        if config.layer >= self.depth:
            raise LayerOutOfRange(
                f"default layer {config.layer} out of range (model depth {self.depth})"
            )
        self._lock = threading.Lock()

    def embed(self, text: str, layer: int | None = None) -> np.ndarray:
        """(tokens, dim) float32 hidden states of the requested layer.

        Layer k is the output of transformer block k; valid k < model depth.
        Deterministic: eval mode, no dropout, no sampling.
        """
        if not text:
            raise ValueError("cannot embed empty text")
        if len(text) > self.config.max_text_length:
            raise TextTooLong(
                f"text length {len(text)} exceeds limit {self.config.max_text_length}"
            )
        if layer is None:
            layer = self.config.layer
        if not (0 <= layer < self.depth):
            raise LayerOutOfRange(
                f"layer {layer} out of range (model depth {self.depth})"
            )
        with self._lock:
            encoded = self.tokenizer(
                text,
                return_tensors="pt",
                truncation=True,
                max_length=getattr(self.model.config, "max_position_embeddings", 512),
            ).to(self.config.device)
            with torch.no_grad():
                out = self.model(**encoded, output_hidden_states=True)
            # hidden_states[0] is the embedding output; block k lives at k+1
            hidden = out.hidden_states[layer + 1][0]
            return hidden.to(torch.float32).cpu().numpy()
