"""Textual input decks and their context embeddings.

A deck is a one-sentence natural-language description of a simulation
(simulator, material, loading, prediction target) rendered from a controlled
vocabulary. Decks are embedded into a T x D context matrix either by a remote
sidecar wrapping a language model (HTTP POST /embed) or by a deterministic
offline fallback, with a persistent content-addressed cache in front.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import requests

from .core import material_registry

SIMULATIONS = ("rule-based", "phase-field", "discrete–finite-element")
BOUNDARIES = ("axial loading", "biaxial loading")
TARGETS = ("fracture pattern", "time to failure", "dynamic trajectory")

PROGRESSION_RANGE = (0.3, 1.0)

_SIM_PHRASE = {
    "rule-based": "rule-based method",
    "phase-field": "phase-field method",
    "discrete–finite-element": "discrete–finite-element method",
}
_TARGET_PHRASE = {
    "fracture pattern": "final fracture pattern",
    "time to failure": "time to failure",
    "dynamic trajectory": "dynamic trajectory",
}
_DISPLAY = {"pbx": "PBX"}


class EmbedTransportError(Exception):
    """Sidecar unreachable or timed out; callers may fall back."""


class EmbedProtocolError(Exception):
    """Sidecar answered, but outside the protocol (non-200 or bad payload)."""


@dataclass(frozen=True)
class DeckMeta:
    """Controlled-vocabulary metadata rendered into a deck."""

    simulation: str
    material: str
    boundary: str
    target: str
    progression: float | None = None

    def __post_init__(self):
        if self.simulation not in SIMULATIONS:
            raise ValueError(f"simulation not in vocabulary: {self.simulation!r}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary not in vocabulary: {self.boundary!r}")
        if self.target not in TARGETS:
            raise ValueError(f"target not in vocabulary: {self.target!r}")
        if (self.progression is not None) != (self.target == "dynamic trajectory"):
            raise ValueError("progression must be present iff target is dynamic trajectory")
        if self.progression is not None and not (
            PROGRESSION_RANGE[0] <= self.progression <= PROGRESSION_RANGE[1]
        ):
            raise ValueError(f"progression must lie in {PROGRESSION_RANGE}")


def render_deck(meta: DeckMeta, materials: dict | None = None) -> str:
    """Deterministic long-form deck text; byte-identical for identical meta."""
    known = materials if materials is not None else material_registry()
    if meta.material not in known:
        raise ValueError(f"material not in vocabulary: {meta.material!r}")
    shown = _DISPLAY.get(meta.material, meta.material)
    return (
        f"A simulation using the {_SIM_PHRASE[meta.simulation]} on {shown} "
        f"under {meta.boundary}, aiming to predict the {_TARGET_PHRASE[meta.target]}."
    )


@dataclass
class ContextEmbedding:
    tokens: np.ndarray  # (T, D) float32
    provider_id: str
    text_hash: str

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"context must be (T>=1, D), got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise ValueError("context embedding contains non-finite values")

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


# --------------------------------------------------------------------------- #
# Providers
# --------------------------------------------------------------------------- #

class FallbackProvider:
    """Offline deterministic pseudo-embedder.

    Tokens come from a whitespace split, truncated/padded to a fixed count;
    each (token, position) pair seeds a PCG64 draw of a D-vector that is then
    normalized to zero mean / unit variance. No model, no network, bit-stable.
    """

    def __init__(self, dim: int = 256, n_tokens: int = 32):
        self.dim = dim
        self.n_tokens = n_tokens

    @property
    def provider_id(self) -> str:
        return f"fallback:d{self.dim}:t{self.n_tokens}"

    def _token_vector(self, token: str, position: int) -> np.ndarray:
        digest = hashlib.sha256(f"{position}:{token}".encode("utf-8")).digest()
        seed = int.from_bytes(digest, "little")
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        v = gen.standard_normal(self.dim)
        v = (v - v.mean()) / v.std()
        return v.astype(np.float32)

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        words = text.split()[: self.n_tokens]
        words += [""] * (self.n_tokens - len(words))
        return np.stack([self._token_vector(w, k) for k, w in enumerate(words)])


class RemoteProvider:
    """Client for the sidecar protocol: POST /embed {"text", "layer"}."""

    def __init__(self, url: str, layer: int = 0, timeout: float = 30.0):
        self.url = url.rstrip("/")
        self.layer = layer
        self.timeout = timeout

    @property
    def provider_id(self) -> str:
        return f"remote:{self.url}#layer{self.layer}"

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        try:
            resp = requests.post(
                f"{self.url}/embed",
                json={"text": text, "layer": self.layer},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise EmbedTransportError(f"sidecar unreachable at {self.url}: {exc}") from exc
        if resp.status_code != 200:
            try:
                message = resp.json().get("error", resp.text)
            except ValueError:
                message = resp.text
            raise EmbedProtocolError(f"sidecar error ({resp.status_code}): {message}")
        try:
            payload = resp.json()
            dim, tokens = int(payload["dim"]), int(payload["tokens"])
            data = np.asarray(payload["data"], dtype=np.float32)
        except (ValueError, KeyError, TypeError) as exc:
            raise EmbedProtocolError(f"malformed sidecar response: {exc}") from exc
        if data.size != dim * tokens:
            raise EmbedProtocolError(
                f"sidecar returned {data.size} floats for tokens*dim = {tokens * dim}"
            )
        return data.reshape(tokens, dim)


# --------------------------------------------------------------------------- #
# Cache
# --------------------------------------------------------------------------- #

class EmbedCache:
    """Content-addressed on-disk cache of embedding matrices.

    One binary file per (provider, text): header JSON + little-endian float32
    payload. Writes go through a temp file + atomic replace, so concurrent
    readers only ever see complete entries.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _key(provider_id: str, text: str) -> str:
        return hashlib.sha256(f"{provider_id}\0{text}".encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.ctx"

    def get(self, provider_id: str, text: str) -> np.ndarray | None:
        path = self._path(self._key(provider_id, text))
        if not path.exists():
            return None
        raw = path.read_bytes()
        (header_len,) = struct.unpack("<I", raw[:4])
        header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
        t, d = header["tokens"], header["dim"]
        data = np.frombuffer(raw[4 + header_len : 4 + header_len + 4 * t * d], dtype="<f4")
        return data.reshape(t, d).copy()

    def put(self, provider_id: str, text: str, matrix: np.ndarray) -> None:
        key = self._key(provider_id, text)
        path = self._path(key)
        header = json.dumps(
            {
                "provider": provider_id,
                "text_sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
                "tokens": int(matrix.shape[0]),
                "dim": int(matrix.shape[1]),
            }
        ).encode("utf-8")
        tmp = path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
        os.replace(tmp, path)


def embed(
    text: str,
    provider,
    cache: EmbedCache | None = None,
    expected_dim: int | None = None,
) -> ContextEmbedding:
    """Embed deck text through the provider, consulting the cache first."""
    text_hash = hashlib.sha256(text.encode("utf-8")).hexdigest()
    matrix = cache.get(provider.provider_id, text) if cache is not None else None
    if matrix is None:
        matrix = np.ascontiguousarray(provider.embed(text), dtype=np.float32)
        if cache is not None:
            cache.put(provider.provider_id, text, matrix)
    if expected_dim is not None and matrix.shape[1] != expected_dim:
        raise ValueError(
            f"embedding dim {matrix.shape[1]} does not match model config {expected_dim}"
        )
    return ContextEmbedding(tokens=matrix, provider_id=provider.provider_id, text_hash=text_hash)


def progression_token(p: float, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding of a progression point as one context token.

    Interleaved sin/cos at geometrically spaced frequencies, the usual
    transformer recipe applied to the scalar p.
    """
    lo, hi = PROGRESSION_RANGE
    if not (lo <= p <= hi):
        raise ValueError(f"progression point must lie in [{lo}, {hi}], got {p}")
    n_sin = (dim + 1) // 2
    n_cos = dim // 2
    freqs = np.power(10000.0, -np.arange(n_sin) / max(n_sin - 1, 1))
    angles = 50.0 * p * freqs  # slowest band stays monotone over [0.3, 1]
    vec = np.empty(dim, dtype=np.float64)
    vec[0::2] = np.sin(angles)
    vec[1::2] = np.cos(angles[:n_cos])
    return vec.reshape(1, dim).astype(np.float32)


def context_for_meta(
    meta: DeckMeta,
    provider,
    cache: EmbedCache | None = None,
    expected_dim: int | None = None,
    materials: dict | None = None,
) -> ContextEmbedding:
    """Render, embed, and append the progression token when present."""
    text = render_deck(meta, materials=materials)
    ctx = embed(text, provider, cache=cache, expected_dim=expected_dim)
    if meta.progression is not None:
        extra = progression_token(meta.progression, ctx.dim)
        ctx = ContextEmbedding(
            tokens=np.vstack([ctx.tokens, extra]),
            provider_id=ctx.provider_id,
            text_hash=ctx.text_hash,
        )
    return ctx
