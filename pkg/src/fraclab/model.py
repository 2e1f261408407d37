"""Mesh-agnostic encoder-decoder over arbitrary coordinate tokens.

A fixed array of learnable latent tokens cross-attends over the input tokens
(Fourier positional encoding concatenated with field values), refines itself
through a self-attention stack, is fused with deck-context embeddings by one
more cross-attention, and is finally queried by a decoder that emits either a
field value per query coordinate or a single scalar. The latent bottleneck
makes the encoding size-invariant: any number of tokens in, n_latents out.

All blocks are pre-norm residual with GELU feed-forwards, built from the
autodiff primitives so the whole stack is differentiable end to end.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import SeededRng
from .deck import ContextEmbedding

GROUPS = ("encoder", "latents", "context", "decoder", "head")
MASKS = ("all", "decoder_only")


@dataclass(frozen=True)
class ModelConfig:
    d_enc: int = 64
    d_dec: int = 64
    n_latents: int = 64
    n_self_layers: int = 3
    enc_cross_heads: int = 2
    enc_self_heads: int = 2
    dec_cross_heads: int = 1
    pos_bands: int = 32
    pos_max_freq: float = 64.0
    context_dim: int = 256
    n_features: int = 1
    ff_mult: int = 4
    squash_field: bool = True
    scalar_query_grid: int = 4

    def __post_init__(self):
        if self.n_latents < 1 or self.pos_bands < 1:
            raise ValueError("n_latents and pos_bands must be >= 1")
        for d, h, label in (
            (self.d_enc, self.enc_cross_heads, "enc_cross"),
            (self.d_enc, self.enc_self_heads, "enc_self"),
            (self.d_dec, self.dec_cross_heads, "dec_cross"),
        ):
            if d % h != 0:
                raise ValueError(f"channels {d} not divisible by {label} heads {h}")

    @property
    def pos_dim(self) -> int:
        return 4 * self.pos_bands + 2

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenBatch:
    """Input tokens: normalized coordinates plus per-location feature values.

    Structured-grid samples use cell centers; unstructured samples carry
    arbitrary coordinates (e.g. mesh edge centers).
    """

    coords: np.ndarray  # (N, 2) in [0, 1]^2
    features: np.ndarray  # (N, F)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        n = self.coords.shape[0]
        if n < 1 or self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must be (N>=1, 2), got {self.coords.shape}")
        if self.features.shape[0] != n:
            raise ValueError("features must align with coords")
        if not (np.all(np.isfinite(self.coords)) and np.all(np.isfinite(self.features))):
            raise ValueError("token batch contains non-finite values")
        if self.coords.min() < -1e-9 or self.coords.max() > 1.0 + 1e-9:
            raise ValueError("coords must be normalized to the unit square")


def positional_encoding(coords: np.ndarray, bands: int = 32, max_freq: float = 64.0) -> np.ndarray:
    """Fourier features per axis plus the raw coordinates: P = 4*bands + 2.

    Frequencies are geometrically spaced from 1 to max_freq (the Nyquist
    frequency of the finest resolved grid), emitted as sin(pi f x), cos(pi f x).
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.min() < -1e-9 or coords.max() > 1.0 + 1e-9:
        raise ValueError("coordinates must lie in [0, 1]")
    freqs = np.geomspace(1.0, max_freq, bands)
    blocks = []
    for axis in range(2):
        angles = np.pi * coords[:, axis : axis + 1] * freqs[None, :]
        blocks.append(np.sin(angles))
        blocks.append(np.cos(angles))
    blocks.append(coords)
    return np.concatenate(blocks, axis=1)


# --------------------------------------------------------------------------- #
# Parameter construction
# --------------------------------------------------------------------------- #

def _uniform(rng: SeededRng, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, rng: SeededRng) -> dict[str, Tensor]:
    """All learnable tensors, named group-first so freeze masks work by prefix."""
    p: dict[str, np.ndarray] = {}

    def linear(prefix: str, d_in: int, d_out: int, bias: bool = True):
        p[f"{prefix}.w"] = _uniform(rng, d_in, (d_in, d_out))
        if bias:
            p[f"{prefix}.b"] = _uniform(rng, d_in, (d_out,))

    def attention(prefix: str, d_q: int, d_kv: int, d_model: int):
        linear(f"{prefix}.wq", d_q, d_model, bias=False)
        linear(f"{prefix}.wk", d_kv, d_model, bias=False)
        linear(f"{prefix}.wv", d_kv, d_model, bias=False)
        linear(f"{prefix}.wo", d_model, d_q, bias=False)

    def feed_forward(prefix: str, d: int):
        linear(f"{prefix}.ff1", d, config.ff_mult * d)
        linear(f"{prefix}.ff2", config.ff_mult * d, d)

    d_in = config.pos_dim + config.n_features
    linear("encoder.input_proj", d_in, config.d_enc)
    p["latents"] = rng.normal(0.0, 0.02, size=(config.n_latents, config.d_enc))
    attention("encoder.cross", config.d_enc, config.d_enc, config.d_enc)
    feed_forward("encoder.cross_ff", config.d_enc)
    for layer in range(config.n_self_layers):
        attention(f"encoder.self{layer}.attn", config.d_enc, config.d_enc, config.d_enc)
        feed_forward(f"encoder.self{layer}.ff", config.d_enc)
    attention("context.cross", config.d_enc, config.context_dim, config.d_enc)
    linear("decoder.query_proj", config.pos_dim, config.d_dec)
    attention("decoder.cross", config.d_dec, config.d_enc, config.d_dec)
    feed_forward("decoder.ff", config.d_dec)
    linear("head.field.out", config.d_dec, 1)
    feed_forward("head.scalar.ff", config.d_dec)
    linear("head.scalar.out", config.d_dec, 1)

    return {name: Tensor(v, requires_grad=True) for name, v in p.items()}


def param_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


def param_groups(params: dict[str, Tensor], mask: str) -> tuple[list[str], float]:
    """Trainable parameter names under a freeze mask, plus trainable fraction."""
    if mask not in MASKS:
        raise ValueError(f"unknown mask {mask!r}; valid masks: {MASKS}")
    names = sorted(params)
    if mask == "all":
        selected = names
    else:
        selected = [n for n in names if n.split(".")[0] in ("decoder", "head")]
    total = param_count(params)
    trainable = sum(params[n].size for n in selected)
    return selected, trainable / total


# --------------------------------------------------------------------------- #
# Forward blocks
# --------------------------------------------------------------------------- #

def attention_update(
    q_in: Tensor,
    kv_in: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
) -> Tensor:
    """Pre-norm multi-head cross-attention contribution (no residual).

    Self-attention is the kv_in = q_in special case. Heads slice the joint
    projection columns, so head count only reshapes compute, not parameters.
    """
    nq = ad.layer_norm(q_in)
    nkv = nq if kv_in is q_in else ad.layer_norm(kv_in)
    q = ad.matmul(nq, params[f"{prefix}.wq.w"])
    k = ad.matmul(nkv, params[f"{prefix}.wk.w"])
    v = ad.matmul(nkv, params[f"{prefix}.wv.w"])
    d_model = q.shape[1]
    d_head = d_model // heads
    outs = []
    for h in range(heads):
        cols = (slice(None), slice(h * d_head, (h + 1) * d_head))
        qh, kh, vh = ad.slice_(q, cols), ad.slice_(k, cols), ad.slice_(v, cols)
        logits = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(d_head))
        outs.append(ad.matmul(ad.softmax(logits), vh))
    merged = outs[0] if heads == 1 else ad.concat(outs, axis=1)
    return ad.matmul(merged, params[f"{prefix}.wo.w"])


def _ff_update(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = ad.layer_norm(x)
    h = ad.gelu(ad.add(ad.matmul(h, params[f"{prefix}.ff1.w"]), params[f"{prefix}.ff1.b"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.ff2.w"]), params[f"{prefix}.ff2.b"])


def encode(tokens: TokenBatch, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """(n_latents, d_enc) latent array; shape independent of the token count."""
    pe = positional_encoding(tokens.coords, config.pos_bands, config.pos_max_freq)
    if tokens.features.shape[1] != config.n_features:
        raise ValueError(
            f"expected {config.n_features} feature channel(s), got {tokens.features.shape[1]}"
        )
    x_np = np.concatenate([pe, tokens.features], axis=1)
    x = ad.add(ad.matmul(Tensor(x_np), params["encoder.input_proj.w"]), params["encoder.input_proj.b"])
    z = params["latents"]
    z = ad.add(z, attention_update(z, x, params, "encoder.cross", config.enc_cross_heads))
    z = ad.add(z, _ff_update(z, params, "encoder.cross_ff"))
    for layer in range(config.n_self_layers):
        z = ad.add(z, attention_update(z, z, params, f"encoder.self{layer}.attn", config.enc_self_heads))
        z = ad.add(z, _ff_update(z, params, f"encoder.self{layer}.ff"))
    return z


def fuse_context(latent: Tensor, context: ContextEmbedding, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Latents attend over the deck context tokens; residual keeps the shape."""
    if context.dim != config.context_dim:
        raise ValueError(
            f"context dim {context.dim} does not match model config {config.context_dim}"
        )
    ctx = Tensor(context.tokens.astype(np.float64))
    return ad.add(latent, attention_update(latent, ctx, params, "context.cross", 1))


def decode_field(
    latent: Tensor,
    query_coords: np.ndarray,
    params: dict[str, Tensor],
    config: ModelConfig,
    squash: bool | None = None,
) -> Tensor:
    """One value per query coordinate; queries never attend to each other."""
    query_coords = np.asarray(query_coords, dtype=np.float64)
    if query_coords.ndim != 2 or query_coords.shape[0] < 1:
        raise ValueError("need at least one query coordinate")
    pe = positional_encoding(query_coords, config.pos_bands, config.pos_max_freq)
    q = ad.add(ad.matmul(Tensor(pe), params["decoder.query_proj.w"]), params["decoder.query_proj.b"])
    q = ad.add(q, attention_update(q, latent, params, "decoder.cross", config.dec_cross_heads))
    q = ad.add(q, _ff_update(q, params, "decoder.ff"))
    out = ad.add(ad.matmul(ad.layer_norm(q), params["head.field.out.w"]), params["head.field.out.b"])
    do_squash = config.squash_field if squash is None else squash
    if do_squash:
        out = ad.sigmoid(out)
    return ad.reshape(out, (query_coords.shape[0],))


def scalar_query_coords(config: ModelConfig) -> np.ndarray:
    """Fixed coarse query grid the scalar head reads the domain through."""
    m = config.scalar_query_grid
    xs = (np.arange(m) + 0.5) / m
    gx, gy = np.meshgrid(xs, xs)
    return np.column_stack([gx.ravel(), gy.ravel()])


def decode_scalar(latent: Tensor, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Compress the latent array to one number.

    Runs the shared field decoder over a fixed coarse grid of query points,
    mean-pools the decoder features, and maps them through a small
    postprocessing block to a single value.
    """
    coords = scalar_query_coords(config)
    pe = positional_encoding(coords, config.pos_bands, config.pos_max_freq)
    q = ad.add(ad.matmul(Tensor(pe), params["decoder.query_proj.w"]), params["decoder.query_proj.b"])
    q = ad.add(q, attention_update(q, latent, params, "decoder.cross", config.dec_cross_heads))
    q = ad.add(q, _ff_update(q, params, "decoder.ff"))
    n_q = coords.shape[0]
    pooled = ad.matmul(Tensor(np.full((1, n_q), 1.0 / n_q)), ad.layer_norm(q))
    pooled = ad.add(pooled, _ff_update(pooled, params, "head.scalar.ff"))
    out = ad.add(ad.matmul(ad.layer_norm(pooled), params["head.scalar.out.w"]),
                 params["head.scalar.out.b"])
    return ad.reshape(out, ())


def forward_field(
    tokens: TokenBatch,
    context: ContextEmbedding,
    params: dict[str, Tensor],
    config: ModelConfig,
    query_coords: np.ndarray | None = None,
    squash: bool | None = None,
) -> Tensor:
    """encode -> fuse -> decode_field, defaulting queries to the input coords."""
    z = fuse_context(encode(tokens, params, config), context, params, config)
    coords = tokens.coords if query_coords is None else query_coords
    return decode_field(z, coords, params, config, squash=squash)


def forward_scalar(
    tokens: TokenBatch,
    context: ContextEmbedding,
    params: dict[str, Tensor],
    config: ModelConfig,
) -> Tensor:
    z = fuse_context(encode(tokens, params, config), context, params, config)
    return decode_scalar(z, params, config)
