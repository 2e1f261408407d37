"""Minimal dense-tensor reverse-mode differentiation on float64 arrays.

Forward ops record onto the active Tape (a Wengert list); Tape.backward walks
the list once in reverse, accumulating exact analytic adjoints into Tensor
.grad slots. Gradients accumulate across backward calls (call zero_grad
between optimizer steps); this is what makes gradient accumulation windows
free. Everything is 64-bit so finite-difference checks hold at 1e-6.

Shapes are static within one graph and broadcasting is limited to last-dim
bias adds, which keeps the correctness surface small.
"""
from __future__ import annotations

import json
import struct
import threading
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

_TLS = threading.local()


def _tape_stack() -> list:
    if not hasattr(_TLS, "stack"):
        _TLS.stack = []
    return _TLS.stack


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "parents", "backward_fn")

    def __init__(self, output: Tensor, parents: tuple[Tensor, ...], backward_fn):
        self.output = output
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered op record; reverse iteration is reverse-topological."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    @staticmethod
    def current() -> "Tape | None":
        stack = _tape_stack()
        return stack[-1] if stack else None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into .grad for every tensor reached.

        Visits each recorded node exactly once, in reverse recording order;
        nodes whose output received no adjoint (dead branches) are skipped,
        so unused inputs keep grad = None (read as zero).
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones_like(loss.values))
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is not None:
                    parent.accumulate_grad(pg)


def _emit(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(values, requires_grad=any(p.requires_grad for p in parents))
    tape = Tape.current()
    if tape is not None:
        tape.nodes.append(_Node(out, parents, backward_fn))
    return out


def zero_grad(tensors) -> None:
    values = tensors.values() if isinstance(tensors, dict) else tensors
    for t in values:
        t.grad = None


# --------------------------------------------------------------------------- #
# Primitive operations
# --------------------------------------------------------------------------- #

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may also be a last-dim bias vector."""
    if a.shape == b.shape:
        return _emit(a.values + b.values, (a, b), lambda g: (g, g))
    if b.values.ndim == 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.values.ndim - 1))
        return _emit(a.values + b.values, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.values * c, (a,), lambda g: (g * c,))


def softmax(x: Tensor) -> Tensor:
    """Row-wise (last axis) softmax."""
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return _emit(s, (x,), backward)


def layer_norm(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    mu = x.values.mean(axis=-1, keepdims=True)
    var = x.values.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.values - mu) * inv
    n = x.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _emit(y, (x,), backward)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    v = x.values
    cdf = 0.5 * (1.0 + erf(v / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    return _emit(v * cdf, (x,), lambda g: (g * (cdf + v * pdf),))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.values)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), backward)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-repeating) slicing; key is anything numpy basic indexing takes."""
    template = x.values

    def backward(g):
        full = np.zeros_like(template)
        full[key] = g
        return (full,)

    return _emit(x.values[key], (x,), backward)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ValueError(f"transpose expects a 2D tensor, got {x.shape}")
    return _emit(x.values.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.full(x.shape, float(g) / n),)

    return _emit(np.asarray(x.values.mean()), (x,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.values - target.values
    n = pred.size

    def backward(g):
        base = (2.0 / n) * float(g) * diff
        return (base, -base)

    return _emit(np.asarray(np.mean(diff * diff)), (pred, target), backward)


# --------------------------------------------------------------------------- #
# Gradient verification
# --------------------------------------------------------------------------- #

def grad_check(
    fn: Callable[[], Tensor],
    inputs: dict[str, Tensor],
    h: float = 1e-6,
    tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict:
    """Compare tape gradients of a scalar function against central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-3): a true relative
    check for ordinary gradients, an absolute one at tol*1e-3 below the
    finite-difference noise floor. max_entries subsamples large inputs
    deterministically.
    """
    with Tape() as tape:
        loss = fn()
        if loss.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        tape.backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values))
        for name, t in inputs.items()
    }
    for t in inputs.values():
        t.grad = None

    rng = np.random.Generator(np.random.PCG64(seed))
    report = {"per_input": {}, "max_rel_err": 0.0, "failures": []}
    for name, t in inputs.items():
        flat = t.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            up = float(fn().values)
            flat[k] = orig - h
            down = float(fn().values)
            flat[k] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[k]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            if rel > worst:
                worst = rel
            if rel > tol:
                report["failures"].append((name, int(k), float(a), float(numeric), float(rel)))
        report["per_input"][name] = worst
        report["max_rel_err"] = max(report["max_rel_err"], worst)
    report["passed"] = report["max_rel_err"] <= tol
    return report


# --------------------------------------------------------------------------- #
# Parameter checkpoints
# --------------------------------------------------------------------------- #

CHECKPOINT_MAGIC = b"FRCK"
CHECKPOINT_VERSION = 1


def save_params(params: dict[str, Tensor], path: str | Path, extra: dict | None = None) -> None:
    """Checkpoint: header JSON (names, shapes, version) + LE float64 payload.

    Tensors are written in sorted-name order; round trips are bit-exact.
    """
    names = sorted(params)
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "names": names,
            "shapes": {n: list(params[n].shape) for n in names},
            "extra": extra or {},
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].values, dtype="<f8").tobytes())


def load_params(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    pos = 8 + header_len
    params: dict[str, Tensor] = {}
    for n in header["names"]:
        shape = tuple(header["shapes"][n])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw[pos : pos + 8 * count], dtype="<f8").reshape(shape).copy()
        pos += 8 * count
        params[n] = Tensor(arr, requires_grad=True)
    return params, header.get("extra", {})
