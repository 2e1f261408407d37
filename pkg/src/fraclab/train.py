"""Losses, metrics, optimizer, schedules, and curriculum orchestration.

Training minimizes MSE between predicted and simulated fields (or scalars),
with AdamW-style decoupled weight decay, global-norm gradient clipping, linear
learning-rate warmup, and gradient averaging over an accumulation window.
Curricula chain stages (surrogate pretraining, high-fidelity fine-tuning,
task fine-tunes) over the same parameter dictionary, with freeze masks
selecting which parameter groups a stage may touch.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor
from .core import CartesianGrid, SeededRng
from .dataset import PROGRESSION_POINTS, SampleRecord
from .deck import ContextEmbedding, DeckMeta, FallbackProvider, embed, progression_token, render_deck

TASKS = ("field", "scalar", "temporal")
FINETUNE_TASKS = ("new_material", "temporal", "time_to_failure", "unstructured")


# --------------------------------------------------------------------------- #
# Metrics
# --------------------------------------------------------------------------- #

def _check_lengths(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError(f"metric length mismatch: {y.shape} vs {y_hat.shape}")
    return y, y_hat


def l1_metric(y, y_hat) -> float:
    """Mean absolute deviation over all elements."""
    y, y_hat = _check_lengths(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


mae_metric = l1_metric


def mse_metric(y, y_hat) -> float:
    y, y_hat = _check_lengths(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def r2_metric(y, y_hat) -> float:
    y, y_hat = _check_lengths(y, y_hat)
    if y.size < 2:
        raise ValueError("r2 needs at least two samples")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r2 is undefined for constant targets")
    ss_res = float(np.sum((y - y_hat) ** 2))
    return 1.0 - ss_res / ss_tot


# --------------------------------------------------------------------------- #
# Optimizer
# --------------------------------------------------------------------------- #

@dataclass
class OptimizerState:
    """Adam with decoupled weight decay; moments keyed like the parameters."""

    lr_setpoint: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 0.5
    accumulation: int = 64
    step: int = 0
    m: dict[str, np.ndarray] = dc_field(default_factory=dict)
    v: dict[str, np.ndarray] = dc_field(default_factory=dict)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the joint norm is at most max_norm."""
    norm = global_norm(grads)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float | None = None,
) -> dict[str, Tensor]:
    """One bias-corrected update over exactly the parameters named in grads.

    Decay is decoupled (theta -= lr*wd*theta before the moment step); clipping
    is the caller's job, applied to the accumulated gradient beforehand.
    """
    if lr is None:
        lr = state.lr_setpoint
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        if state.weight_decay:
            p.values = p.values - lr * state.weight_decay * p.values
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def lr_schedule(step: int, warmup: int = 64000, setpoint: float = 1e-4) -> float:
    """Linear warmup from 0 to the setpoint, constant afterwards."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if warmup <= 0 or step >= warmup:
        return setpoint
    return setpoint * step / warmup


# --------------------------------------------------------------------------- #
# Data plumbing
# --------------------------------------------------------------------------- #

_SIM_BY_SOURCE = {
    "rulebased": "rule-based",
    "phasefield": "phase-field",
    "external": "discrete–finite-element",
}


def record_tokens(record: SampleRecord) -> mdl.TokenBatch:
    return mdl.TokenBatch(coords=record.coords, features=record.input_field)


def deck_for_task(record: SampleRecord, task: str, progression: float | None = None) -> DeckMeta:
    """Rebuild the deck for a task head from record provenance."""
    target = {"field": "fracture pattern", "scalar": "time to failure", "temporal": "dynamic trajectory"}[task]
    return DeckMeta(
        simulation=_SIM_BY_SOURCE[record.source],
        material=record.material,
        boundary=record.loading,
        target=target,
        progression=progression,
    )


class StreamSource:
    """Endless record source built from a factory of deterministic iterators."""

    def __init__(self, factory: Callable[[SeededRng], Iterator[SampleRecord]]):
        self.factory = factory

    def iterator(self, rng: SeededRng) -> Iterator[SampleRecord]:
        return self.factory(rng)


class ListSource:
    """Finite dataset, cycled with a fresh shuffle per epoch."""

    def __init__(self, records: Sequence[SampleRecord]):
        if not records:
            raise ValueError("empty record list")
        self.records = list(records)

    def iterator(self, rng: SeededRng) -> Iterator[SampleRecord]:
        n = len(self.records)
        while True:
            order = np.arange(n)
            rng.gen.shuffle(order)
            for k in order:
                yield self.records[int(k)]


@dataclass
class StageSpec:
    name: str
    source: StreamSource | ListSource
    steps: int
    mask: str = "all"
    batch_size: int = 4
    task: str = "field"
    snapshot_cadence: int = 0  # checkpoint every k optimizer steps; 0 = never
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError(f"stage {self.name!r}: steps must be positive")
        if self.task not in TASKS:
            raise ValueError(f"stage {self.name!r}: task must be one of {TASKS}")
        if self.mask not in mdl.MASKS:
            raise ValueError(f"stage {self.name!r}: mask must be one of {mdl.MASKS}")


@dataclass
class TargetNormalizer:
    """Per-material standardization of scalar targets (zero mean, unit var)."""

    stats: dict[str, tuple[float, float]] = dc_field(default_factory=dict)

    @classmethod
    def fit(cls, records: Sequence[SampleRecord]) -> "TargetNormalizer":
        groups: dict[str, list[float]] = {}
        for rec in records:
            if rec.failure_time is None:
                continue
            groups.setdefault(rec.material, []).append(rec.failure_time)
        stats = {}
        for mat, vals in sorted(groups.items()):
            arr = np.asarray(vals)
            std = float(arr.std())
            stats[mat] = (float(arr.mean()), std if std > 0 else 1.0)
        return cls(stats)

    def transform(self, material: str, value: float) -> float:
        mean, std = self.stats.get(material, (0.0, 1.0))
        return (value - mean) / std

    def inverse(self, material: str, value: float) -> float:
        mean, std = self.stats.get(material, (0.0, 1.0))
        return value * std + mean


@dataclass
class TraceRow:
    step: int
    stage: str
    lr: float
    train_mse: float
    val_l1: float | None = None


def write_trace_csv(rows: Sequence[TraceRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "stage", "lr", "train_mse", "val_l1"])
        for r in rows:
            writer.writerow([r.step, r.stage, f"{r.lr:.10g}", f"{r.train_mse:.10g}",
                             "" if r.val_l1 is None else f"{r.val_l1:.10g}"])


# --------------------------------------------------------------------------- #
# Context handling
# --------------------------------------------------------------------------- #

class ContextBank:
    """Per-process memo of context embeddings so identical decks embed once."""

    def __init__(self, provider, cache=None, dim: int | None = None):
        self.provider = provider
        self.cache = cache
        self.dim = dim
        self._memo: dict[str, np.ndarray] = {}

    def context(self, record: SampleRecord, task: str, progression: float | None = None) -> ContextEmbedding:
        meta = deck_for_task(record, task, progression)
        text = record.deck_text if (task == "field" and record.deck_text) else render_deck(meta)
        if text not in self._memo:
            ctx = embed(text, self.provider, cache=self.cache, expected_dim=self.dim)
            self._memo[text] = ctx.tokens
        tokens = self._memo[text]
        if progression is not None:
            tokens = np.vstack([tokens, progression_token(progression, tokens.shape[1])])
        return ContextEmbedding(tokens=tokens, provider_id=getattr(self.provider, "provider_id", "memo"), text_hash="")


# --------------------------------------------------------------------------- #
# Stage training
# --------------------------------------------------------------------------- #

def _sample_loss(
    record: SampleRecord,
    task: str,
    params: dict[str, Tensor],
    config: mdl.ModelConfig,
    bank: ContextBank,
    rng: SeededRng,
    normalizer: TargetNormalizer | None,
) -> Tensor:
    tokens = record_tokens(record)
    if task == "field":
        ctx = bank.context(record, "field")
        pred = mdl.forward_field(tokens, ctx, params, config)
        target = Tensor(record.final_field.astype(np.float64))
    elif task == "temporal":
        if record.snapshots is None:
            raise ValueError(f"record (seed {record.seed}) has no snapshots for the temporal task")
        k = int(rng.integers(0, len(PROGRESSION_POINTS)))
        p = float(PROGRESSION_POINTS[k])
        ctx = bank.context(record, "temporal", progression=p)
        pred = mdl.forward_field(tokens, ctx, params, config)
        target = Tensor(record.snapshots[k].astype(np.float64))
    else:  # scalar
        if record.failure_time is None:
            raise ValueError(f"record (seed {record.seed}) has no failure time for the scalar task")
        ctx = bank.context(record, "scalar")
        pred = mdl.forward_scalar(tokens, ctx, params, config)
        value = record.failure_time
        if normalizer is not None:
            value = normalizer.transform(record.material, value)
        target = Tensor(np.asarray(value, dtype=np.float64))
    return ad.mse(pred, target)


def train_stage(
    params: dict[str, Tensor],
    config: mdl.ModelConfig,
    stage: StageSpec,
    rng: SeededRng,
    bank: ContextBank | None = None,
    optim: OptimizerState | None = None,
    warmup: int = 500,
    normalizer: TargetNormalizer | None = None,
    step_offset: int = 0,
) -> tuple[dict[str, Tensor], list[TraceRow]]:
    """Run one curriculum stage; returns the (mutated) params and loss trace.

    Gradients are averaged over batch_size * accumulation samples per
    optimizer step, clipped at the global-norm bound, then applied with Adam
    under the stage's freeze mask. Deterministic given the rng.
    """
    if bank is None:
        bank = ContextBank(FallbackProvider(dim=config.context_dim), dim=config.context_dim)
    if optim is None:
        optim = OptimizerState(accumulation=4)
    trainable, _fraction = mdl.param_groups(params, stage.mask)
    trainable_set = set(trainable)
    data = stage.source.iterator(rng.substream(17))
    draw_rng = rng.substream(29)

    rows: list[TraceRow] = []
    window = stage.batch_size * optim.accumulation
    for local_step in range(stage.steps):
        step_id = step_offset + local_step
        lr = lr_schedule(optim.step, warmup=warmup, setpoint=optim.lr_setpoint)
        ad.zero_grad(params)
        losses = []
        with ad.Tape() as tape:
            for _ in range(window):
                record = next(data)
                losses.append(_sample_loss(record, stage.task, params, config, bank, draw_rng, normalizer))
            total = losses[0] if len(losses) == 1 else ad.scale(_sum_losses(losses), 1.0 / len(losses))
            tape.backward(total)
        grads = {
            name: params[name].grad
            for name in trainable_set
            if params[name].grad is not None
        }
        clip_global_norm(grads, optim.clip_norm)
        adam_step(params, grads, optim, lr=lr)
        rows.append(TraceRow(step=step_id, stage=stage.name, lr=lr, train_mse=float(total.values)))
        if (
            stage.snapshot_cadence
            and stage.checkpoint_path
            and (local_step + 1) % stage.snapshot_cadence == 0
        ):
            ad.save_params(params, stage.checkpoint_path, extra={"config": config.to_dict()})
    if stage.checkpoint_path:
        ad.save_params(params, stage.checkpoint_path, extra={"config": config.to_dict()})
    return params, rows


def _sum_losses(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for extra in losses[1:]:
        total = ad.add(total, extra)
    return total


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #

def predict_field(record, params, config, bank) -> np.ndarray:
    pred = mdl.forward_field(record_tokens(record), bank.context(record, "field"), params, config)
    return pred.values


def evaluate_field(
    records: Sequence[SampleRecord],
    params: dict[str, Tensor],
    config: mdl.ModelConfig,
    bank: ContextBank,
) -> dict:
    """L1/MAE/MSE per (material, loading) plus overall, mirroring the report tables."""
    per_group: dict[tuple[str, str], list[tuple[np.ndarray, np.ndarray]]] = {}
    for rec in records:
        pred = predict_field(rec, params, config, bank)
        per_group.setdefault((rec.material, rec.loading), []).append((rec.final_field, pred))
    table = {}
    all_y, all_p = [], []
    for key in sorted(per_group):
        ys = np.concatenate([y for y, _ in per_group[key]])
        ps = np.concatenate([p for _, p in per_group[key]])
        table[key] = {"l1": l1_metric(ys, ps), "mse": mse_metric(ys, ps), "count": len(per_group[key])}
        all_y.append(ys)
        all_p.append(ps)
    ys, ps = np.concatenate(all_y), np.concatenate(all_p)
    return {"groups": table, "overall": {"l1": l1_metric(ys, ps), "mse": mse_metric(ys, ps)}}


def evaluate_scalar(
    records: Sequence[SampleRecord],
    params: dict[str, Tensor],
    config: mdl.ModelConfig,
    bank: ContextBank,
    normalizer: TargetNormalizer | None = None,
) -> dict:
    """R^2 and MAE of de-normalized scalar predictions on labeled records."""
    y_true, y_pred = [], []
    for rec in records:
        if rec.failure_time is None:
            continue
        pred = mdl.forward_scalar(record_tokens(rec), bank.context(rec, "scalar"), params, config)
        value = float(pred.values)
        if normalizer is not None:
            value = normalizer.inverse(rec.material, value)
        y_true.append(rec.failure_time)
        y_pred.append(value)
    return {
        "r2": r2_metric(y_true, y_pred),
        "mae": mae_metric(y_true, y_pred),
        "count": len(y_true),
    }


def constant_mean_baseline(records: Sequence[SampleRecord]) -> float:
    """MSE of predicting the dataset-wide mean target value everywhere."""
    targets = np.concatenate([rec.final_field for rec in records])
    return mse_metric(targets, np.full_like(targets, targets.mean()))


# --------------------------------------------------------------------------- #
# Curriculum
# --------------------------------------------------------------------------- #

def run_curriculum(
    plan: Sequence[StageSpec],
    params: dict[str, Tensor],
    config: mdl.ModelConfig,
    rng: SeededRng,
    bank: ContextBank | None = None,
    optim: OptimizerState | None = None,
    warmup: int = 500,
    val_records: Sequence[SampleRecord] | None = None,
) -> tuple[dict[str, Tensor], dict]:
    """Execute stages in order; report per-stage validation L1 and boundaries."""
    if not plan or all(stage is None for stage in plan):
        raise ValueError("curriculum plan must contain at least one stage")
    if bank is None:
        bank = ContextBank(FallbackProvider(dim=config.context_dim), dim=config.context_dim)
    if optim is None:
        optim = OptimizerState(accumulation=4)
    all_rows: list[TraceRow] = []
    report: dict = {"stages": [], "skipped": []}
    offset = 0
    for k, stage in enumerate(plan):
        if stage is None:  # e.g. a fine-tune slot whose dataset came up empty
            report["skipped"].append({"index": k})
            continue
        params, rows = train_stage(
            params, config, stage, rng.substream(1000 + k),
            bank=bank, optim=optim, warmup=warmup, step_offset=offset,
        )
        all_rows.extend(rows)
        entry = {"name": stage.name, "start": offset, "steps": stage.steps}
        offset += stage.steps
        if val_records:
            entry["val_l1"] = evaluate_field(val_records, params, config, bank)["overall"]["l1"]
        report["stages"].append(entry)
    report["total_steps"] = offset
    report["trace"] = all_rows
    return params, report


def make_diffuse_records(
    grid: CartesianGrid,
    n: int,
    seed: int,
    smoothing: float = 0.8,
    sampler=None,
) -> list[SampleRecord]:
    """Desk-scale stand-in for solver output: diffuse banded fields in [0, 1].

    Surrogate runs are smoothed into finite-width bands and relabeled as
    phase-field decks, shifting the target distribution away from the binary
    pretraining stream the way high-fidelity damage fields do. Used by the
    curriculum A/B comparison.
    """
    from .initcond import ConfigSampler
    from .rulebased import generate_stream

    if sampler is None:
        sampler = ConfigSampler()
    rng = SeededRng(seed, stream=7)
    records = []
    for rec in generate_stream(rng, grid, sampler):
        smooth = ndimage.gaussian_filter(
            rec.final_field.reshape(grid.ny, grid.nx).astype(np.float64), smoothing
        )
        top = smooth.max()
        if top > 0:
            smooth = smooth / top
        meta = DeckMeta("phase-field", rec.material, rec.loading, "fracture pattern")
        records.append(
            SampleRecord(
                deck_text=render_deck(meta),
                coords=rec.coords,
                input_field=rec.input_field,
                final_field=smooth.ravel().astype(np.float32),
                failure_time=rec.failure_time,
                source="phasefield",
                seed=rec.seed,
                material=rec.material,
                loading=rec.loading,
            )
        )
        if len(records) >= n:
            break
    return records


def ab_harness(
    config: mdl.ModelConfig,
    grid: CartesianGrid,
    seeds: Sequence[int],
    pretrain_steps: int,
    finetune_steps: int,
    n_finetune: int = 8,
    n_val: int = 32,
    batch_size: int = 8,
    accumulation: int = 1,
    sampler=None,
    lr: float = 3e-3,
    smoothing: float = 0.5,
) -> dict:
    """Paired comparison: (pretrain -> finetune) vs scratch at matched steps.

    Arm A pretrains on the endless surrogate stream and fine-tunes on a small
    diffuse-band dataset; arm B trains from scratch on the same fine-tune data
    for the same total number of optimizer steps. Both arms share the held-out
    validation records per seed; the report counts arm-A wins on L1.
    """
    from .initcond import ConfigSampler
    from .rulebased import generate_stream

    if sampler is None:
        sampler = ConfigSampler()
    results = []
    for seed in seeds:
        finetune = make_diffuse_records(grid, n_finetune + n_val, seed=seed + 101,
                                        sampler=sampler, smoothing=smoothing)
        train_recs, val_recs = finetune[:n_finetune], finetune[n_finetune:]
        bank = ContextBank(FallbackProvider(dim=config.context_dim), dim=config.context_dim)

        def fresh(run: str):
            return (
                mdl.init_params(config, SeededRng(seed, stream=3)),
                OptimizerState(accumulation=accumulation, lr_setpoint=lr, weight_decay=0.01),
                SeededRng(seed, stream=5 if run == "a" else 6),
            )

        stream = StreamSource(lambda r: generate_stream(r, grid, sampler))
        listed = ListSource(train_recs)

        params_a, optim_a, rng_a = fresh("a")
        train_stage(params_a, config, StageSpec("pretrain", stream, pretrain_steps, batch_size=batch_size),
                    rng_a, bank=bank, optim=optim_a)
        train_stage(params_a, config, StageSpec("finetune", listed, finetune_steps, batch_size=batch_size),
                    rng_a.substream(8), bank=bank, optim=optim_a)

        params_b, optim_b, rng_b = fresh("b")
        train_stage(params_b, config, StageSpec("scratch", listed, pretrain_steps + finetune_steps,
                                                batch_size=batch_size),
                    rng_b, bank=bank, optim=optim_b)

        l1_a = evaluate_field(val_recs, params_a, config, bank)["overall"]["l1"]
        l1_b = evaluate_field(val_recs, params_b, config, bank)["overall"]["l1"]
        results.append({"seed": seed, "pretrained_l1": l1_a, "scratch_l1": l1_b, "win": l1_a < l1_b})
    wins = sum(1 for r in results if r["win"])
    return {"results": results, "wins": wins, "total": len(results)}


# --------------------------------------------------------------------------- #
# Task fine-tunes
# --------------------------------------------------------------------------- #

def finetune_task(
    params: dict[str, Tensor],
    config: mdl.ModelConfig,
    task: str,
    records: Sequence[SampleRecord],
    rng: SeededRng,
    steps: int | None = None,
    bank: ContextBank | None = None,
    batch_size: int = 4,
    accumulation: int = 1,
    warmup: int = 100,
    checkpoint_path: str | None = None,
    mask: str | None = None,
):
    """Dispatch the four downstream fine-tuning recipes.

    new_material, temporal, and time_to_failure train the decoder groups
    only by default, reusing the frozen encoder representation; unstructured
    re-trains everything because the coordinate structure itself changes.
    mask overrides the default freeze choice.
    """
    if task not in FINETUNE_TASKS:
        raise ValueError(f"unknown finetune task {task!r}; valid: {FINETUNE_TASKS}")
    normalizer = None
    if task == "new_material":
        stage = StageSpec("finetune:new_material", ListSource(records), steps or 1500,
                          mask=mask or "decoder_only", batch_size=batch_size, task="field",
                          checkpoint_path=checkpoint_path)
    elif task == "temporal":
        for rec in records:
            if rec.snapshots is None:
                raise ValueError("temporal fine-tuning needs records with snapshots")
        stage = StageSpec("finetune:temporal", ListSource(records), steps or 1000,
                          mask=mask or "decoder_only", batch_size=batch_size, task="temporal",
                          checkpoint_path=checkpoint_path)
    elif task == "time_to_failure":
        labeled = [r for r in records if r.failure_time is not None]
        if not labeled:
            raise ValueError("time_to_failure fine-tuning needs records with failure times")
        normalizer = TargetNormalizer.fit(labeled)
        stage = StageSpec("finetune:time_to_failure", ListSource(labeled), steps or 1500,
                          mask=mask or "decoder_only", batch_size=batch_size, task="scalar",
                          checkpoint_path=checkpoint_path)
        records = labeled
    else:  # unstructured
        stage = StageSpec("finetune:unstructured", ListSource(records), steps or 1000,
                          mask=mask or "all", batch_size=batch_size, task="field",
                          checkpoint_path=checkpoint_path)
    optim = OptimizerState(accumulation=accumulation)
    params, rows = train_stage(params, config, stage, rng, bank=bank, optim=optim,
                               warmup=warmup, normalizer=normalizer)
    return params, rows, normalizer
