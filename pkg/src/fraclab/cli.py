"""Operator-facing pipeline: manifest-driven generation, training, evaluation.

Every command takes a JSON manifest (archivable, schema-checked, unknown keys
rejected) plus a couple of path/verbosity flags. Commands are idempotent for
identical manifests and drop a reproducibility stamp (manifest hash, seed,
package version) next to their outputs.

Exit codes: 0 success, 2 validation error, 3 runtime/solver error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import model as mdl
from . import train as tr
from .core import CartesianGrid, SeededRng, load_materials, material_registry
from .dataset import SampleRecord, read_shard, write_shard
from .deck import DeckMeta, EmbedCache, FallbackProvider, RemoteProvider, render_deck
from .initcond import ConfigSampler, sample_config
from .phasefield import PhaseFieldParams, SolverError, run_phasefield
from .phasefield.solver import energy_trace_csv
from .rulebased import ALL_MODES, GrowthMode, stream_records


class ManifestError(ValueError):
    """Manifest failed schema validation."""


def _check_keys(obj: dict, allowed: set[str], context: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ManifestError(f"{context}: unknown key(s) {sorted(unknown)}")


def _load_manifest(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _stamp(out_path: str | Path, manifest: dict, seed) -> None:
    digest = hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode("utf-8")
    ).hexdigest()
    stamp = {"manifest_sha256": digest, "seed": seed, "version": __version__}
    Path(str(out_path) + ".stamp.json").write_text(json.dumps(stamp, indent=2), encoding="utf-8")


def _grid_from(manifest: dict) -> CartesianGrid:
    g = manifest.get("grid", {})
    _check_keys(g, {"nx", "ny", "side_length"}, "grid")
    return CartesianGrid(g.get("nx", 32), g.get("ny", 32), g.get("side_length", 0.25))


def _sampler_from(manifest: dict) -> ConfigSampler:
    s = dict(manifest.get("sampler", {}))
    _check_keys(
        s,
        {"family", "n_per_direction", "length_range", "aperture_range", "side_length",
         "high_density_range"},
        "sampler",
    )
    for key in ("n_per_direction", "length_range", "aperture_range", "high_density_range"):
        if key in s:
            s[key] = tuple(s[key])
    return ConfigSampler(**s)


SIDECAR_URL_ENV = "FRACLAB_SIDECAR_URL"


def _provider_from(manifest: dict):
    p = manifest.get("provider", {"kind": "fallback"})
    _check_keys(p, {"kind", "url", "layer", "dim", "n_tokens"}, "provider")
    if p.get("kind", "fallback") == "fallback":
        return FallbackProvider(dim=p.get("dim", 256), n_tokens=p.get("n_tokens", 32))
    if p["kind"] == "remote":
        url = p.get("url") or os.environ.get(SIDECAR_URL_ENV)
        if not url:
            raise ManifestError(
                f"remote provider needs 'url' in the manifest or ${SIDECAR_URL_ENV}"
            )
        return RemoteProvider(url, layer=p.get("layer", 0))
    raise ManifestError(f"provider kind must be 'fallback' or 'remote', got {p.get('kind')!r}")


def _bank_from(manifest: dict, config: mdl.ModelConfig) -> tr.ContextBank:
    provider = _provider_from(manifest)
    cache = EmbedCache(manifest["cache_dir"]) if "cache_dir" in manifest else None
    return tr.ContextBank(provider, cache=cache, dim=config.context_dim)


def _materials_from(manifest: dict) -> dict:
    if "materials_file" in manifest:
        return load_materials(manifest["materials_file"])
    return material_registry()


# --------------------------------------------------------------------------- #
# gen-rulebased
# --------------------------------------------------------------------------- #

GEN_RULEBASED_KEYS = {"seed", "count", "grid", "sampler", "mode", "max_steps", "out"}


def cmd_gen_rulebased(manifest: dict, workers: int = 1) -> int:
    _check_keys(manifest, GEN_RULEBASED_KEYS, "gen-rulebased")
    seed = int(manifest.get("seed", 0))
    count = int(manifest.get("count", 0))
    grid = _grid_from(manifest)
    sampler = _sampler_from(manifest)
    if "mode" in manifest:
        m = manifest["mode"]
        _check_keys(m, {"arrest", "axis", "freeze_steps"}, "mode")
        modes: tuple[GrowthMode, ...] = (
            GrowthMode(m["arrest"], m["axis"], m.get("freeze_steps", 1)),
        )
    else:
        modes = ALL_MODES
    rng = SeededRng(seed)
    records, mode_counts = [], {}
    stream = stream_records(rng, grid, sampler, modes=modes,
                            max_steps=manifest.get("max_steps"))
    while len(records) < count:
        record, mode = next(stream)
        records.append(record)
        key = f"{mode.arrest}/{mode.axis}"
        mode_counts[key] = mode_counts.get(key, 0) + 1
    out = manifest["out"]
    write_shard(records, out)
    _stamp(out, manifest, seed)
    for key in sorted(mode_counts):
        print(f"mode {key}: {mode_counts[key]}")
    print(f"wrote {len(records)} record(s) to {out}")
    return 0


# --------------------------------------------------------------------------- #
# gen-phasefield
# --------------------------------------------------------------------------- #

GEN_PHASEFIELD_KEYS = {
    "seed", "count", "grid", "sampler", "material", "loading", "params",
    "out", "energy_dir", "materials_file",
}
PF_PARAM_KEYS = {
    "w0", "eta", "dt", "newmark_beta", "newmark_gamma", "vbar", "loading",
    "max_steps", "staggered_iters", "cg_tol", "cg_max_iters", "damage_cg_tol",
    "newton_tol", "newton_max",
}


def _phasefield_one(args) -> tuple[SampleRecord, list]:
    seed, index, grid_tuple, sampler, material, params, loading = args
    grid = CartesianGrid(*grid_tuple)
    rng = SeededRng(seed, stream=index)
    config = sample_config(sampler, rng)
    result = run_phasefield(config, material, params, grid)
    boundary = "axial loading" if loading == "uniaxial" else "biaxial loading"
    meta = DeckMeta("phase-field", material.name, boundary, "fracture pattern")
    coords = (grid.node_coords() / grid.side_length).astype(np.float32)
    record = SampleRecord(
        deck_text=render_deck(meta),
        coords=coords,
        # the input is the seeded damage field at t = 0
        input_field=result.psi_initial.astype(np.float32),
        final_field=result.psi_final.astype(np.float32),
        failure_time=result.failure_time,
        snapshots=result.snapshots,
        source="phasefield",
        seed=index,
        material=material.name,
        loading=boundary,
    )
    return record, result.energy_trace


def cmd_gen_phasefield(manifest: dict, workers: int = 1) -> int:
    _check_keys(manifest, GEN_PHASEFIELD_KEYS, "gen-phasefield")
    seed = int(manifest.get("seed", 0))
    count = int(manifest.get("count", 1))
    grid = _grid_from(manifest)
    sampler = _sampler_from(manifest)
    materials = _materials_from(manifest)
    name = manifest.get("material", "pbx").lower()
    if name not in materials:
        raise ManifestError(
            f"unknown material {name!r}; registry has {sorted(materials)}"
        )
    material = materials[name]
    p = dict(manifest.get("params", {}))
    _check_keys(p, PF_PARAM_KEYS, "params")
    loading = manifest.get("loading", "uniaxial")
    p["loading"] = loading
    params = PhaseFieldParams(**p)

    jobs = [
        (seed, k, (grid.nx, grid.ny, grid.side_length), sampler, material, params, loading)
        for k in range(count)
    ]
    if workers > 1:
        with Pool(workers) as pool:
            results = pool.map(_phasefield_one, jobs)
    else:
        results = [_phasefield_one(job) for job in jobs]

    records = [r for r, _ in results]
    out = manifest["out"]
    write_shard(records, out)
    _stamp(out, manifest, seed)
    if "energy_dir" in manifest:
        energy_dir = Path(manifest["energy_dir"])
        energy_dir.mkdir(parents=True, exist_ok=True)
        for k, (_, trace) in enumerate(results):
            energy_trace_csv(trace, energy_dir / f"run_{k:05d}.csv")
    censored = sum(1 for r in records if r.failure_time is None)
    print(f"wrote {len(records)} record(s) to {out} ({censored} censored)")
    return 0


# --------------------------------------------------------------------------- #
# pretrain / finetune
# --------------------------------------------------------------------------- #

MODEL_KEYS = set(mdl.ModelConfig.__dataclass_fields__)
PRETRAIN_KEYS = {
    "seed", "model", "data", "steps", "batch_size", "accumulation", "warmup",
    "lr", "weight_decay", "clip_norm", "mask", "task", "out", "trace",
    "provider", "cache_dir", "snapshot_cadence",
}
DATA_KEYS = {"source", "path", "grid", "sampler", "max_steps"}


def _source_from(manifest: dict) -> tr.StreamSource | tr.ListSource:
    d = manifest["data"]
    _check_keys(d, DATA_KEYS, "data")
    if d["source"] == "rulebased-stream":
        grid = _grid_from(d)
        sampler = _sampler_from(d)
        from .rulebased import generate_stream

        return tr.StreamSource(
            lambda rng: generate_stream(rng, grid, sampler, max_steps=d.get("max_steps"))
        )
    if d["source"] == "shard":
        return tr.ListSource(read_shard(d["path"]))
    raise ManifestError(f"data source must be 'rulebased-stream' or 'shard', got {d['source']!r}")


def cmd_pretrain(manifest: dict, workers: int = 1) -> int:
    _check_keys(manifest, PRETRAIN_KEYS, "pretrain")
    seed = int(manifest.get("seed", 0))
    mconf = dict(manifest.get("model", {}))
    _check_keys(mconf, MODEL_KEYS, "model")
    config = mdl.ModelConfig(**mconf)
    params = mdl.init_params(config, SeededRng(seed, stream=1))
    bank = _bank_from(manifest, config)
    optim = tr.OptimizerState(
        lr_setpoint=manifest.get("lr", 1e-4),
        weight_decay=manifest.get("weight_decay", 0.1),
        clip_norm=manifest.get("clip_norm", 0.5),
        accumulation=manifest.get("accumulation", 4),
    )
    stage = tr.StageSpec(
        name="pretrain",
        source=_source_from(manifest),
        steps=int(manifest["steps"]),
        mask=manifest.get("mask", "all"),
        batch_size=manifest.get("batch_size", 4),
        task=manifest.get("task", "field"),
        snapshot_cadence=manifest.get("snapshot_cadence", 0),
        checkpoint_path=manifest["out"],
    )
    params, rows = tr.train_stage(
        params, config, stage, SeededRng(seed, stream=2),
        bank=bank, optim=optim, warmup=manifest.get("warmup", 500),
    )
    _stamp(manifest["out"], manifest, seed)
    if "trace" in manifest:
        tr.write_trace_csv(rows, manifest["trace"])
    print(f"pretrained {stage.steps} step(s); final train mse {rows[-1].train_mse:.6f}")
    return 0


FINETUNE_KEYS = {
    "seed", "checkpoint", "task", "data", "steps", "batch_size", "accumulation",
    "warmup", "out", "trace", "provider", "cache_dir",
}


def cmd_finetune(manifest: dict, workers: int = 1) -> int:
    _check_keys(manifest, FINETUNE_KEYS, "finetune")
    seed = int(manifest.get("seed", 0))
    params, extra = ad.load_params(manifest["checkpoint"])
    config = mdl.ModelConfig.from_dict(extra["config"])
    bank = _bank_from(manifest, config)
    records = read_shard(manifest["data"]["path"])
    params, rows, normalizer = tr.finetune_task(
        params, config, manifest["task"], records, SeededRng(seed, stream=3),
        steps=manifest.get("steps"), bank=bank,
        batch_size=manifest.get("batch_size", 4),
        accumulation=manifest.get("accumulation", 1),
        warmup=manifest.get("warmup", 100),
        checkpoint_path=manifest["out"],
    )
    extra_out = {"config": config.to_dict()}
    if normalizer is not None:
        extra_out["target_normalizer"] = normalizer.stats
    ad.save_params(params, manifest["out"], extra=extra_out)
    _stamp(manifest["out"], manifest, seed)
    if "trace" in manifest:
        tr.write_trace_csv(rows, manifest["trace"])
    print(f"finetuned task {manifest['task']}; final train mse {rows[-1].train_mse:.6f}")
    return 0


# --------------------------------------------------------------------------- #
# predict / evaluate
# --------------------------------------------------------------------------- #

PREDICT_KEYS = {"checkpoint", "data", "out", "provider", "cache_dir", "model"}


def cmd_predict(manifest: dict, workers: int = 1) -> int:
    _check_keys(manifest, PREDICT_KEYS, "predict")
    params, extra = ad.load_params(manifest["checkpoint"])
    config = mdl.ModelConfig.from_dict(extra["config"])
    if "model" in manifest:
        wanted = dict(manifest["model"])
        mismatched = {
            k: (wanted[k], getattr(config, k))
            for k in wanted
            if getattr(config, k, None) != wanted[k]
        }
        if mismatched:
            raise ManifestError(
                f"checkpoint config does not match manifest model: {mismatched}"
            )
    bank = _bank_from(manifest, config)
    records = read_shard(manifest["data"]["path"])
    preds = [tr.predict_field(rec, params, config, bank) for rec in records]
    out = manifest["out"]
    np.savez(
        out,
        predictions=np.stack(preds).astype(np.float32),
        seeds=np.array([r.seed for r in records]),
    )
    _stamp(out, manifest, manifest.get("seed", 0))
    print(f"wrote {len(preds)} prediction(s) to {out}")
    return 0


EVALUATE_KEYS = {"checkpoint", "data", "task", "report", "provider", "cache_dir"}


def cmd_evaluate(manifest: dict, workers: int = 1) -> int:
    _check_keys(manifest, EVALUATE_KEYS, "evaluate")
    params, extra = ad.load_params(manifest["checkpoint"])
    config = mdl.ModelConfig.from_dict(extra["config"])
    bank = _bank_from(manifest, config)
    records = read_shard(manifest["data"]["path"])
    task = manifest.get("task", "field")
    if task == "field":
        report = tr.evaluate_field(records, params, config, bank)
        print(f"{'material':<12} {'loading':<18} {'L1':>10} {'MSE':>10} {'n':>5}")
        for (mat, loading), row in report["groups"].items():
            print(f"{mat:<12} {loading:<18} {row['l1']:>10.5f} {row['mse']:>10.5f} {row['count']:>5}")
        print(f"overall L1 {report['overall']['l1']:.5f}  MSE {report['overall']['mse']:.5f}")
        serializable = {
            "groups": {f"{m}|{l}": v for (m, l), v in report["groups"].items()},
            "overall": report["overall"],
        }
    elif task == "scalar":
        stats = extra.get("target_normalizer")
        normalizer = tr.TargetNormalizer({k: tuple(v) for k, v in stats.items()}) if stats else None
        report = tr.evaluate_scalar(records, params, config, bank, normalizer=normalizer)
        print(f"R^2 {report['r2']:.4f}  MAE {report['mae']:.5g}  n={report['count']}")
        serializable = report
    else:
        raise ManifestError(f"task must be 'field' or 'scalar', got {task!r}")
    if "report" in manifest:
        Path(manifest["report"]).write_text(json.dumps(serializable, indent=2), encoding="utf-8")
        _stamp(manifest["report"], manifest, manifest.get("seed", 0))
    return 0


# --------------------------------------------------------------------------- #
# entry point
# --------------------------------------------------------------------------- #

COMMANDS = {
    "gen-rulebased": cmd_gen_rulebased,
    "gen-phasefield": cmd_gen_phasefield,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fraclab",
        description="Multi-fidelity fracture prediction workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=True, help="path to the JSON manifest")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel workers across simulations/records")
    args = parser.parse_args(argv)
    try:
        manifest = _load_manifest(args.manifest)
        return COMMANDS[args.command](manifest, workers=args.workers)
    except (ManifestError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, FloatingPointError, ArithmeticError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
