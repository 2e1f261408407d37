"""Sample records, binary shard container, unstructured ingestion, splits.

Shard layout (all integers little-endian):

    b"FRSH" | u32 header_len | header JSON
    payload: records back to back (see _encode_record)
    index: per record, u64 offset into payload + u32 crc32 of its bytes
    u64 payload_len | 32-byte sha256(payload + index)

float32 on disk, float64 in compute. Shards are immutable after write;
readers verify the global checksum and report the first corrupt record.
"""
from __future__ import annotations

import hashlib
import json
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import SeededRng

MAGIC = b"FRSH"
FORMAT_VERSION = 1

PROGRESSION_POINTS = np.array([0.3 + 0.7 * k / 9.0 for k in range(10)], dtype=np.float32)

SOURCES = ("rulebased", "phasefield", "external")


class ShardCorruptionError(Exception):
    """Checksum mismatch; carries the byte offset of the corrupt region."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass
class SampleRecord:
    """One training example: deck text, token coordinates, fields, targets."""

    deck_text: str
    coords: np.ndarray  # (N, 2) float32, normalized to [0, 1]^2
    input_field: np.ndarray  # (N,) float32
    final_field: np.ndarray  # (N,) float32
    failure_time: float | None = None
    snapshots: np.ndarray | None = None  # (10, N) float32
    progression_points: np.ndarray | None = None  # (10,) float32
    source: str = "rulebased"
    seed: int = 0
    material: str = ""
    loading: str = ""

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        self.input_field = np.ascontiguousarray(self.input_field, dtype=np.float32)
        self.final_field = np.ascontiguousarray(self.final_field, dtype=np.float32)
        n = self.coords.shape[0]
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must be (N, 2), got {self.coords.shape}")
        if self.input_field.shape != (n,) or self.final_field.shape != (n,):
            raise ValueError("field lengths must match the number of coordinates")
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.snapshots is not None:
            self.snapshots = np.ascontiguousarray(self.snapshots, dtype=np.float32)
            if self.snapshots.shape != (10, n):
                raise ValueError(f"snapshots must be (10, N), got {self.snapshots.shape}")
            if self.progression_points is None:
                self.progression_points = PROGRESSION_POINTS.copy()
            self.progression_points = np.ascontiguousarray(
                self.progression_points, dtype=np.float32
            )
            if self.progression_points.shape != (10,) or not np.allclose(
                self.progression_points, PROGRESSION_POINTS, atol=1e-6
            ):
                raise ValueError("progression points must be 0.3 + 0.7k/9, k = 0..9")

    @property
    def n_tokens(self) -> int:
        return self.coords.shape[0]


# --------------------------------------------------------------------------- #
# Shard encode / decode
# --------------------------------------------------------------------------- #

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _encode_record(rec: SampleRecord, schema: dict) -> bytes:
    out = [_pack_str(rec.deck_text), struct.pack("<I", rec.n_tokens)]
    out.append(rec.coords.astype("<f4").tobytes())
    out.append(rec.input_field.astype("<f4").tobytes())
    out.append(rec.final_field.astype("<f4").tobytes())
    if schema["has_failure_time"]:
        ft = np.float32(np.nan if rec.failure_time is None else rec.failure_time)
        out.append(struct.pack("<f", ft))
    if schema["has_snapshots"]:
        out.append(rec.snapshots.astype("<f4").tobytes())
        out.append(rec.progression_points.astype("<f4").tobytes())
    out.append(_pack_str(rec.source))
    out.append(struct.pack("<q", rec.seed))
    out.append(_pack_str(rec.material))
    out.append(_pack_str(rec.loading))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        chunk = self.buf[self.pos : self.pos + n]
        if len(chunk) != n:
            raise ValueError("truncated record")
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()


def _decode_record(buf: bytes, schema: dict) -> SampleRecord:
    r = _Reader(buf)
    deck = r.text()
    n = r.u32()
    coords = r.f32_array(2 * n).reshape(n, 2)
    input_field = r.f32_array(n)
    final_field = r.f32_array(n)
    failure_time = None
    if schema["has_failure_time"]:
        (ft,) = struct.unpack("<f", r.take(4))
        failure_time = None if np.isnan(ft) else float(ft)
    snapshots = progression = None
    if schema["has_snapshots"]:
        snapshots = r.f32_array(10 * n).reshape(10, n)
        progression = r.f32_array(10)
    source = r.text()
    (seed,) = struct.unpack("<q", r.take(8))
    material = r.text()
    loading = r.text()
    return SampleRecord(
        deck_text=deck,
        coords=coords,
        input_field=input_field,
        final_field=final_field,
        failure_time=failure_time,
        snapshots=snapshots,
        progression_points=progression,
        source=source,
        seed=seed,
        material=material,
        loading=loading,
    )


def _schema_of(rec: SampleRecord) -> dict:
    return {
        "has_failure_time": rec.failure_time is not None,
        "has_snapshots": rec.snapshots is not None,
    }


def write_shard(records: list[SampleRecord], path: str | Path) -> None:
    """Write records to a shard; schema is fixed by the first record.

    A censored failure_time (None) is storable inside a failure_time-bearing
    shard as a NaN sentinel; snapshot presence must be uniform.
    """
    path = Path(path)
    if records:
        schema = {
            "has_failure_time": any(r.failure_time is not None for r in records),
            "has_snapshots": records[0].snapshots is not None,
        }
        for k, rec in enumerate(records):
            if (rec.snapshots is not None) != schema["has_snapshots"]:
                raise ValueError(f"schema drift at record {k}: snapshots presence differs")
    else:
        schema = {"has_failure_time": False, "has_snapshots": False}

    encoded = [_encode_record(rec, schema) for rec in records]
    offsets = np.zeros(len(encoded), dtype="<u8")
    crcs = np.zeros(len(encoded), dtype="<u4")
    pos = 0
    for k, blob in enumerate(encoded):
        offsets[k] = pos
        crcs[k] = zlib.crc32(blob)
        pos += len(blob)
    payload = b"".join(encoded)
    index = b"".join(
        struct.pack("<QI", int(offsets[k]), int(crcs[k])) for k in range(len(encoded))
    )
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "record_count": len(records),
            "fields": {
                "coords": "float32",
                "input_field": "float32",
                "final_field": "float32",
            },
            **schema,
        }
    ).encode("utf-8")
    digest = hashlib.sha256(payload + index).digest()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(index)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(digest)
    tmp.replace(path)


def read_shard(path: str | Path) -> list[SampleRecord]:
    """Read a shard back; corruption raises ShardCorruptionError with offset."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a shard file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported shard format version {header['format_version']}")
    count = header["record_count"]
    payload_start = 8 + header_len
    (payload_len,) = struct.unpack("<Q", raw[-40:-32])
    digest = raw[-32:]
    index_start = payload_start + payload_len
    payload = raw[payload_start:index_start]
    index = raw[index_start:-40]
    if hashlib.sha256(payload + index).digest() != digest:
        # localize: find the first record whose crc no longer matches
        schema = {k: header[k] for k in ("has_failure_time", "has_snapshots")}
        for k in range(count):
            off, crc = struct.unpack_from("<QI", index, 12 * k)
            end = struct.unpack_from("<QI", index, 12 * (k + 1))[0] if k + 1 < count else payload_len
            if zlib.crc32(payload[off:end]) != crc:
                raise ShardCorruptionError(
                    f"checksum mismatch in record {k}", payload_start + off
                )
        raise ShardCorruptionError("checksum mismatch in shard index", index_start)
    schema = {k: header[k] for k in ("has_failure_time", "has_snapshots")}
    records = []
    for k in range(count):
        off, _crc = struct.unpack_from("<QI", index, 12 * k)
        end = struct.unpack_from("<QI", index, 12 * (k + 1))[0] if k + 1 < count else payload_len
        records.append(_decode_record(payload[off:end], schema))
    return records


def write_shard_index(entries: list[tuple[str, int]], path: str | Path) -> None:
    """Index file: list of {path, records} for a sharded dataset."""
    payload = [{"path": str(p), "records": int(n)} for p, n in entries]
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")


def read_shard_index(path: str | Path) -> list[tuple[str, int]]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return [(e["path"], e["records"]) for e in payload]


# --------------------------------------------------------------------------- #
# Unstructured (edge-center) ingestion
# --------------------------------------------------------------------------- #

UNSTRUCTURED_FIELDS = ("x", "y", "initial", "damage")


def write_unstructured(
    path: str | Path,
    x: np.ndarray,
    y: np.ndarray,
    initial: np.ndarray,
    damage: np.ndarray,
    bounds: tuple[float, float, float, float],
    metadata: dict | None = None,
) -> None:
    """Write the documented edge-center exchange format.

    Header JSON {bounds, n_edges, fields} followed by the named float32
    arrays, little-endian, in declared order.
    """
    n = len(x)
    arrays = {"x": x, "y": y, "initial": initial, "damage": damage}
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "bounds": list(map(float, bounds)),
            "n_edges": n,
            "fields": [{"name": k, "dtype": "float32"} for k in UNSTRUCTURED_FIELDS],
            "metadata": metadata or {},
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in UNSTRUCTURED_FIELDS:
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            if arr.shape != (n,):
                raise ValueError(f"field {name!r} must have {n} entries")
            fh.write(arr.tobytes())


def ingest_unstructured(path: str | Path) -> SampleRecord:
    """Load an edge-center sample; coordinates are normalized to [0, 1]^2."""
    raw = Path(path).read_bytes()
    (header_len,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    n = int(header["n_edges"])
    declared = [f["name"] for f in header["fields"]]
    for required in UNSTRUCTURED_FIELDS:
        if required not in declared:
            raise ValueError(f"unstructured file missing required field {required!r}")
    pos = 4 + header_len
    arrays = {}
    for name in declared:
        arrays[name] = np.frombuffer(raw[pos : pos + 4 * n], dtype="<f4").copy()
        if len(arrays[name]) != n:
            raise ValueError(f"field {name!r} truncated")
        pos += 4 * n
    xmin, ymin, xmax, ymax = header["bounds"]
    x, y = arrays["x"], arrays["y"]
    if np.any(x < xmin) or np.any(x > xmax) or np.any(y < ymin) or np.any(y > ymax):
        raise ValueError("coordinates fall outside the declared bounding box")
    for name in ("initial", "damage"):
        if not np.all(np.isfinite(arrays[name])):
            raise ValueError(f"field {name!r} contains non-finite values")
    coords = np.column_stack(
        [(x - xmin) / (xmax - xmin), (y - ymin) / (ymax - ymin)]
    ).astype(np.float32)
    meta = header.get("metadata", {})
    return SampleRecord(
        deck_text=meta.get("deck_text", ""),
        coords=coords,
        input_field=arrays["initial"],
        final_field=arrays["damage"],
        source="external",
        seed=int(meta.get("seed", 0)),
        material=meta.get("material", ""),
        loading=meta.get("loading", ""),
    )


# --------------------------------------------------------------------------- #
# Split management
# --------------------------------------------------------------------------- #

def _largest_remainder(ideal: np.ndarray, total: int) -> np.ndarray:
    counts = np.floor(ideal).astype(int)
    remainder = ideal - counts
    for _ in range(total - counts.sum()):
        k = int(np.argmax(remainder))
        counts[k] += 1
        remainder[k] = -1.0
    return counts


def split(
    records: list[SampleRecord],
    fractions: tuple[float, ...],
    seed: int,
) -> list[np.ndarray]:
    """Deterministic disjoint index sets, stratified by (material, loading).

    Global split sizes follow the fractions exactly (largest remainder over
    the whole dataset); the leftover slots within each stratum are then
    steered toward splits still short of their global target, keeping
    per-stratum counts within +/- 1 of proportional.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(records)
    fr = np.asarray(fractions, dtype=np.float64)
    n_splits = len(fractions)
    global_counts = _largest_remainder(fr * n, n)

    strata: dict[tuple[str, str], list[int]] = {}
    for idx, rec in enumerate(records):
        strata.setdefault((rec.material, rec.loading), []).append(idx)
    keys = sorted(strata)

    base = {key: np.floor(fr * len(strata[key])).astype(int) for key in keys}
    deficits = global_counts - sum(base[key] for key in keys) if keys else global_counts
    counts = {}
    for key in keys:
        members = strata[key]
        if len(members) < (fr > 0).sum():
            warnings.warn(
                f"stratum {key} has only {len(members)} record(s); "
                "some splits will not sample it",
                stacklevel=2,
            )
        c = base[key].copy()
        rem = fr * len(members) - c
        for _ in range(len(members) - c.sum()):
            candidates = np.flatnonzero(deficits > 0)
            k = int(candidates[np.argmax(rem[candidates])])
            c[k] += 1
            deficits[k] -= 1
            rem[k] = -1.0
        counts[key] = c

    rng = SeededRng(seed)
    out: list[list[int]] = [[] for _ in range(n_splits)]
    for key in keys:
        members = np.array(strata[key], dtype=np.int64)
        rng.gen.shuffle(members)
        start = 0
        for k in range(n_splits):
            out[k].extend(members[start : start + counts[key][k]].tolist())
            start += counts[key][k]
    return [np.array(sorted(part), dtype=np.int64) for part in out]
