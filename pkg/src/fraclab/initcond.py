"""Random initial fracture configurations, training and evaluation families.

Sampling follows the generation recipe used for the simulation campaigns:
per-direction fracture counts uniform in [3, 15], lengths uniform in
[1, 5] cm, apertures log-uniform in [0.5, 5] mm, centers uniform over the
0.25 m square domain, with boundary-crossing segments clipped. Evaluation
families (single / high_density / low_density / random_orientation) probe
out-of-distribution initial conditions.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .core import (
    HORIZONTAL,
    VERTICAL,
    FractureConfig,
    FractureSegment,
    SeededRng,
    clip_segment,
)

FAMILIES = ("training", "single", "high_density", "low_density", "random_orientation")
EVAL_FAMILIES = ("single", "high_density", "low_density", "random_orientation")


@dataclass(frozen=True)
class ConfigSampler:
    family: str = "training"
    n_per_direction: tuple[int, int] = (3, 15)
    length_range: tuple[float, float] = (0.01, 0.05)
    aperture_range: tuple[float, float] = (0.0005, 0.005)
    side_length: float = 0.25
    high_density_range: tuple[int, int] = (30, 60)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        for lo, hi in (self.n_per_direction, self.length_range, self.aperture_range):
            if not (0 < lo <= hi):
                raise ValueError("sampler ranges must be positive and nonempty")


def _draw_segment(sampler: ConfigSampler, rng: SeededRng, angle: float) -> FractureSegment:
    cx = float(rng.uniform(0.0, sampler.side_length))
    cy = float(rng.uniform(0.0, sampler.side_length))
    length = float(rng.uniform(*sampler.length_range))
    lo, hi = sampler.aperture_range
    aperture = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    return FractureSegment(center=(cx, cy), length=length, aperture=aperture, angle=angle)


def _sample_segments_raw(sampler: ConfigSampler, rng: SeededRng) -> list[FractureSegment]:
    """Unclipped draws; exposed separately so tests can check the raw bounds."""
    n_lo, n_hi = sampler.n_per_direction
    segments: list[FractureSegment] = []
    if sampler.family == "training":
        n_h = int(rng.integers(n_lo, n_hi + 1))
        n_v = int(rng.integers(n_lo, n_hi + 1))
        segments += [_draw_segment(sampler, rng, HORIZONTAL) for _ in range(n_h)]
        segments += [_draw_segment(sampler, rng, VERTICAL) for _ in range(n_v)]
    elif sampler.family == "single":
        angle = HORIZONTAL if rng.integers(0, 2) == 0 else VERTICAL
        segments.append(_draw_segment(sampler, rng, angle))
    elif sampler.family == "high_density":
        d_lo, d_hi = sampler.high_density_range
        n_h = int(rng.integers(d_lo, d_hi + 1))
        n_v = int(rng.integers(d_lo, d_hi + 1))
        segments += [_draw_segment(sampler, rng, HORIZONTAL) for _ in range(n_h)]
        segments += [_draw_segment(sampler, rng, VERTICAL) for _ in range(n_v)]
    elif sampler.family == "low_density":
        n = int(rng.integers(1, 3))
        for _ in range(n):
            angle = HORIZONTAL if rng.integers(0, 2) == 0 else VERTICAL
            segments.append(_draw_segment(sampler, rng, angle))
    else:  # random_orientation
        n_a = int(rng.integers(n_lo, n_hi + 1))
        n_b = int(rng.integers(n_lo, n_hi + 1))
        for _ in range(n_a + n_b):
            angle = float(rng.uniform(0.0, math.pi))
            segments.append(_draw_segment(sampler, rng, angle))
    return segments


def sample_config(sampler: ConfigSampler, rng: SeededRng) -> FractureConfig:
    """One configuration draw; boundary-crossing segments are clipped.

    Centers lie inside the domain so clipping always leaves a nonempty
    segment; clipped lengths may fall below the sampled lower bound.
    """
    raw = _sample_segments_raw(sampler, rng)
    clipped = [clip_segment(seg, sampler.side_length) for seg in raw]
    return FractureConfig(
        segments=tuple(seg for seg in clipped if seg is not None),
        side_length=sampler.side_length,
    )


def sample_eval_family(family: str, rng: SeededRng, side_length: float = 0.25) -> FractureConfig:
    """Draw from one of the out-of-distribution evaluation families."""
    if family not in EVAL_FAMILIES:
        raise ValueError(f"unknown family {family!r}; valid families: {', '.join(EVAL_FAMILIES)}")
    return sample_config(ConfigSampler(family=family, side_length=side_length), rng)


# --------------------------------------------------------------------------- #
# JSON export / import (bit-exact round trip)
# --------------------------------------------------------------------------- #

def config_to_json(config: FractureConfig) -> str:
    payload = {
        "side_length": config.side_length,
        "segments": [
            {
                "center": list(seg.center),
                "length": seg.length,
                "aperture": seg.aperture,
                "angle": seg.angle,
            }
            for seg in config.segments
        ],
    }
    return json.dumps(payload, indent=2)


def config_from_json(text: str) -> FractureConfig:
    payload = json.loads(text)
    segments = tuple(
        FractureSegment(
            center=(float(s["center"][0]), float(s["center"][1])),
            length=float(s["length"]),
            aperture=float(s["aperture"]),
            angle=float(s["angle"]),
        )
        for s in payload["segments"]
    )
    return FractureConfig(segments=segments, side_length=float(payload["side_length"]))


def save_config(config: FractureConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_json(config), encoding="utf-8")


def load_config(path: str | Path) -> FractureConfig:
    return config_from_json(Path(path).read_text(encoding="utf-8"))
