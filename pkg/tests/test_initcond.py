"""Sampling distributions, evaluation families, config round trips."""
import math

import numpy as np
import pytest

from fraclab.core import CartesianGrid, SeededRng, rasterize_config
from fraclab.initcond import (
    ConfigSampler,
    _sample_segments_raw,
    config_from_json,
    config_to_json,
    load_config,
    sample_config,
    sample_eval_family,
    save_config,
)


class TestTrainingFamily:
    def test_determinism(self):
        sampler = ConfigSampler()
        a = sample_config(sampler, SeededRng(0))
        b = sample_config(sampler, SeededRng(0))
        assert a == b

    def test_distributional_bounds_hold_for_all_draws(self):
        sampler = ConfigSampler()
        rng = SeededRng(2024)
        log_apertures = []
        for _ in range(10_000):
            raw = _sample_segments_raw(sampler, rng)
            n_h = sum(1 for s in raw if s.orientation == "horizontal")
            n_v = sum(1 for s in raw if s.orientation == "vertical")
            assert 3 <= n_h <= 15 and 3 <= n_v <= 15
            for seg in raw:
                assert 0.01 <= seg.length <= 0.05
                assert 0.0005 <= seg.aperture <= 0.005
                log_apertures.append(math.log(seg.aperture))
        # log-uniform: mean of log within 3 sigma of the midpoint
        lo, hi = math.log(0.0005), math.log(0.005)
        mean_expected = 0.5 * (lo + hi)
        sigma = (hi - lo) / math.sqrt(12) / math.sqrt(len(log_apertures))
        assert abs(np.mean(log_apertures) - mean_expected) < 3 * sigma

    def test_emitted_configs_clipped_inside_domain(self):
        sampler = ConfigSampler()
        rng = SeededRng(5)
        for _ in range(200):
            cfg = sample_config(sampler, rng)
            for seg in cfg.segments:
                a, b = seg.endpoints()
                for p in (a, b):
                    assert -1e-9 <= p[0] <= 0.25 + 1e-9
                    assert -1e-9 <= p[1] <= 0.25 + 1e-9


class TestEvalFamilies:
    def test_single_family(self):
        cfg = sample_eval_family("single", SeededRng(1))
        assert len(cfg.segments) == 1

    def test_single_rasterizes_connected(self):
        g = CartesianGrid(32, 32, 0.25)
        cfg = sample_eval_family("single", SeededRng(3))
        occ = rasterize_config(cfg, g).as_matrix().astype(bool)
        if occ.any():
            from scipy import ndimage

            structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
            _, n = ndimage.label(occ, structure=structure)
            assert n == 1

    def test_high_density_counts(self):
        rng = SeededRng(7)
        for _ in range(20):
            cfg = sample_eval_family("high_density", rng)
            assert len(cfg.segments) >= 60
            for seg in cfg.segments:
                a, b = seg.endpoints()
                assert 0 - 1e-9 <= min(a[0], b[0]) and max(a[0], b[0]) <= 0.25 + 1e-9

    def test_low_density_counts(self):
        rng = SeededRng(9)
        for _ in range(50):
            cfg = sample_eval_family("low_density", rng)
            assert 1 <= len(cfg.segments) <= 2

    def test_random_orientation_has_oblique(self):
        cfg = sample_eval_family("random_orientation", SeededRng(11))
        assert any(s.orientation == "oblique" for s in cfg.segments)

    def test_unknown_family_rejected_with_listing(self):
        with pytest.raises(ValueError, match="high_density"):
            sample_eval_family("bogus", SeededRng(0))


class TestRoundTrip:
    def test_json_bit_exact(self):
        cfg = sample_config(ConfigSampler(), SeededRng(123))
        text = config_to_json(cfg)
        back = config_from_json(text)
        assert back == cfg  # dataclass equality on exact floats

    def test_file_round_trip(self, tmp_path):
        cfg = sample_eval_family("random_orientation", SeededRng(5))
        path = tmp_path / "cfg.json"
        save_config(cfg, path)
        assert load_config(path) == cfg
