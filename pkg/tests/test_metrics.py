from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from partstyle.field import FieldConfig
from partstyle.metrics import PSNR_CAP, consistency_study, image_metrics
from partstyle.trainer import TrainConfig

TINY = TrainConfig(
    iterations=3, image_size=64, grid_size=8, anchor_azimuths=4, turntable_views=1,
    field=FieldConfig(hidden_width=16, num_frequencies=2),
)

images = arrays(np.float64, (16, 16, 3), elements=st.floats(0, 1))


def test_identical_images():
    a = np.random.default_rng(0).random((32, 32, 3))
    m = image_metrics(a, a)
    assert m["mse"] == 0.0 and m["psnr"] == PSNR_CAP and m["ssim"] == pytest.approx(1.0)
    assert m["perceptual"] is None


def test_constant_inversion():
    m = image_metrics(np.zeros((16, 16, 3)), np.ones((16, 16, 3)))
    assert m["mse"] == 1.0 and m["psnr"] == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        image_metrics(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


def test_perceptual_plugin_called():
    m = image_metrics(np.zeros((16, 16, 3)), np.ones((16, 16, 3)), perceptual=lambda a, b: 0.25)
    assert m["perceptual"] == 0.25


@settings(max_examples=30, deadline=None)
@given(images, images)
def test_sanity_and_symmetry(a, b):
    ab, ba = image_metrics(a, b), image_metrics(b, a)
    assert ab["mse"] >= 0 and -1 <= ab["ssim"] <= 1 + 1e-12
    assert ab["ssim"] == pytest.approx(ba["ssim"], abs=1e-12)
    assert ab["mse"] == ba["mse"]


@settings(max_examples=30, deadline=None)
@given(images, st.floats(0.01, 0.3), st.floats(0.01, 0.3))
def test_psnr_decreases_with_mse(a, s1, s2):
    lo, hi = sorted((s1, s2))
    if hi - lo < 1e-6:
        return
    b1, b2 = np.clip(a + lo, 0, 1), np.clip(a + hi, 0, 1)
    m1, m2 = image_metrics(a, b1), image_metrics(a, b2)
    if m1["mse"] < m2["mse"]:
        assert m1["psnr"] > m2["psnr"]


class TestStudy:
    def test_identical_seeds_zero_mse(self, body_handle):
        report = consistency_study(TINY, body_handle, "red body, blue handle", 2, seeds=[4, 4])
        assert len(report.pairs) == 1 and report.pairs[0]["metrics"]["mse"] == 0.0

    def test_every_pair_once(self, body_handle):
        report = consistency_study(TINY, body_handle, "red body, blue handle", 4, seeds=[0, 1, 2, 3])
        pairs = [(p["i"], p["j"]) for p in report.pairs]
        assert sorted(pairs) == [(i, j) for i in range(4) for j in range(i + 1, 4)]
        assert set(report.summary) == {"mse", "psnr", "ssim"}
        assert all(np.isfinite(v["mean"]) and np.isfinite(v["std"]) for v in report.summary.values())
        assert "pairs: 6" in report.table()

    def test_failed_runs_excluded(self, body_handle, monkeypatch):
        import partstyle.trainer as trainer_mod

        real = trainer_mod.run

        def flaky(config, *a, **kw):
            if config.seed == 1:
                raise RuntimeError("boom")
            return real(config, *a, **kw)

        monkeypatch.setattr(trainer_mod, "run", flaky)
        report = consistency_study(TINY, body_handle, "red body, blue handle", 3, seeds=[0, 1, 2])
        assert list(report.failed) == [1] and "boom" in report.failed[1]
        assert [(p["seed_i"], p["seed_j"]) for p in report.pairs] == [(0, 2)]

    def test_needs_two_runs(self, body_handle):
        with pytest.raises(ValueError):
            consistency_study(TINY, body_handle, "red body, blue handle", 1)

    def test_anchor_shared(self, body_handle):
        report = consistency_study(replace(TINY, iterations=1), body_handle, "red body, blue handle", 2, seeds=[0, 1])
        assert report.manifest["anchor"] is not None and len(report.manifest["final_mesh_hashes"]) == 2
