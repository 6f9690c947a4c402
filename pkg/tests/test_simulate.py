import io
import math

import numpy as np
import pytest

from pminfer.logodds import IncrementPath, from_increments, to_increments
from pminfer.model import gate_weights, paper_default_params
from pminfer.simulate import (
    SimConfig,
    SimulationFault,
    VolumeDesign,
    perturb_increments,
    read_history_csv,
    sample_volumes,
    simulate_history,
    write_history_csv,
)


class TestSampleVolumes:
    def test_constant(self):
        v = sample_volumes(VolumeDesign.constant(2.0), 3, np.random.default_rng(0))
        np.testing.assert_array_equal(v, [2.0, 2.0, 2.0])

    def test_gamma_mean(self):
        v = sample_volumes(VolumeDesign.gamma_iid(2.0, 0.5), 1_000_000, np.random.default_rng(1))
        assert v.mean() == pytest.approx(1.0, abs=0.005)
        assert np.all(v >= 0)

    def test_explicit_and_mismatch(self):
        design = VolumeDesign.explicit([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(
            sample_volumes(design, 3, np.random.default_rng(0)), [1.0, 2.0, 3.0]
        )
        with pytest.raises(ValueError):
            sample_volumes(design, 4, np.random.default_rng(0))

    def test_invalid_designs(self):
        with pytest.raises(ValueError):
            VolumeDesign.gamma_iid(-1.0, 0.5)
        with pytest.raises(ValueError):
            VolumeDesign.constant(-2.0)
        with pytest.raises(ValueError):
            VolumeDesign.explicit([-1.0])
        with pytest.raises(ValueError):
            VolumeDesign(kind="weird")


class TestSimulateHistory:
    def test_zero_increments_keep_price_constant(self):
        # degenerate-diffusion limit, exercised through the increment hook
        h = from_increments(IncrementPath(x0=0.0, dx=np.zeros(10)), np.ones(10))
        np.testing.assert_array_equal(h.p, np.full(11, 0.5))

    def test_determinism(self):
        cfg = SimConfig(T=50, y=1, theta=paper_default_params(),
                        design=VolumeDesign.gamma_iid(), seed=123)
        h1, h2 = simulate_history(cfg), simulate_history(cfg)
        np.testing.assert_array_equal(h1.p, h2.p)
        np.testing.assert_array_equal(h1.v, h2.v)

    def test_positive_drift_toward_truth(self):
        # eta(v) > 0 under defaults, so mean terminal price exceeds p0
        th = paper_default_params()
        terminal = []
        for r in range(1000):
            cfg = SimConfig(T=500, y=1, theta=th,
                            design=VolumeDesign.gamma_iid(), seed=5000 + r)
            try:
                terminal.append(simulate_history(cfg).p[-1])
            except SimulationFault:
                continue
        assert len(terminal) > 900
        assert np.mean(terminal) > 0.5

    def test_round_trip_through_increments(self):
        cfg = SimConfig(T=100, y=0, theta=paper_default_params(),
                        design=VolumeDesign.gamma_iid(), seed=9)
        h = simulate_history(cfg)
        back = from_increments(to_increments(h), h.v)
        assert np.max(np.abs(back.p - h.p)) < 1e-12

    def test_increment_moments_match_model(self):
        # constant v=2: per-step mean is the gate-weighted drift
        th = paper_default_params()
        cfg = SimConfig(T=100_000, y=1, theta=th,
                        design=VolumeDesign.constant(2.0), seed=77, p0=0.5)
        rng = np.random.default_rng(cfg.seed)
        v = sample_volumes(cfg.design, cfg.T, rng)
        from pminfer.model import sample_increment

        dx = sample_increment(cfg.y, v, th, rng)
        w = gate_weights(2.0, th)
        model_mean = w[0] * 0.5 * (1 - math.exp(-0.2))
        se = dx.std() / math.sqrt(len(dx))
        assert abs(dx.mean() - model_mean) < 3 * se

    def test_overflow_is_a_fault(self):
        th = paper_default_params().replace(mu1=3.0, lambda1=5.0, sigma1=0.05)
        th = th.replace(omega=np.array([1.0, 0.0, 0.0]))
        cfg = SimConfig(T=2000, y=1, theta=th,
                        design=VolumeDesign.constant(5.0), seed=1)
        with pytest.raises(SimulationFault):
            simulate_history(cfg)

    def test_seed_isolation_across_replications(self):
        th = paper_default_params()
        base = 31_000
        lead = []
        for r in range(200):
            cfg = SimConfig(T=50, y=1, theta=th,
                            design=VolumeDesign.gamma_iid(), seed=base + r)
            lead.append(to_increments(simulate_history(cfg)).dx)
        lead = np.array(lead)
        # adjacent-replication correlation of increments is noise-level
        corr = np.corrcoef(lead[:-1].ravel(), lead[1:].ravel())[0, 1]
        assert abs(corr) < 0.02


class TestPerturb:
    def _history(self, T=100, seed=4):
        cfg = SimConfig(T=T, y=1, theta=paper_default_params(),
                        design=VolumeDesign.gamma_iid(), seed=seed)
        return simulate_history(cfg)

    def test_zero_sigma_identity(self):
        h = self._history()
        hp, rejected = perturb_increments(h, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(hp.p, h.p)
        assert rejected == 0

    def test_mean_absolute_perturbation(self):
        # E sum|eps| = T * sigma * sqrt(2/pi)
        h = self._history()
        rng = np.random.default_rng(8)
        totals = []
        for _ in range(400):
            hp, _ = perturb_increments(h, 0.1, rng)
            totals.append(np.sum(np.abs(to_increments(hp).dx - to_increments(h).dx)))
        expected = 100 * 0.1 * math.sqrt(2 / math.pi)
        assert np.mean(totals) == pytest.approx(expected, rel=0.03)

    def test_volumes_and_p0_unchanged(self):
        h = self._history()
        hp, _ = perturb_increments(h, 0.2, np.random.default_rng(1))
        np.testing.assert_array_equal(hp.v, h.v)
        assert hp.p[0] == h.p[0]

    def test_out_of_range_perturbations_are_resampled(self):
        # start close to the boundary so large noise forces rejections
        x0 = 33.0
        h = from_increments(IncrementPath(x0=x0, dx=np.full(50, 0.05)), np.ones(50))
        rng = np.random.default_rng(2)
        hp, rejected = perturb_increments(h, 1.0, rng, max_attempts=10_000)
        assert rejected > 0
        assert np.all((hp.p > 0) & (hp.p < 1))


class TestHistoryCsv:
    def test_round_trip_exact(self, tmp_path):
        h = self_history = simulate_history(
            SimConfig(T=30, y=1, theta=paper_default_params(),
                      design=VolumeDesign.gamma_iid(), seed=2)
        )
        path = tmp_path / "history.csv"
        write_history_csv(path, h)
        back = read_history_csv(path)
        np.testing.assert_array_equal(back.p, h.p)
        np.testing.assert_array_equal(back.v, h.v)

    def test_header_and_empty_volume_cell(self):
        h = from_increments(IncrementPath(x0=0.0, dx=np.array([0.1])), np.array([2.0]))
        buf = io.StringIO()
        write_history_csv(buf, h)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "t,p,v"
        assert lines[1] == "0,0.5,"
        assert lines[2].startswith("1,")

    def test_bad_header_rejected(self):
        with pytest.raises(ValueError):
            read_history_csv(io.StringIO("a,b,c\n"))
