import math

import numpy as np
import pytest

from conftest import tmsv_sigma
from twomode.errors import DomainError, UnphysicalStateError
from twomode.gaussian import GaussianState, entanglement_witness, quadrature_variance, vacuum_state
from twomode.squeezer import PUBLISHED_PARAMS, SqueezerParams, predict_covariance
from twomode.estimator import (
    MOMENT_NAMES,
    MomentAccumulator,
    _row_moments,
    bin_variances,
    estimate_state,
    parametric_bootstrap,
    phase_nonuniformity,
    repeatability_trials,
    state_from_moments,
)
from twomode.synth import AcquisitionConfig, QuadratureDataset, generate_dataset, schedule

PUBLISHED_STATE = predict_covariance(PUBLISHED_PARAMS)


def config(n_records, seed=1, **kw):
    return AcquisitionConfig(n_records=n_records, seed=seed, **kw)


def influence(data):
    """Per-sample terms whose means give the covariance entries of a zero-mean state."""
    c1, s1 = np.cos(data.theta1).ravel(), np.sin(data.theta1).ravel()
    c2, s2 = np.cos(data.theta2).ravel(), np.sin(data.theta2).ravel()
    a1, b1 = data.w1.ravel() * c1, data.w1.ravel() * s1
    a2, b2 = data.w2.ravel() * c2, data.w2.ravel() * s2
    return {
        (0, 0): 3 * a1 * a1 - b1 * b1,
        (1, 1): 3 * b1 * b1 - a1 * a1,
        (0, 1): 4 * a1 * b1,
        (2, 2): 3 * a2 * a2 - b2 * b2,
        (3, 3): 3 * b2 * b2 - a2 * a2,
        (2, 3): 4 * a2 * b2,
        (0, 2): 4 * a1 * a2,
        (0, 3): 4 * a1 * b2,
        (1, 2): 4 * b1 * a2,
        (1, 3): 4 * b1 * b2,
    }


class TestEstimate:
    def test_all_zero_data(self):
        t1, t2 = schedule(AcquisitionConfig())
        data = QuadratureDataset(t1, np.zeros((2, t1.size)), t2, np.zeros((2, t1.size)))
        est = estimate_state(data)
        assert np.array_equal(est.state.mu, np.zeros(4))
        assert np.array_equal(est.state.sigma, np.zeros((4, 4)))
        assert est.physical is False

    def test_vacuum_within_five_standard_errors(self):
        data = generate_dataset(vacuum_state(), config(100, seed=21))
        est = estimate_state(data)
        n = len(data)
        for (i, j), f in influence(data).items():
            se = np.std(f, ddof=1) / math.sqrt(n)
            assert abs(est.state.sigma[i, j] - vacuum_state().sigma[i, j]) < 5 * se
        assert np.all(np.abs(est.state.mu) < 5 * math.sqrt(2 / n))

    def test_exactly_symmetric(self):
        est = estimate_state(generate_dataset(PUBLISHED_STATE, config(3)))
        assert np.array_equal(est.state.sigma, est.state.sigma.T)

    def test_recovers_means(self):
        state = GaussianState(np.array([0.8, -0.3, 0.1, 0.5]), PUBLISHED_STATE.sigma)
        data = generate_dataset(state, config(50, seed=4))
        est = estimate_state(data)
        assert np.allclose(est.state.mu, state.mu, atol=5 * math.sqrt(2 * 3 / len(data)))

    def test_moment_inversion_is_exact_on_population_moments(self):
        # feed the analytic uniform-phase moments of a known state back through the inversion
        mu = np.array([0.2, -0.1, 0.4, 0.3])
        sigma = PUBLISHED_STATE.sigma
        second = sigma + np.outer(mu, mu)
        m = {
            "w1c": mu[0] / 2, "w1s": mu[1] / 2, "w2c": mu[2] / 2, "w2s": mu[3] / 2,
            "w1c_sq": (3 * second[0, 0] + second[1, 1]) / 8,
            "w1s_sq": (second[0, 0] + 3 * second[1, 1]) / 8,
            "w1c_w1s": second[0, 1] / 4,
            "w2c_sq": (3 * second[2, 2] + second[3, 3]) / 8,
            "w2s_sq": (second[2, 2] + 3 * second[3, 3]) / 8,
            "w2c_w2s": second[2, 3] / 4,
            "w1c_w2c": second[0, 2] / 4, "w1c_w2s": second[0, 3] / 4,
            "w1s_w2c": second[1, 2] / 4, "w1s_w2s": second[1, 3] / 4,
        }
        got = state_from_moments(m)
        assert np.allclose(got.mu, mu, atol=1e-15)
        assert np.allclose(got.sigma, sigma, atol=1e-14)

    def test_consistency_rate(self):
        sizes, errors = [], []
        for records in (1, 10, 100):
            err = []
            for seed in range(6):
                est = estimate_state(generate_dataset(PUBLISHED_STATE, config(records, seed=100 + seed)))
                err.append(np.sqrt(np.mean((est.state.sigma - PUBLISHED_STATE.sigma) ** 2)))
            sizes.append(records * 10_000)
            errors.append(np.sqrt(np.mean(np.square(err))))
        slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
        assert -0.6 <= slope <= -0.4

    def test_no_projection_for_near_pure_state(self):
        pure = GaussianState(np.zeros(4), tmsv_sigma(0.5))
        flags = []
        for seed in range(12):
            est = estimate_state(generate_dataset(pure, config(1, seed=seed)))
            flags.append(est.physical)
            assert est.nu_min == pytest.approx(est.nu_min)
        assert not all(flags)

    def test_too_few_samples(self):
        data = QuadratureDataset([0.0], [[1.0]], [0.0], [[1.0]])
        with pytest.raises(DomainError):
            estimate_state(data)

    def test_degenerate_phases(self):
        data = QuadratureDataset(np.zeros(100), np.ones((1, 100)), np.zeros(100), np.ones((1, 100)))
        with pytest.raises(DomainError, match="circle"):
            estimate_state(data)

    def test_unaligned_random_phases_accepted(self, rng):
        n = 50_000
        t1 = rng.uniform(0, 2 * np.pi, (5, n // 5))
        t2 = rng.uniform(0, 2 * np.pi, (5, n // 5))
        w = rng.normal(0, math.sqrt(0.5), (2, 5, n // 5))
        est = estimate_state(QuadratureDataset(t1, w[0], t2, w[1]))
        assert np.allclose(est.state.sigma, np.eye(4) / 2, atol=0.05)


class TestAccumulator:
    def test_chunking_is_bit_identical(self):
        data = generate_dataset(PUBLISHED_STATE, config(10, seed=8))
        a = MomentAccumulator()
        a.add_dataset(data, chunk=1)
        b = MomentAccumulator()
        b.add_dataset(data, chunk=7)
        c = MomentAccumulator()
        c.add(data.theta1, data.w1, data.theta2, data.w2)
        assert a.sums().tobytes() == b.sums().tobytes() == c.sums().tobytes()
        assert a.count == b.count == len(data)

    def test_order_independent(self):
        data = generate_dataset(PUBLISHED_STATE, config(6, seed=9))
        a, b = MomentAccumulator(), MomentAccumulator()
        for r in range(6):
            a.add(data.theta1[r], data.w1[r], data.theta2[r], data.w2[r])
        for r in reversed(range(6)):
            b.add(data.theta1[r], data.w1[r], data.theta2[r], data.w2[r])
        assert a.sums().tobytes() == b.sums().tobytes()

    def test_matches_batch_means(self):
        data = generate_dataset(PUBLISHED_STATE, config(2, seed=10))
        acc = MomentAccumulator()
        acc.add_dataset(data)
        batch = _row_moments(data.theta1.ravel(), data.w1.ravel(), data.theta2.ravel(), data.w2.ravel())
        means = acc.means()
        for k, name in enumerate(MOMENT_NAMES):
            assert means[name] == pytest.approx(batch[k] / len(data), rel=1e-12, abs=1e-15)

    def test_empty(self):
        with pytest.raises(DomainError):
            MomentAccumulator().means()

    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            MomentAccumulator().add([0.0], [math.nan], [0.0], [1.0])


def test_schedule_has_zero_nonuniformity():
    t1, t2 = schedule(AcquisitionConfig())
    assert phase_nonuniformity(t1, t2) < 1e-12
    assert phase_nonuniformity(np.zeros(10), np.zeros(10)) == pytest.approx(1.0)


class TestBinning:
    def test_identical_records_give_zero(self):
        t1, t2 = schedule(AcquisitionConfig(samples_per_record=100, sample_interval=1e-5,
                                            detune1=1e3, detune2=5e4))
        w = np.arange(100.0)
        b = bin_variances(QuadratureDataset(t1, np.stack([w, w]), t2, np.stack([-w, -w])))
        for v in (b.var_w1, b.var_w2, b.var_joint, b.var_diff):
            assert np.array_equal(v, np.zeros(100))
        assert b.count == 2
        assert np.array_equal(b.sample, np.arange(100))

    def test_single_record_rejected(self):
        data = generate_dataset(vacuum_state(), config(1))
        with pytest.raises(DomainError):
            bin_variances(data)

    def test_unaligned_rejected(self, rng):
        t = rng.uniform(0, 1, (3, 5))
        with pytest.raises(DomainError):
            bin_variances(QuadratureDataset(t, t, t, t))

    def test_joint_conventions(self):
        data = generate_dataset(PUBLISHED_STATE, config(20))
        half = bin_variances(data)
        u = bin_variances(data, joint="u")
        assert np.allclose(u.var_joint, 2 * half.var_joint, rtol=1e-14)
        assert np.allclose(half.var_sum_w(), u.var_sum_w(), rtol=1e-14)
        with pytest.raises(DomainError):
            bin_variances(data, joint="sum")

    def test_vacuum_flat(self):
        cfg = AcquisitionConfig(n_records=2000, samples_per_record=100, sample_interval=1e-5,
                                detune1=1e3, detune2=5e4, seed=12)
        b = bin_variances(generate_dataset(vacuum_state(), cfg))
        tol = 5 * 0.5 * math.sqrt(2 / 2000)
        for v in (b.var_w1, b.var_w2, b.var_joint):
            assert np.max(np.abs(v - 0.5)) < tol

    def test_published_joint_squeezing_region(self):
        # the single smallest of 10^4 noisy bins is biased low, so average where the model is deepest
        b = bin_variances(generate_dataset(PUBLISHED_STATE, config(200, seed=13)))
        v1, v2, c = quadrature_variance(PUBLISHED_STATE.sigma, b.theta1, b.theta2)
        model = 0.5 * (v1 + v2 + 2 * c)
        deep = model < 0.372
        assert deep.sum() > 50
        got = b.var_joint[deep].mean()
        se = model[deep].mean() * math.sqrt(2 / 199 / deep.sum())
        assert abs(got - model[deep].mean()) < 5 * se
        assert got < 0.38

    def test_traces_fit_back_to_parameters(self):
        from twomode.squeezer import fit_model

        b = bin_variances(generate_dataset(PUBLISHED_STATE, config(300, seed=14)))
        rep = fit_model(b.to_traces())
        assert rep.params.s == pytest.approx(PUBLISHED_PARAMS.s, abs=0.3)
        assert rep.params.alpha == pytest.approx(PUBLISHED_PARAMS.alpha, abs=0.01)
        assert rep.params.beta == pytest.approx(PUBLISHED_PARAMS.beta, abs=0.01)


class TestBootstrap:
    small = AcquisitionConfig(n_records=10, seed=3)

    def test_report_shape_and_reproducibility(self):
        a = parametric_bootstrap(PUBLISHED_STATE, self.small, replicates=4)
        b = parametric_bootstrap(PUBLISHED_STATE, self.small, replicates=4, workers=3)
        assert a.replicates == 4 and len(a.seeds) == 4 and a.e_w.size == 4
        assert a.e_w.tobytes() == b.e_w.tobytes()
        assert a.std_e_w >= 0 and a.std_negativity >= 0
        d = a.to_dict()
        assert len(d["values"]["e_w"]) == 4 and d["std"]["e_w"] == a.std_e_w

    def test_seed_override(self):
        a = parametric_bootstrap(PUBLISHED_STATE, self.small, replicates=2, seed=77)
        b = parametric_bootstrap(PUBLISHED_STATE, self.small.replace(seed=77), replicates=2)
        assert a.seeds == b.seeds

    def test_doubling_records_shrinks_spread(self):
        short = parametric_bootstrap(PUBLISHED_STATE, AcquisitionConfig(n_records=5, seed=1), replicates=40)
        long = parametric_bootstrap(PUBLISHED_STATE, AcquisitionConfig(n_records=20, seed=1), replicates=40)
        # four times the data halves the spread; the band covers the sampling error of 40 replicates
        assert 1.5 < short.std_e_w / long.std_e_w < 2.7

    def test_unphysical_rejected(self):
        bad = GaussianState(np.zeros(4), np.diag([0.1, 0.1, 0.5, 0.5]))
        with pytest.raises(UnphysicalStateError):
            parametric_bootstrap(bad, self.small)

    def test_zero_variance_rejected(self):
        with pytest.raises(UnphysicalStateError):
            parametric_bootstrap(GaussianState(np.zeros(4), np.zeros((4, 4))), self.small)

    def test_too_few_replicates(self):
        with pytest.raises(DomainError):
            parametric_bootstrap(PUBLISHED_STATE, self.small, replicates=1)


class TestTrials:
    def test_single_trial_has_no_spread(self):
        t = repeatability_trials(PUBLISHED_STATE, AcquisitionConfig(n_records=2, seed=1), trials=1)
        assert t.std_e_w is None and t.std_negativity is None
        assert math.isfinite(t.mean_e_w)

    def test_unbiased_at_moderate_n(self):
        state = predict_covariance(SqueezerParams(s=5.41, alpha=0.1304, beta=0.202))
        t = repeatability_trials(state, AcquisitionConfig(n_records=10, seed=2), trials=30)
        truth = entanglement_witness(state).e_w
        assert abs(t.mean_e_w - truth) < 3 * t.std_e_w / math.sqrt(30)

    def test_zero_trials(self):
        with pytest.raises(DomainError):
            repeatability_trials(PUBLISHED_STATE, AcquisitionConfig(n_records=2), trials=0)
