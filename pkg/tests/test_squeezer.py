import math

import numpy as np
import pytest

from twomode.errors import DomainError, FitError
from twomode.gaussian import quadrature_variance
from twomode.squeezer import (
    PUBLISHED_PARAMS,
    SqueezerParams,
    VarianceTraces,
    _model,
    fit_model,
    initial_guess,
    predict_covariance,
    predict_traces,
    split_efficiencies,
)


def grid(n=40):
    t1, t2 = np.meshgrid(np.linspace(0, 2 * np.pi, n, endpoint=False),
                         np.linspace(0, 2 * np.pi, n, endpoint=False) + 0.01)
    return t1.ravel(), t2.ravel()


class TestParams:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"s": 0.0, "alpha": 0.1, "beta": 0.1},
            {"s": 2.0, "alpha": -0.1, "beta": 0.1},
            {"s": 2.0, "alpha": 0.6, "beta": 0.6},
            {"s": 2.0, "alpha": 0.1, "beta": 0.1, "g1": 0.0},
            {"s": math.nan, "alpha": 0.1, "beta": 0.1},
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(DomainError):
            SqueezerParams(**kwargs)

    def test_dict_round_trip(self):
        assert SqueezerParams.from_dict(PUBLISHED_PARAMS.to_dict()) == PUBLISHED_PARAMS

    def test_missing_keys(self):
        with pytest.raises(DomainError):
            SqueezerParams.from_dict({"s": 2.0})

    def test_gain_change_percent(self):
        g1, g2 = PUBLISHED_PARAMS.gain_change_percent
        assert g1 == pytest.approx(-1.70, abs=1e-9)
        assert g2 == pytest.approx(2.04, abs=1e-9)


class TestCovariance:
    def test_unsqueezed_is_vacuum(self):
        s = predict_covariance(SqueezerParams(s=1.0, alpha=0.3, beta=0.4, phi1=0.3))
        assert np.allclose(s.sigma, np.eye(4) / 2, atol=1e-15)

    @pytest.mark.parametrize("t", [0.3, 0.5, 0.51, 0.7])
    def test_alpha_beta_sufficient(self, t):
        ref = predict_covariance(PUBLISHED_PARAMS, t=0.51).sigma
        assert np.allclose(predict_covariance(PUBLISHED_PARAMS, t=t).sigma, ref, atol=1e-14)

    def test_unsplit_route_agrees(self):
        a = predict_covariance(PUBLISHED_PARAMS, split=False).sigma
        b = predict_covariance(PUBLISHED_PARAMS).sigma
        assert np.allclose(a, b, atol=1e-14)

    @pytest.mark.parametrize("alpha,beta", [(1.0, 0.0), (0.0, 1.0), (0.4, 0.6)])
    def test_unsplit_route_at_interval_edges(self, alpha, beta):
        p = SqueezerParams(s=3.0, alpha=alpha, beta=beta)
        state = predict_covariance(p, split=False)
        t1, t2 = grid(12)
        tr = predict_traces(p, t1, t2)
        v1, v2, _ = quadrature_variance(state.sigma, t1 + np.pi / 2, t2 + np.pi / 2)
        assert np.allclose(tr.var1, 2 * v1, atol=1e-12)
        assert np.allclose(tr.var2, 2 * v2, atol=1e-12)

    def test_infeasible_split(self):
        with pytest.raises(DomainError):
            split_efficiencies(0.6, 0.2, 0.5)
        with pytest.raises(DomainError):
            predict_covariance(PUBLISHED_PARAMS, t=0.1)


class TestTraces:
    @pytest.mark.parametrize(
        "params",
        [
            SqueezerParams(s=5.41, alpha=0.1304, beta=0.202),
            SqueezerParams(s=5.41, alpha=0.1304, beta=0.202, phi1=-1.07, phi2=-0.176),
            SqueezerParams(s=2.3, alpha=0.4, beta=0.45, phi1=0.9, phi2=2.2),
        ],
    )
    def test_consistent_with_covariance(self, params):
        # trace phases are measured from the amplified axis, a quarter turn away
        t1, t2 = grid(10)
        tr = predict_traces(params, t1, t2)
        v1, v2, c = quadrature_variance(predict_covariance(params).sigma, t1 + np.pi / 2, t2 + np.pi / 2)
        assert np.allclose(tr.var1, 2 * v1, atol=1e-12)
        assert np.allclose(tr.var2, 2 * v2, atol=1e-12)
        assert np.allclose(tr.var_sum, 2 * (v1 + v2 + 2 * c), atol=1e-12)
        assert np.allclose(tr.var_diff, 2 * (v1 + v2 - 2 * c), atol=1e-12)

    def test_gains_scale_traces(self):
        t1, t2 = grid(5)
        base = predict_traces(SqueezerParams(s=3.0, alpha=0.2, beta=0.3), t1, t2)
        scaled = predict_traces(SqueezerParams(s=3.0, alpha=0.2, beta=0.3, g1=1.1, g2=0.9), t1, t2)
        assert np.allclose(scaled.var1, 1.1 * base.var1)
        assert np.allclose(scaled.var2, 0.9 * base.var2)

    def test_phase_period(self):
        t1, t2 = grid(6)
        p = PUBLISHED_PARAMS
        q = SqueezerParams(**{**p.to_dict(), "phi1": p.phi1 + np.pi, "phi2": p.phi2 + np.pi})
        a, b = predict_traces(p, t1, t2), predict_traces(q, t1, t2)
        assert np.allclose(a.var_sum, b.var_sum, atol=1e-12)

    def test_jacobian_matches_finite_differences(self):
        t1, t2 = grid(8)
        x = PUBLISHED_PARAMS.as_array()
        _, (j1, j2, jc) = _model(x, t1, t2, jac=True)
        analytic = np.hstack([j1.T, j2.T, jc.T]).T
        numeric = np.zeros_like(analytic)
        for k in range(x.size):
            h = 1e-6 * max(1.0, abs(x[k]))
            up, dn = x.copy(), x.copy()
            up[k] += h
            dn[k] -= h
            numeric[:, k] = (np.concatenate(_model(up, t1, t2)) - np.concatenate(_model(dn, t1, t2))) / (2 * h)
        assert np.allclose(analytic, numeric, atol=1e-7, rtol=1e-6)

    def test_rejects_ragged(self):
        with pytest.raises(DomainError):
            VarianceTraces([0, 1], [0, 1], [1, 1], [1, 1], [1])


class TestFit:
    @pytest.mark.parametrize(
        "truth",
        [
            PUBLISHED_PARAMS,
            SqueezerParams(s=2.0, alpha=0.3, beta=0.25, phi1=0.4, phi2=-0.9, g1=1.02, g2=0.97),
            SqueezerParams(s=8.0, alpha=0.05, beta=0.6, phi1=1.2, phi2=0.3),
        ],
    )
    def test_noiseless_round_trip(self, truth):
        t1, t2 = grid(30)
        rep = fit_model(predict_traces(truth, t1, t2))
        assert np.allclose(rep.params.as_array(), truth.as_array(), atol=1e-6)
        assert rep.residual_rms < 1e-9

    def test_round_trip_without_difference_trace(self):
        t1, t2 = grid(30)
        tr = predict_traces(PUBLISHED_PARAMS, t1, t2)
        tr.var_diff = None
        rep = fit_model(tr)
        assert np.allclose(rep.params.as_array(), PUBLISHED_PARAMS.as_array(), atol=1e-6)

    def test_phases_reported_wrapped(self):
        t1, t2 = grid(20)
        truth = SqueezerParams(s=3.0, alpha=0.2, beta=0.3, phi1=1.4, phi2=-1.5)
        rep = fit_model(predict_traces(truth, t1, t2))
        assert -np.pi / 2 <= rep.params.phi1 < np.pi / 2
        assert -np.pi / 2 <= rep.params.phi2 < np.pi / 2

    def test_noisy_fit_stderr_plausible(self):
        rng = np.random.default_rng(5)
        t1, t2 = grid(40)
        tr = predict_traces(PUBLISHED_PARAMS, t1, t2)
        noisy = VarianceTraces(
            t1, t2,
            tr.var1 * (1 + 0.02 * rng.standard_normal(t1.size)),
            tr.var2 * (1 + 0.02 * rng.standard_normal(t1.size)),
            tr.var_sum * (1 + 0.02 * rng.standard_normal(t1.size)),
            tr.var_diff * (1 + 0.02 * rng.standard_normal(t1.size)),
        )
        rep = fit_model(noisy)
        for name in ("s", "alpha", "beta"):
            z = (getattr(rep.params, name) - getattr(PUBLISHED_PARAMS, name)) / rep.stderr[name]
            assert abs(z) < 5

    def test_flat_traces_unidentifiable(self):
        t1, t2 = grid(20)
        flat = predict_traces(SqueezerParams(s=1.0, alpha=0.2, beta=0.3), t1, t2)
        with pytest.raises(FitError):
            fit_model(flat)

    def test_too_few_points(self):
        tr = predict_traces(PUBLISHED_PARAMS, np.arange(4.0), np.arange(4.0))
        with pytest.raises(FitError):
            fit_model(tr)

    def test_initial_guess_close(self):
        t1, t2 = grid(30)
        g = initial_guess(predict_traces(PUBLISHED_PARAMS, t1, t2))
        assert g.s == pytest.approx(PUBLISHED_PARAMS.s, rel=1e-6)
        assert g.alpha == pytest.approx(PUBLISHED_PARAMS.alpha, rel=1e-6)
        assert g.phi1 == pytest.approx(PUBLISHED_PARAMS.phi1, abs=1e-6)
