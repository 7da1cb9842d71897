"""Vacuum calibration of the measurement chains.

A thermal sweep relates raw digitizer variance to input noise temperature,

    Var(V) = G * [coth(h f_s / (2 k_B T_in)) / 2 + A0 + A2 * T_F**2],
    T_in = sqrt(T_F**2 + T_e**2),

and the fitted input temperature fixes the calibration-state variance used
to convert SQ-on measurements into vacuum units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import constants, optimize, stats

from .errors import DomainError, FitError

PLANCK = constants.h
BOLTZMANN = constants.k
SIGNAL_FREQUENCY = 6.327e9

# below this input temperature the calibration state is treated as vacuum
VACUUM_EQUIVALENT_T_IN = 0.0297

UPPER_BOUND_LEVEL = 0.95


def input_temperature(t_fridge, t_e: float):
    """Effective input-state temperature ``sqrt(T_F^2 + T_e^2)``."""
    t_fridge = np.asarray(t_fridge, dtype=float)
    if np.any(t_fridge <= 0):
        raise DomainError("fridge temperature must be positive")
    return np.sqrt(t_fridge * t_fridge + t_e * t_e)


def thermal_variance(t_in, f_s: float = SIGNAL_FREQUENCY):
    """Quadrature variance ``coth(h f / 2 k T) / 2`` of a thermal state (vacuum = 1/2)."""
    t_in = np.asarray(t_in, dtype=float)
    if np.any(t_in < 0):
        raise DomainError("temperature must be nonnegative")
    with np.errstate(divide="ignore"):
        x = PLANCK * f_s / (2.0 * BOLTZMANN * t_in)
    out = 0.5 / np.tanh(x)
    return out if out.ndim else float(out)


def input_sigma(t_in: float, f_s: float = SIGNAL_FREQUENCY, exact: bool = False) -> float:
    """Calibration-state variance; exactly 0.5 below the vacuum-equivalent temperature unless ``exact``."""
    if not exact and t_in < VACUUM_EQUIVALENT_T_IN:
        return 0.5
    return float(thermal_variance(t_in, f_s))


@dataclass
class ThermalCalibration:
    """Per-channel chain gain and added noise with a shared termination excess temperature."""

    gain: tuple[float, ...]
    a0: tuple[float, ...]
    a2: tuple[float, ...]
    t_e: float
    f_s: float = SIGNAL_FREQUENCY
    t_e_upper_bound: float | None = None
    stderr: dict = field(default_factory=dict)

    def __post_init__(self):
        self.gain, self.a0, self.a2 = tuple(self.gain), tuple(self.a0), tuple(self.a2)
        if not len(self.gain) == len(self.a0) == len(self.a2):
            raise DomainError("per-channel calibration tuples must have equal length")
        if any(g <= 0 for g in self.gain):
            raise DomainError("chain gains must be positive")
        if self.t_e < 0:
            raise DomainError("T_e must be nonnegative")

    @property
    def n_channels(self) -> int:
        return len(self.gain)

    def to_dict(self) -> dict:
        return {
            "channels": [
                {"gain": g, "a0": a0, "a2": a2}
                for g, a0, a2 in zip(self.gain, self.a0, self.a2)
            ],
            "t_e_kelvin": self.t_e,
            "t_e_upper_bound": self.t_e_upper_bound,
            "f_s_hz": self.f_s,
            "stderr": self.stderr,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ThermalCalibration":
        try:
            channels = data["channels"]
            return cls(
                gain=[float(c["gain"]) for c in channels],
                a0=[float(c["a0"]) for c in channels],
                a2=[float(c["a2"]) for c in channels],
                t_e=float(data["t_e_kelvin"]),
                f_s=float(data.get("f_s_hz", SIGNAL_FREQUENCY)),
                t_e_upper_bound=data.get("t_e_upper_bound"),
                stderr=data.get("stderr", {}),
            )
        except KeyError as exc:
            raise DomainError(f"calibration document missing key {exc}") from None


def thermal_model(t_fridge, calib: ThermalCalibration, channel: int = 0):
    """Raw variance predicted for ``channel`` at fridge temperature ``t_fridge``."""
    t_fridge = np.asarray(t_fridge, dtype=float)
    t_in = input_temperature(t_fridge, calib.t_e)
    added = calib.a0[channel] + calib.a2[channel] * t_fridge**2
    return calib.gain[channel] * (thermal_variance(t_in, calib.f_s) + added)


@dataclass(frozen=True)
class ThermalSweepPoint:
    channel: int
    t_fridge: float
    var_raw: float
    repeat_index: int = 0

    def __post_init__(self):
        if not self.t_fridge > 0:
            raise DomainError(f"fridge temperature must be positive, got {self.t_fridge}")
        if not self.var_raw > 0:
            raise DomainError(f"raw variance must be positive, got {self.var_raw}")


@dataclass
class ThermalFit:
    calibration: ThermalCalibration
    residuals: dict[int, np.ndarray]
    rss: float
    dof: int

    @property
    def t_e_upper_bound(self) -> float:
        return self.calibration.t_e_upper_bound


def _split_channels(points):
    channels = sorted({p.channel for p in points})
    if channels != list(range(len(channels))):
        raise DomainError(f"channels must be numbered 0..n-1, got {channels}")
    data = []
    for ch in channels:
        rows = [p for p in points if p.channel == ch]
        t = np.array([p.t_fridge for p in rows])
        v = np.array([p.var_raw for p in rows])
        data.append((t, v, 1.0 / v))
    return data


def _linear_solve(t, v, w, t_e, f_s):
    """Best ``(G, G*A0, G*A2)`` for one channel at fixed ``T_e`` (the model is linear in them).

    Returns the coefficients and the weighted residuals ``w * (v - model)``.
    """
    design = np.column_stack([thermal_variance(input_temperature(t, t_e), f_s), np.ones_like(t), t * t])
    coef, *_ = np.linalg.lstsq(design * w[:, None], v * w, rcond=None)
    return coef, w * (v - design @ coef)


def _profile_rss(t_e, data, f_s):
    return sum(float(r @ r) for r in (_linear_solve(t, v, w, t_e, f_s)[1] for t, v, w in data))


def _fit_pass(data, f_s, t_max):
    grid = np.concatenate([[0.0], np.geomspace(t_max * 1e-4, t_max, 200)])
    profile = np.array([_profile_rss(te, data, f_s) for te in grid])
    k = int(np.argmin(profile))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = optimize.minimize_scalar(
        lambda te: _profile_rss(te, data, f_s), bounds=(lo, hi), method="bounded",
        options={"xatol": 1e-14 * max(t_max, 1.0)},
    )
    t_e = float(res.x) if res.fun <= profile[k] else float(grid[k])
    return _polish(data, t_e, f_s)


def fit_thermal(points, f_s: float = SIGNAL_FREQUENCY) -> ThermalFit:
    """Weighted least-squares fit of the thermal-sweep model.

    Each channel gets its own ``(G, A0, A2)``; ``T_e`` is shared. Residuals
    are relative (the scatter of a variance estimate is proportional to the
    variance), and a second pass rescales each channel by its own residual
    level so channels with different noise are weighed fairly. Because the
    model is linear in ``(G, G*A0, G*A2)`` at fixed ``T_e``, ``T_e`` is found
    by minimizing the profiled residual sum of squares, then all parameters
    are polished jointly for standard errors. The one-sided 95% upper bound
    on ``T_e`` is where the profiled RSS rises by ``chi2_1(0.90) * s^2``.

    Raises :class:`FitError` without at least five distinct temperatures, two
    of them below ``h f_s / k_B`` where the quantum term bends the curve.
    """
    points = list(points)
    data = _split_channels(points)
    quantum_t = PLANCK * f_s / BOLTZMANN
    for ch, (t, _, _) in enumerate(data):
        distinct = np.unique(t)
        if distinct.size < 5:
            raise FitError(f"channel {ch}: need at least 5 distinct temperatures, got {distinct.size}")
        if np.count_nonzero(distinct < quantum_t) < 2:
            raise FitError(
                f"channel {ch}: insufficient temperature leverage; need points below "
                f"{quantum_t * 1e3:.0f} mK to identify T_e"
            )
    n_ch = len(data)
    n = sum(t.size for t, _, _ in data)
    dof = n - (3 * n_ch + 1)
    if dof <= 0:
        raise FitError("not enough sweep points for the number of parameters")

    t_max = max(float(t.max()) for t, _, _ in data)
    _, _, resid = _fit_pass(data, f_s, t_max)
    reweighted = []
    for (t, v, w), r in zip(data, resid):
        level = math.sqrt(float(r @ r) / max(t.size - 3, 1))
        reweighted.append((t, v, w / level if level > 0 else w))
    data = reweighted
    x, stderr, resid = _fit_pass(data, f_s, t_max)

    t_e = x[-1] if x[-1] > 0 else 0.0
    gains = x[0 : 3 * n_ch : 3]
    a0 = x[1 : 3 * n_ch : 3] / gains
    a2 = x[2 : 3 * n_ch : 3] / gains

    rss = float(sum(r @ r for r in resid))
    s2 = rss / dof
    threshold = rss + stats.chi2.ppf(2 * UPPER_BOUND_LEVEL - 1, 1) * s2
    upper = _upper_bound(lambda te: _profile_rss(te, data, f_s), t_e, threshold, t_max)

    calib = ThermalCalibration(
        gain=tuple(float(g) for g in gains),
        a0=tuple(float(v) for v in a0),
        a2=tuple(float(v) for v in a2),
        t_e=float(t_e),
        f_s=f_s,
        t_e_upper_bound=upper,
        stderr=stderr,
    )
    raw = {ch: r / w for ch, ((_, _, w), r) in enumerate(zip(data, resid))}
    return ThermalFit(calibration=calib, residuals=raw, rss=rss, dof=dof)


def _polish(data, t_e, f_s):
    """Joint weighted polish over ``(G, G*A0, G*A2)`` per channel and ``q = T_e^2``."""
    n_ch = len(data)
    start = []
    for t, v, w in data:
        start.extend(_linear_solve(t, v, w, t_e, f_s)[0])
    scales = np.array([abs(c) if c else 1.0 for c in start] + [max(t_e * t_e, 1e-6)])
    x0 = np.array(start + [t_e * t_e]) / scales

    def unpack(y):
        return y * scales

    def residuals(y):
        x = unpack(y)
        q = max(x[-1], 0.0)
        out = []
        for ch, (t, v, w) in enumerate(data):
            g, ga0, ga2 = x[3 * ch : 3 * ch + 3]
            t_in = np.sqrt(t * t + q)
            out.append(w * (g * thermal_variance(t_in, f_s) + ga0 + ga2 * t * t - v))
        return np.concatenate(out)

    def jacobian(y):
        x = unpack(y)
        q = max(x[-1], 0.0)
        n = sum(t.size for t, _, _ in data)
        jac = np.zeros((n, 3 * n_ch + 1))
        row = 0
        for ch, (t, v, w) in enumerate(data):
            g = x[3 * ch]
            t_in = np.sqrt(t * t + q)
            xq = PLANCK * f_s / (2.0 * BOLTZMANN * t_in)
            sig = thermal_variance(t_in, f_s)
            # d sigma / d q = d sigma/d T_in * 1/(2 T_in)
            dsig_dt = 0.5 * xq / t_in / np.sinh(xq) ** 2
            sl = slice(row, row + t.size)
            jac[sl, 3 * ch] = w * sig
            jac[sl, 3 * ch + 1] = w
            jac[sl, 3 * ch + 2] = w * t * t
            jac[sl, -1] = w * g * dsig_dt / (2.0 * t_in)
            row += t.size
        return jac * scales

    res = optimize.least_squares(
        residuals, x0, jac=jacobian, method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15,
        bounds=([-np.inf] * (3 * n_ch) + [0.0], [np.inf] * (3 * n_ch + 1)),
    )
    x = unpack(res.x)
    r = residuals(res.x)
    n = r.size
    dof = max(n - x.size, 1)
    s2 = float(r @ r) / dof
    jac = jacobian(res.x) / scales
    try:
        cov = s2 * np.linalg.pinv(jac.T @ jac)
    except np.linalg.LinAlgError:
        cov = np.full((x.size, x.size), np.nan)

    stderr = {"t_e": _te_stderr(x[-1], cov[-1, -1])}
    for ch in range(n_ch):
        idx = slice(3 * ch, 3 * ch + 3)
        g, ga0, ga2 = x[idx]
        c = cov[idx, idx]
        # delta method for A0 = (G*A0)/G and A2 = (G*A2)/G
        grad_a0 = np.array([-ga0 / g**2, 1.0 / g, 0.0])
        grad_a2 = np.array([-ga2 / g**2, 0.0, 1.0 / g])
        stderr[f"gain_{ch}"] = float(math.sqrt(max(c[0, 0], 0.0)))
        stderr[f"a0_{ch}"] = float(math.sqrt(max(grad_a0 @ c @ grad_a0, 0.0)))
        stderr[f"a2_{ch}"] = float(math.sqrt(max(grad_a2 @ c @ grad_a2, 0.0)))

    x_out = x.copy()
    x_out[-1] = math.sqrt(max(x[-1], 0.0))
    resid = []
    row = 0
    for t, _, _ in data:
        resid.append(r[row : row + t.size])
        row += t.size
    return x_out, stderr, resid


def _te_stderr(q, var_q):
    if not (q > 0 and var_q >= 0):
        return math.nan
    return float(math.sqrt(var_q) / (2.0 * math.sqrt(q)))


def _upper_bound(profile, t_e, threshold, t_max):
    if profile(t_e) >= threshold:
        return float(t_e)
    hi = max(t_e * 2.0, t_max * 1e-3)
    while profile(hi) < threshold:
        hi *= 2.0
        if hi > 100.0 * t_max:
            return math.inf
    return float(optimize.brentq(lambda te: profile(te) - threshold, t_e, hi, xtol=1e-12 * hi))


@dataclass
class CalibratedQuadratures:
    """Quadratures in vacuum units and the constants used to derive them."""

    w1: np.ndarray
    w2: np.ndarray
    var_off: tuple[float, float]
    gains: tuple[float, float]
    sigma_in: float


def normalize_and_calibrate(
    v_on1,
    v_on2,
    v_off1,
    v_off2,
    gains: tuple[float, float] = (1.0, 1.0),
    sigma_in: float = 0.5,
) -> CalibratedQuadratures:
    """Convert raw SQ-on samples to vacuum units.

    ``U_i = V_i,on / sqrt(Var(V_i,off))`` normalizes by the bypassed-SQ
    variance (so the calibration state has unit variance), then
    ``W_i = U_i * sqrt(sigma_in / g_i)`` rescales so the calibration state has
    variance ``sigma_in`` and removes the SQ-on gain change.
    """
    g1, g2 = gains
    if not (g1 > 0 and g2 > 0):
        raise DomainError(f"gain ratios must be positive, got {gains}")
    if sigma_in < 0.5:
        raise DomainError(f"calibration-state variance cannot be below vacuum, got {sigma_in}")
    var_off = (float(np.var(np.asarray(v_off1, float))), float(np.var(np.asarray(v_off2, float))))
    if not (var_off[0] > 0 and var_off[1] > 0):
        raise DomainError("off-state variance must be positive in both channels")
    w1 = np.asarray(v_on1, float) * math.sqrt(sigma_in / (var_off[0] * g1))
    w2 = np.asarray(v_on2, float) * math.sqrt(sigma_in / (var_off[1] * g2))
    return CalibratedQuadratures(w1=w1, w2=w2, var_off=var_off, gains=(g1, g2), sigma_in=sigma_in)
