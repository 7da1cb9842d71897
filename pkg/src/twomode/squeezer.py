"""Single-squeezer model: a squeezed mode and vacuum mixed on a hybrid, then loss.

Two views of the same model live here. :func:`predict_covariance` builds the
covariance matrix by composing symplectic transforms, while
:func:`predict_traces` evaluates the closed-form variance traces of the
normalized measurements ``U1``, ``U2`` (vacuum variance 1). For unit gain
ratios the two agree: a trace at ``(theta1, theta2)`` equals twice the
corresponding quadrature variance at ``(theta1 + pi/2, theta2 + pi/2)``,
because the traces measure phase from the amplified axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize

from .errors import DomainError, FitError
from .gaussian import (
    GaussianState,
    SymplecticTransform,
    apply_loss,
    apply_transform,
    beamsplitter_transform,
    phase_transform,
    squeeze_transform,
    vacuum_state,
)

PARAM_NAMES = ("s", "alpha", "beta", "phi1", "phi2", "g1", "g2")

# hybrid transmissivity used when quoting efficiencies
PUBLISHED_T = 0.51


@dataclass(frozen=True)
class SqueezerParams:
    """Parameters of the single-squeezer model.

    ``alpha = t * eta1`` and ``beta = (1 - t) * eta2`` are the only loss and
    splitting combinations that enter the model. ``g1`` and ``g2`` are power
    gain ratios (SQ on / SQ bypassed) of the two measurement chains.
    """

    s: float
    alpha: float
    beta: float
    phi1: float = 0.0
    phi2: float = 0.0
    g1: float = 1.0
    g2: float = 1.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, float(value))
        if not self.s > 0:
            raise DomainError(f"s must be positive, got {self.s}")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise DomainError(f"alpha and beta must lie in [0, 1], got {self.alpha}, {self.beta}")
        if self.alpha + self.beta > 1.0 + 1e-12:
            raise DomainError(f"alpha + beta must not exceed 1, got {self.alpha + self.beta}")
        if not (self.g1 > 0 and self.g2 > 0):
            raise DomainError(f"gain ratios must be positive, got {self.g1}, {self.g2}")

    @property
    def gain_change_percent(self) -> tuple[float, float]:
        return (self.g1 - 1.0) * 100.0, (self.g2 - 1.0) * 100.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES])

    @classmethod
    def from_array(cls, x) -> "SqueezerParams":
        return cls(*map(float, x))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SqueezerParams":
        missing = [n for n in ("s", "alpha", "beta") if n not in data]
        if missing:
            raise DomainError(f"squeezer parameters missing {', '.join(missing)}")
        return cls(**{n: float(data[n]) for n in PARAM_NAMES if n in data})


PUBLISHED_PARAMS = SqueezerParams(
    s=5.41, alpha=0.1304, beta=0.202, phi1=-1.070, phi2=-0.176, g1=0.9830, g2=1.0204
)


@dataclass
class VarianceTraces:
    """Variances of ``U1``, ``U2`` and ``U1 +/- U2`` per phase pair (vacuum = 1)."""

    theta1: np.ndarray
    theta2: np.ndarray
    var1: np.ndarray
    var2: np.ndarray
    var_sum: np.ndarray
    var_diff: np.ndarray | None = None

    def __post_init__(self):
        self.theta1 = np.asarray(self.theta1, dtype=float)
        self.theta2 = np.asarray(self.theta2, dtype=float)
        self.var1 = np.asarray(self.var1, dtype=float)
        self.var2 = np.asarray(self.var2, dtype=float)
        self.var_sum = np.asarray(self.var_sum, dtype=float)
        if self.var_diff is not None:
            self.var_diff = np.asarray(self.var_diff, dtype=float)
        arrays = [self.theta1, self.theta2, self.var1, self.var2, self.var_sum]
        if self.var_diff is not None:
            arrays.append(self.var_diff)
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise DomainError("trace arrays must be one-dimensional and of equal length")
        for a in arrays[2:]:
            if np.any(a < 0):
                raise DomainError("variances must be nonnegative")

    def __len__(self):
        return self.theta1.size


def split_efficiencies(alpha: float, beta: float, t: float) -> tuple[float, float]:
    """Efficiencies ``(eta1, eta2)`` implied by ``alpha``, ``beta`` at hybrid transmissivity ``t``."""
    if not 0.0 < t < 1.0:
        raise DomainError(f"t must lie in (0, 1), got {t}")
    eta1, eta2 = alpha / t, beta / (1.0 - t)
    if eta1 > 1.0 + 1e-12 or eta2 > 1.0 + 1e-12:
        raise DomainError(
            f"t={t} is infeasible for alpha={alpha}, beta={beta} (needs alpha <= t <= 1 - beta)"
        )
    return min(eta1, 1.0), min(eta2, 1.0)


def predict_covariance(
    params: SqueezerParams, t: float = PUBLISHED_T, split: bool = True
) -> GaussianState:
    """Covariance of the two-mode state just before detection.

    With ``split=True`` the state is built at hybrid transmissivity ``t`` with
    ``eta1 = alpha/t`` and ``eta2 = beta/(1 - t)``; infeasible combinations
    raise. With ``split=False`` ``t`` is ignored and the midpoint of the
    admissible interval ``alpha <= t <= 1 - beta`` is used. The result depends
    on ``alpha`` and ``beta`` only, so both routes agree.
    """
    if split:
        eta1, eta2 = split_efficiencies(params.alpha, params.beta, t)
        hybrid = beamsplitter_transform(t)
    else:
        t = 0.5 * (params.alpha + 1.0 - params.beta)
        eta1 = params.alpha / t if t > 0 else 0.0
        eta2 = params.beta / (1.0 - t) if t < 1 else 0.0
        eta1, eta2 = min(eta1, 1.0), min(eta2, 1.0)
        hybrid = beamsplitter_transform(t) if 0 < t < 1 else _limit_hybrid(t)
    m = phase_transform(params.phi1, params.phi2) @ hybrid @ squeeze_transform(params.s)
    return apply_loss(apply_transform(vacuum_state(), m), eta1, eta2)


def _limit_hybrid(t: float) -> SymplecticTransform:
    # t in {0, 1}: identity or a signed mode swap
    if t >= 1.0:
        return SymplecticTransform(np.eye(4))
    swap = np.zeros((4, 4))
    swap[0, 2] = swap[1, 3] = -1.0
    swap[2, 0] = swap[3, 1] = 1.0
    return SymplecticTransform(swap)


def _coefficients(s):
    k1 = (s - 1.0) ** 2 / (2.0 * s)
    k2 = (s * s - 1.0) / (2.0 * s)
    dk1 = 0.5 * (1.0 - 1.0 / (s * s))
    dk2 = 0.5 * (1.0 + 1.0 / (s * s))
    return k1, k2, dk1, dk2


def _model(x, theta1, theta2, jac: bool = False):
    s, alpha, beta, phi1, phi2, g1, g2 = x
    k1, k2, dk1, dk2 = _coefficients(s)
    a1 = 2.0 * (theta1 + phi1)
    a2 = 2.0 * (theta2 + phi2)
    ps = theta1 + theta2 + phi1 + phi2
    pd = theta2 - theta1 + phi2 - phi1
    c1, c2 = np.cos(a1), np.cos(a2)
    cs, cd = np.cos(ps), np.cos(pd)
    root = math.sqrt(g1 * g2 * alpha * beta)
    bracket = 2.0 * k2 * cs + 2.0 * k1 * cd
    var1 = g1 * (1.0 + alpha * k1 + alpha * k2 * c1)
    var2 = g2 * (1.0 + beta * k1 + beta * k2 * c2)
    cross = root * bracket
    if not jac:
        return var1, var2, cross

    n = np.broadcast(theta1, theta2).size
    j1 = np.zeros((n, 7))
    j2 = np.zeros((n, 7))
    jc = np.zeros((n, 7))
    j1[:, 0] = g1 * alpha * (dk1 + dk2 * c1)
    j1[:, 1] = g1 * (k1 + k2 * c1)
    j1[:, 3] = -2.0 * g1 * alpha * k2 * np.sin(a1)
    j1[:, 5] = var1 / g1
    j2[:, 0] = g2 * beta * (dk1 + dk2 * c2)
    j2[:, 2] = g2 * (k1 + k2 * c2)
    j2[:, 4] = -2.0 * g2 * beta * k2 * np.sin(a2)
    j2[:, 6] = var2 / g2
    ss, sd = np.sin(ps), np.sin(pd)
    jc[:, 0] = root * (2.0 * dk2 * cs + 2.0 * dk1 * cd)
    base = math.sqrt(g1 * g2)
    jc[:, 1] = base * 0.5 * math.sqrt(beta / alpha) * bracket if alpha > 0 else 0.0
    jc[:, 2] = base * 0.5 * math.sqrt(alpha / beta) * bracket if beta > 0 else 0.0
    jc[:, 3] = root * (-2.0 * k2 * ss + 2.0 * k1 * sd)
    jc[:, 4] = root * (-2.0 * k2 * ss - 2.0 * k1 * sd)
    jc[:, 5] = cross / (2.0 * g1)
    jc[:, 6] = cross / (2.0 * g2)
    return (var1, var2, cross), (j1, j2, jc)


def predict_traces(params: SqueezerParams, theta1, theta2) -> VarianceTraces:
    """Closed-form variances of ``U1(theta1)``, ``U2(theta2)`` and ``U1 +/- U2``."""
    theta1, theta2 = np.broadcast_arrays(
        np.atleast_1d(np.asarray(theta1, float)), np.atleast_1d(np.asarray(theta2, float))
    )
    var1, var2, cross = _model(params.as_array(), theta1, theta2)
    return VarianceTraces(
        theta1=theta1.copy(),
        theta2=theta2.copy(),
        var1=var1,
        var2=var2,
        var_sum=var1 + var2 + cross,
        var_diff=var1 + var2 - cross,
    )


@dataclass
class FitReport:
    params: SqueezerParams
    stderr: dict[str, float]
    residual_rms: float
    cost: float
    n_residuals: int
    iterations: int
    method: str
    message: str = ""
    covariance: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "residual_rms": self.residual_rms,
            "cost": self.cost,
            "n_residuals": self.n_residuals,
            "iterations": self.iterations,
            "method": self.method,
            "stderr": dict(self.stderr),
            "gain_change_percent": list(self.params.gain_change_percent),
        }


def _wrap_half(phi: float) -> float:
    """Wrap to ``[-pi/2, pi/2)``; the model is invariant under ``phi -> phi + pi``."""
    return (phi + math.pi / 2) % math.pi - math.pi / 2


def _harmonic_fit(y, columns):
    design = np.column_stack(columns)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    dof = max(y.size - design.shape[1], 1)
    s2 = float(resid @ resid) / dof
    try:
        cov = s2 * np.linalg.inv(design.T @ design)
    except np.linalg.LinAlgError:
        raise FitError("phase pairs do not cover a full period") from None
    return coef, np.sqrt(np.clip(np.diag(cov), 0.0, None))


def _cross_trace(traces: VarianceTraces, include_diff: bool) -> np.ndarray:
    if include_diff and traces.var_diff is not None:
        return 0.5 * (traces.var_sum - traces.var_diff)
    return traces.var_sum - traces.var1 - traces.var2


def initial_guess(traces: VarianceTraces) -> SqueezerParams:
    """Moment-based starting values from the harmonic content of the traces.

    Each single-mode trace is ``g (1 + alpha k1) + g alpha k2 cos(2 theta + 2 phi)``
    and the cross term carries harmonics in ``theta1 + theta2`` and
    ``theta2 - theta1`` whose amplitude ratio is ``k1/k2 = (s-1)/(s+1)``.
    Raises :class:`FitError` when neither channel shows phase modulation.
    """
    t1, t2 = traces.theta1, traces.theta2
    one = np.ones_like(t1)
    (m1, a1c, a1s), se1 = _harmonic_fit(traces.var1, [one, np.cos(2 * t1), np.sin(2 * t1)])
    (m2, a2c, a2s), se2 = _harmonic_fit(traces.var2, [one, np.cos(2 * t2), np.sin(2 * t2)])
    amp1, amp2 = math.hypot(a1c, a1s), math.hypot(a2c, a2s)

    def _flat(amp, mean, se):
        noise = math.hypot(se[1], se[2])
        return amp <= 1e-12 * abs(mean) or amp < 3.0 * noise

    if _flat(amp1, m1, se1) and _flat(amp2, m2, se2):
        raise FitError("traces show no phase modulation; squeezing is not identifiable")

    cross = _cross_trace(traces, include_diff=True)
    sp, dm = t1 + t2, t2 - t1
    (bsc, bss, bdc, bds), _ = _harmonic_fit(cross, [np.cos(sp), np.sin(sp), np.cos(dm), np.sin(dm)])
    amp_s, amp_d = math.hypot(bsc, bss), math.hypot(bdc, bds)
    ratio = amp_d / amp_s if amp_s > 0 else 0.0
    ratio = min(max(ratio, 1e-3), 0.95)
    s = (1.0 + ratio) / (1.0 - ratio)
    k1, k2, _, _ = _coefficients(s)

    g1 = max(m1 - amp1 * ratio, 1e-3)
    g2 = max(m2 - amp2 * ratio, 1e-3)
    alpha = min(max(amp1 / (g1 * k2), 1e-6), 0.999)
    beta = min(max(amp2 / (g2 * k2), 1e-6), 0.999)
    if alpha + beta > 0.999:
        scale = 0.999 / (alpha + beta)
        alpha, beta = alpha * scale, beta * scale
    phi1 = _wrap_half(0.5 * math.atan2(-a1s, a1c))
    phi2 = _wrap_half(0.5 * math.atan2(-a2s, a2c))
    return SqueezerParams(s, alpha, beta, phi1, phi2, g1, g2)


MAX_ITERATIONS = 500
COST_RTOL = 1e-12


def fit_model(
    traces: VarianceTraces,
    init: SqueezerParams | None = None,
    include_diff: bool | None = None,
) -> FitReport:
    """Jointly fit the variance model to measured ``Var(U1)``, ``Var(U2)``, ``Var(U1 +/- U2)``.

    Residuals are stacked with uniform weights. A bounded trust-region
    least-squares solver with the analytic Jacobian does the work; if the
    Jacobian at the optimum is rank deficient a Nelder-Mead polish is run
    instead and reported through ``method``. ``include_diff`` defaults to
    using ``Var(U1 - U2)`` whenever it is present.
    """
    use_diff = traces.var_diff is not None if include_diff is None else include_diff
    if use_diff and traces.var_diff is None:
        raise DomainError("include_diff requested but traces carry no var_diff")
    if len(traces) < 8:
        raise FitError("too few phase pairs to fit seven parameters")
    if init is None:
        init = initial_guess(traces)
    t1, t2 = traces.theta1, traces.theta2

    observed = [traces.var1, traces.var2, traces.var_sum]
    if use_diff:
        observed.append(traces.var_diff)
    observed = np.concatenate(observed)

    def residuals(x):
        var1, var2, cross = _model(x, t1, t2)
        parts = [var1, var2, var1 + var2 + cross]
        if use_diff:
            parts.append(var1 + var2 - cross)
        return np.concatenate(parts) - observed

    def jacobian(x):
        _, (j1, j2, jc) = _model(x, t1, t2, jac=True)
        parts = [j1, j2, j1 + j2 + jc]
        if use_diff:
            parts.append(j1 + j2 - jc)
        return np.vstack(parts)

    lower = [1.0, 1e-12, 1e-12, -np.inf, -np.inf, 1e-12, 1e-12]
    upper = [np.inf, 1.0, 1.0, np.inf, np.inf, np.inf, np.inf]
    x0 = np.clip(init.as_array(), np.add(lower, 1e-9), np.subtract(upper, 1e-9))
    res = optimize.least_squares(
        residuals,
        x0,
        jac=jacobian,
        bounds=(lower, upper),
        method="trf",
        ftol=COST_RTOL,
        xtol=1e-15,
        gtol=1e-15,
        max_nfev=MAX_ITERATIONS,
        x_scale="jac",
    )
    x, method, iterations = res.x, "trust-region", int(res.nfev)
    jac = jacobian(x)
    singular = np.linalg.svd(jac, compute_uv=False)
    rank_deficient = singular[-1] <= singular[0] * 1e-10

    if rank_deficient:
        nm = optimize.minimize(
            lambda y: 0.5 * float(np.sum(residuals(_project(y, lower, upper)) ** 2)),
            x,
            method="Nelder-Mead",
            options={"maxiter": MAX_ITERATIONS * 20, "xatol": 1e-12, "fatol": 1e-16},
        )
        x, method, iterations = _project(nm.x, lower, upper), "nelder-mead", int(nm.nit)
        converged = nm.success
    else:
        converged = res.status > 0

    if not converged:
        raise FitError(f"variance-model fit did not converge: {res.message}")

    r = residuals(x)
    n, p = r.size, x.size
    cost = 0.5 * float(r @ r)
    s2 = 2.0 * cost / max(n - p, 1)
    jac = jacobian(x)
    try:
        cov = s2 * np.linalg.inv(jac.T @ jac)
        stderr_values = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        cov = None
        stderr_values = np.full(p, np.nan)

    x = x.copy()
    x[3], x[4] = _wrap_half(x[3]), _wrap_half(x[4])
    params = SqueezerParams.from_array(x)
    return FitReport(
        params=params,
        stderr={name: float(v) for name, v in zip(PARAM_NAMES, stderr_values)},
        residual_rms=math.sqrt(2.0 * cost / n),
        cost=cost,
        n_residuals=n,
        iterations=iterations,
        method=method,
        message=str(res.message),
        covariance=cov,
    )


def _project(x, lower, upper):
    return np.clip(x, lower, upper)
