"""Two-mode Gaussian states and their symplectic algebra.

Quadrature ordering is ``(X1, Y1, X2, Y2)`` and the vacuum has variance 1/2
in every quadrature. All angles are radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import DomainError, SchemaError

__all__ = [
    "OMEGA",
    "VACUUM_CONVENTION",
    "GaussianState",
    "SymplecticTransform",
    "WitnessResult",
    "NegativityResult",
    "vacuum_state",
    "thermal_state",
    "squeeze_transform",
    "beamsplitter_transform",
    "phase_transform",
    "apply_transform",
    "apply_loss",
    "block_invariants",
    "symplectic_eigenvalues",
    "check_physicality",
    "negativity",
    "entanglement_witness",
    "witness_objective",
    "witness_grid_search",
    "quadrature_variance",
    "minimum_variances",
]

VACUUM_CONVENTION = "vacuum=0.5"

OMEGA = np.array(
    [
        [0.0, 1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0, 0.0],
    ]
)
OMEGA.setflags(write=False)

SYMPLECTIC_TOL = 1e-10
SQRT_CLAMP_TOL = 1e-9
PHYSICAL_TOL = 1e-9
DISCRIMINANT_NOISE = 64 * np.finfo(float).eps


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianState:
    """Mean vector and covariance matrix of a two-mode Gaussian state.

    The covariance is symmetrized on construction. Physicality is not
    enforced here, since moment estimates from finite data can fall outside
    the Heisenberg-valid set; use :func:`check_physicality` for that.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=float)
        if mu.shape != (4,):
            raise DomainError(f"mu must have 4 entries, got shape {mu.shape}")
        if sigma.shape != (4, 4):
            raise DomainError(f"sigma must be 4x4, got shape {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise DomainError("state entries must be finite")
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(self, "sigma", _frozen(0.5 * (sigma + sigma.T)))

    @classmethod
    def from_covariance(cls, sigma) -> "GaussianState":
        return cls(np.zeros(4), sigma)

    def to_dict(self) -> dict:
        return {
            "mu": [float(x) for x in self.mu],
            "sigma": [[float(x) for x in row] for row in self.sigma],
            "convention": VACUUM_CONVENTION,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianState":
        convention = data.get("convention")
        if convention != VACUUM_CONVENTION:
            raise SchemaError(
                f"unsupported state convention {convention!r}; expected {VACUUM_CONVENTION!r}"
            )
        try:
            return cls(np.asarray(data["mu"], dtype=float), np.asarray(data["sigma"], dtype=float))
        except KeyError as exc:
            raise SchemaError(f"state document missing key {exc}") from None


@dataclass(frozen=True)
class SymplecticTransform:
    """A real 4x4 matrix ``M`` satisfying ``M Omega M^T = Omega``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (4, 4):
            raise DomainError(f"transform must be 4x4, got shape {m.shape}")
        err = np.max(np.abs(m @ OMEGA @ m.T - OMEGA))
        if not err < SYMPLECTIC_TOL:
            raise DomainError(f"matrix is not symplectic (max deviation {err:.3e})")
        object.__setattr__(self, "matrix", _frozen(m))

    def __matmul__(self, other: "SymplecticTransform") -> "SymplecticTransform":
        return SymplecticTransform(self.matrix @ other.matrix)


@dataclass(frozen=True)
class WitnessResult:
    """Optimized separability-witness value and its optimizer.

    ``phase_star`` is the optimal combined phase ``theta1 + theta2`` in
    ``[0, 2*pi)``; the objective depends on the two measurement phases only
    through that sum. ``fallback`` is set when the closed form did not apply
    (a single-mode block with trace below the vacuum value) and the bounded
    grid search was used instead.
    """

    e_w: float
    a_star: float
    phase_star: float
    delta_epr: float
    fallback: bool = False

    @property
    def entangled(self) -> bool:
        return self.e_w < 0.0


@dataclass(frozen=True)
class NegativityResult:
    nu: tuple[float, float]
    nu_tilde: tuple[float, float]
    negativity: float

    @property
    def entangled(self) -> bool:
        return self.negativity > 0.0


def vacuum_state() -> GaussianState:
    return GaussianState(np.zeros(4), np.eye(4) / 2)


def thermal_state(nu1: float, nu2: float | None = None) -> GaussianState:
    """Product thermal state ``diag(nu1, nu1, nu2, nu2)``."""
    nu2 = nu1 if nu2 is None else nu2
    return GaussianState(np.zeros(4), np.diag([nu1, nu1, nu2, nu2]))


def squeeze_transform(s: float) -> SymplecticTransform:
    """Squeeze mode 1: ``X1 -> X1/sqrt(s)``, ``Y1 -> sqrt(s) Y1``."""
    if not s > 0:
        raise DomainError(f"squeezing parameter must be positive, got {s}")
    r = math.sqrt(s)
    return SymplecticTransform(np.diag([1.0 / r, r, 1.0, 1.0]))


def beamsplitter_transform(t: float) -> SymplecticTransform:
    """Beam splitter with power transmissivity ``t`` in the open interval (0, 1)."""
    if not 0.0 < t < 1.0:
        raise DomainError(f"transmissivity must lie in (0, 1), got {t}")
    c, k = math.sqrt(t), math.sqrt(1.0 - t)
    return SymplecticTransform(
        np.array(
            [
                [c, 0.0, -k, 0.0],
                [0.0, c, 0.0, -k],
                [k, 0.0, c, 0.0],
                [0.0, k, 0.0, c],
            ]
        )
    )


def phase_transform(phi1: float, phi2: float) -> SymplecticTransform:
    c1, s1 = math.cos(phi1), math.sin(phi1)
    c2, s2 = math.cos(phi2), math.sin(phi2)
    return SymplecticTransform(
        np.array(
            [
                [c1, s1, 0.0, 0.0],
                [-s1, c1, 0.0, 0.0],
                [0.0, 0.0, c2, s2],
                [0.0, 0.0, -s2, c2],
            ]
        )
    )


def apply_transform(state: GaussianState, m: SymplecticTransform) -> GaussianState:
    mat = m.matrix
    return GaussianState(mat @ state.mu, mat @ state.sigma @ mat.T)


def apply_loss(state: GaussianState, eta1: float, eta2: float) -> GaussianState:
    """Mix each mode with vacuum on a beam splitter of transmissivity ``eta_i``.

    Returns ``sqrt(H) sigma sqrt(H) + (I - H)/2`` with
    ``H = diag(eta1, eta1, eta2, eta2)`` and mean ``sqrt(H) mu``.
    """
    for name, eta in (("eta1", eta1), ("eta2", eta2)):
        if not 0.0 <= eta <= 1.0:
            raise DomainError(f"{name} must lie in [0, 1], got {eta}")
    h = np.array([eta1, eta1, eta2, eta2], dtype=float)
    r = np.sqrt(h)
    sigma = r[:, None] * state.sigma * r[None, :] + np.diag(1.0 - h) / 2
    return GaussianState(r * state.mu, sigma)


def _det2(m: np.ndarray) -> float:
    return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])


def _as_cov(sigma) -> np.ndarray:
    if isinstance(sigma, GaussianState):
        return sigma.sigma
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (4, 4):
        raise DomainError(f"covariance must be 4x4, got shape {sigma.shape}")
    return sigma


def block_invariants(sigma) -> tuple[float, float, float, float]:
    """Return ``(|A|, |B|, |Gamma|, |Sigma|)`` for the 2x2 block partition."""
    s = _as_cov(sigma)
    det_a = _det2(s[:2, :2])
    det_b = _det2(s[2:, 2:])
    det_g = _det2(s[:2, 2:])
    return det_a, det_b, det_g, float(np.linalg.det(s))


def _clamped_sqrt(x: float, what: str) -> float:
    if x < 0.0:
        if x < -SQRT_CLAMP_TOL:
            raise DomainError(f"negative {what} ({x:.3e}); covariance is not a valid state")
        return 0.0
    return math.sqrt(x)


def _eigen_pair(delta: float, det: float) -> tuple[float, float]:
    disc = delta * delta - 4.0 * det
    # a discriminant within rounding noise of zero is a degenerate spectrum;
    # taking its square root would turn 1e-16 noise into 1e-8 errors
    if abs(disc) <= DISCRIMINANT_NOISE * delta * delta:
        disc = 0.0
    root = _clamped_sqrt(disc, "discriminant")
    lo = _clamped_sqrt(0.5 * (delta - root), "squared symplectic eigenvalue")
    hi = _clamped_sqrt(0.5 * (delta + root), "squared symplectic eigenvalue")
    return lo, hi


def symplectic_eigenvalues(sigma) -> tuple[float, float]:
    """Symplectic eigenvalues ``(nu1, nu2)``, ``nu1 <= nu2``, from block invariants."""
    det_a, det_b, det_g, det_s = block_invariants(sigma)
    return _eigen_pair(det_a + det_b + 2.0 * det_g, det_s)


def check_physicality(sigma) -> tuple[bool, float]:
    """Heisenberg check: ``(nu1 >= 1/2 - 1e-9, nu1)``.

    Matrices whose symplectic spectrum is not real are reported as
    unphysical with ``nu1 = nan``.
    """
    try:
        nu1, _ = symplectic_eigenvalues(sigma)
    except DomainError:
        return False, math.nan
    return nu1 >= 0.5 - PHYSICAL_TOL, nu1


def negativity(sigma) -> NegativityResult:
    det_a, det_b, det_g, det_s = block_invariants(sigma)
    nu = _eigen_pair(det_a + det_b + 2.0 * det_g, det_s)
    nu_t = _eigen_pair(det_a + det_b - 2.0 * det_g, det_s)
    if nu_t[0] == 0.0:
        raise DomainError("partial-transpose symplectic eigenvalue is zero")
    n = max(0.0, (0.5 - nu_t[0]) / (2.0 * nu_t[0]))
    return NegativityResult(nu=nu, nu_tilde=nu_t, negativity=n)


def witness_objective(sigma, theta1, theta2, a):
    """``R(theta1, theta2, a) - (a^2 + 1/a^2)`` evaluated as variances of linear forms.

    Broadcasts over array arguments. This is the direct route used to check
    the closed form in :func:`entanglement_witness`.
    """
    s = _as_cov(sigma)
    theta1, theta2, a = np.broadcast_arrays(
        np.asarray(theta1, float), np.asarray(theta2, float), np.asarray(a, float)
    )
    p, q = np.abs(a), 1.0 / a
    u1, u2 = theta1 + np.pi / 2, theta2 + np.pi / 2
    plus = np.stack([p * np.cos(theta1), p * np.sin(theta1), q * np.cos(theta2), q * np.sin(theta2)], -1)
    minus = np.stack([p * np.cos(u1), p * np.sin(u1), -q * np.cos(u2), -q * np.sin(u2)], -1)
    r = np.einsum("...i,ij,...j->...", plus, s, plus) + np.einsum("...i,ij,...j->...", minus, s, minus)
    return r - (a * a + 1.0 / (a * a))


def witness_grid_search(
    sigma,
    n_phase: int = 721,
    n_a: int = 121,
    a_range: tuple[float, float] = (0.2, 5.0),
    tol: float = 1e-9,
) -> tuple[float, float, float]:
    """Bounded grid minimization of the witness objective.

    Scans the combined phase over ``[0, 2*pi)`` (with ``theta2 = 0``) and ``a``
    log-uniformly over ``a_range``, then refines each coordinate by
    golden-section search. The objective separates into a phase-only cross
    term plus an ``a``-only term, so one refinement pass per coordinate is
    sufficient. Returns ``(value, a, phase)``.
    """
    phases = np.linspace(0.0, 2 * np.pi, n_phase, endpoint=False)
    avals = np.geomspace(a_range[0], a_range[1], n_a)
    grid = witness_objective(sigma, phases[:, None], 0.0, avals[None, :])
    i, j = np.unravel_index(np.argmin(grid), grid.shape)
    phase, a = phases[i], avals[j]

    dphi = phases[1] - phases[0]
    res = optimize.minimize_scalar(
        lambda x: float(witness_objective(sigma, x, 0.0, a)),
        bracket=(phase - dphi, phase, phase + dphi),
        method="golden",
        tol=tol,
    )
    phase = float(res.x) % (2 * np.pi)

    lo = avals[max(j - 1, 0)]
    hi = avals[min(j + 1, n_a - 1)]
    res = optimize.minimize_scalar(
        lambda x: float(witness_objective(sigma, phase, 0.0, x)),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": tol},
    )
    a = float(res.x)
    return float(witness_objective(sigma, phase, 0.0, a)), a, phase


def entanglement_witness(sigma) -> WitnessResult:
    """Minimize the separability-inequality violation over phases and ``a``.

    With ``c1 = Tr(A) - 1``, ``c2 = Tr(B) - 1`` and the phase-optimized cross
    term ``c3 = -2 |(G_xx - G_yy, G_xy + G_yx)|`` the witness is
    ``2 sqrt(c1 c2) + c3`` at ``a = (c2/c1)**(1/4)``. When a single-mode block
    has trace below the vacuum value the minimum over ``a`` is unbounded, so a
    bounded grid search is reported with ``fallback=True``.
    """
    s = _as_cov(sigma)
    c1 = float(s[0, 0] + s[1, 1]) - 1.0
    c2 = float(s[2, 2] + s[3, 3]) - 1.0
    p = float(s[0, 2] - s[1, 3])
    q = float(s[0, 3] + s[1, 2])
    c3 = -2.0 * math.hypot(p, q)
    phase = math.atan2(-q, -p) % (2 * math.pi) if (p or q) else 0.0
    delta_epr = 0.5 * (c1 + c2 + 2.0 + c3)

    if c1 < -SQRT_CLAMP_TOL or c2 < -SQRT_CLAMP_TOL:
        e_w, a_star, phase = witness_grid_search(s)
        return WitnessResult(e_w, a_star, phase, delta_epr, fallback=True)

    c1, c2 = max(c1, 0.0), max(c2, 0.0)
    if c1 == 0.0 or c2 == 0.0:
        return WitnessResult(c3, 1.0, phase, delta_epr)
    return WitnessResult(2.0 * math.sqrt(c1 * c2) + c3, (c2 / c1) ** 0.25, phase, delta_epr)


def quadrature_variance(sigma, theta1, theta2):
    """``(Var W1(theta1), Var W2(theta2), Cov(W1, W2))`` for ``W = X cos + Y sin``.

    Broadcasts over array-valued phases.
    """
    s = _as_cov(sigma)
    c1, s1 = np.cos(theta1), np.sin(theta1)
    c2, s2 = np.cos(theta2), np.sin(theta2)
    v1 = s[0, 0] * c1 * c1 + 2 * s[0, 1] * c1 * s1 + s[1, 1] * s1 * s1
    v2 = s[2, 2] * c2 * c2 + 2 * s[2, 3] * c2 * s2 + s[3, 3] * s2 * s2
    cov = s[0, 2] * c1 * c2 + s[0, 3] * c1 * s2 + s[1, 2] * s1 * c2 + s[1, 3] * s1 * s2
    return v1, v2, cov


def minimum_variances(sigma, n_grid: int = 361) -> tuple[float, float, float]:
    """Smallest ``Var W1``, ``Var W2`` and ``Var(W1 + W2) / 2`` over all phases.

    The single-mode minima are the smaller eigenvalues of the diagonal
    blocks. The joint minimum is found on a phase grid and polished with a
    local simplex search.
    """
    s = _as_cov(sigma)
    min1 = float(np.linalg.eigvalsh(s[:2, :2])[0])
    min2 = float(np.linalg.eigvalsh(s[2:, 2:])[0])

    def joint(t1, t2):
        v1, v2, c = quadrature_variance(s, t1, t2)
        return 0.5 * (v1 + v2 + 2.0 * c)

    phases = np.linspace(0.0, 2 * np.pi, n_grid, endpoint=False)
    grid = joint(phases[:, None], phases[None, :])
    i, j = np.unravel_index(np.argmin(grid), grid.shape)
    res = optimize.minimize(
        lambda x: float(joint(x[0], x[1])),
        x0=[phases[i], phases[j]],
        method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-14},
    )
    return min1, min2, float(min(res.fun, grid[i, j]))
