"""Moment-based Gaussian state estimation from phase-swept quadrature data.

With phases uniform over the circle and independent of the field,
``E[W cos(theta)] = mu_x / 2`` and

    E[W^2 cos^2] = (3 <X^2> + <Y^2>) / 8,
    E[W^2 sin^2] = (<X^2> + 3 <Y^2>) / 8,
    E[W^2 cos sin] = <XY> / 4,

while cross-mode products pick up a factor 1/4. Inverting these gives the
mean and covariance from fourteen sample means. A deterministic schedule
that covers whole turns satisfies the same trigonometric identities exactly,
so it is treated the same way. No physicality constraint is imposed.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, UnphysicalStateError
from .gaussian import (
    GaussianState,
    check_physicality,
    entanglement_witness,
    negativity,
)
from .synth import AcquisitionConfig, QuadratureDataset, derive_seed, generate_dataset

# products accumulated per record, in this order
MOMENT_NAMES = (
    "w1c", "w1s", "w1c_sq", "w1s_sq", "w1c_w1s",
    "w2c", "w2s", "w2c_sq", "w2s_sq", "w2c_w2s",
    "w1c_w2c", "w1c_w2s", "w1s_w2c", "w1s_w2s",
)

# largest tolerated |mean exp(i k.theta)| over the harmonics the inversion relies on
MAX_PHASE_NONUNIFORMITY = 0.5

CHUNK_RECORDS = 64

BOOTSTRAP_STREAM = 1
TRIALS_STREAM = 2


def _row_moments(theta1, w1, theta2, w2) -> np.ndarray:
    """Per-row sums of the fourteen products; rows are records."""
    c1, s1 = np.cos(theta1), np.sin(theta1)
    c2, s2 = np.cos(theta2), np.sin(theta2)
    a1, b1 = w1 * c1, w1 * s1
    a2, b2 = w2 * c2, w2 * s2
    products = (
        a1, b1, a1 * a1, b1 * b1, a1 * b1,
        a2, b2, a2 * a2, b2 * b2, a2 * b2,
        a1 * a2, a1 * b2, b1 * a2, b1 * b2,
    )
    return np.stack([p.sum(axis=-1) for p in products], axis=-1)


@dataclass
class MomentAccumulator:
    """Streaming sums for the moment estimator.

    Sums are kept per record and combined with :func:`math.fsum`, which is
    correctly rounded and therefore independent of the order in which records
    arrive. Feeding the same records in any chunking yields bit-identical
    moments.
    """

    partials: list = field(default_factory=list)
    count: int = 0

    def add(self, theta1, w1, theta2, w2) -> None:
        w1 = np.atleast_2d(np.asarray(w1, dtype=float))
        shape = w1.shape
        w2 = np.asarray(w2, dtype=float).reshape(shape)
        theta1 = np.broadcast_to(np.asarray(theta1, dtype=float), shape)
        theta2 = np.broadcast_to(np.asarray(theta2, dtype=float), shape)
        rows = _row_moments(theta1, w1, theta2, w2)
        if not np.all(np.isfinite(rows)):
            raise DomainError("non-finite quadrature values")
        self.partials.append(rows)
        self.count += w1.size

    def add_dataset(self, dataset: QuadratureDataset, chunk: int = CHUNK_RECORDS) -> None:
        for start in range(0, dataset.n_records, chunk):
            sl = slice(start, start + chunk)
            self.add(dataset.theta1[sl], dataset.w1[sl], dataset.theta2[sl], dataset.w2[sl])

    def sums(self) -> np.ndarray:
        if not self.partials:
            return np.zeros(len(MOMENT_NAMES))
        rows = np.concatenate(self.partials, axis=0)
        return np.array([math.fsum(rows[:, j]) for j in range(rows.shape[1])])

    def means(self) -> dict[str, float]:
        if self.count == 0:
            raise DomainError("no samples accumulated")
        return dict(zip(MOMENT_NAMES, self.sums() / self.count))


def state_from_moments(m: dict[str, float]) -> GaussianState:
    mx1, my1 = 2.0 * m["w1c"], 2.0 * m["w1s"]
    mx2, my2 = 2.0 * m["w2c"], 2.0 * m["w2s"]
    mu = np.array([mx1, my1, mx2, my2])
    sigma = np.empty((4, 4))
    sigma[0, 0] = 3.0 * m["w1c_sq"] - m["w1s_sq"] - mx1 * mx1
    sigma[1, 1] = 3.0 * m["w1s_sq"] - m["w1c_sq"] - my1 * my1
    sigma[0, 1] = sigma[1, 0] = 4.0 * m["w1c_w1s"] - mx1 * my1
    sigma[2, 2] = 3.0 * m["w2c_sq"] - m["w2s_sq"] - mx2 * mx2
    sigma[3, 3] = 3.0 * m["w2s_sq"] - m["w2c_sq"] - my2 * my2
    sigma[2, 3] = sigma[3, 2] = 4.0 * m["w2c_w2s"] - mx2 * my2
    sigma[0, 2] = sigma[2, 0] = 4.0 * m["w1c_w2c"] - mx1 * mx2
    sigma[0, 3] = sigma[3, 0] = 4.0 * m["w1c_w2s"] - mx1 * my2
    sigma[1, 2] = sigma[2, 1] = 4.0 * m["w1s_w2c"] - my1 * mx2
    sigma[1, 3] = sigma[3, 1] = 4.0 * m["w1s_w2s"] - my1 * my2
    return GaussianState(mu, sigma)


def phase_nonuniformity(theta1, theta2) -> float:
    """Largest ``|mean exp(i (k1 theta1 + k2 theta2))|`` over the harmonics the estimator uses.

    Zero for phases covering whole turns uniformly; one when all phases coincide.
    """
    t1 = np.asarray(theta1, dtype=float).ravel()
    t2 = np.asarray(theta2, dtype=float).ravel()
    worst = 0.0
    for k1, k2 in ((2, 0), (4, 0), (0, 2), (0, 4), (2, 2), (2, -2)):
        phase = k1 * t1 + k2 * t2
        worst = max(worst, float(np.hypot(np.cos(phase).mean(), np.sin(phase).mean())))
    return worst


@dataclass(frozen=True)
class StateEstimate:
    state: GaussianState
    physical: bool
    nu_min: float
    n: int
    nonuniformity: float


def estimate_state(dataset: QuadratureDataset) -> StateEstimate:
    """Estimate mean and covariance; the result is returned unprojected with its physicality flag."""
    n = len(dataset)
    if n < 2:
        raise DomainError(f"need at least 2 quadruplets, got {n}")
    if dataset.is_schedule_aligned():
        nonuni = phase_nonuniformity(dataset.theta1[0], dataset.theta2[0])
    else:
        nonuni = phase_nonuniformity(dataset.theta1, dataset.theta2)
    if nonuni > MAX_PHASE_NONUNIFORMITY:
        raise DomainError(
            f"phases do not cover the circle (non-uniformity {nonuni:.3f}); estimator is invalid"
        )
    acc = MomentAccumulator()
    acc.add_dataset(dataset)
    state = state_from_moments(acc.means())
    physical, nu_min = check_physicality(state)
    return StateEstimate(state=state, physical=physical, nu_min=nu_min, n=n, nonuniformity=nonuni)


JOINT_CONVENTIONS = ("half", "u")


@dataclass
class BinnedVariances:
    """Per-phase-pair variances across records.

    ``var_joint`` is ``Var(W1 + W2) / 2`` for ``joint="half"`` or
    ``Var(U1 + U2) / 2 = Var(W1 + W2)`` for ``joint="u"``.
    ``var_diff`` is ``Var(W1 - W2)``.
    """

    sample: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    var_w1: np.ndarray
    var_w2: np.ndarray
    var_joint: np.ndarray
    var_diff: np.ndarray
    count: int
    joint: str = "half"

    def __len__(self):
        return self.sample.size

    def var_sum_w(self) -> np.ndarray:
        return 2.0 * self.var_joint if self.joint == "half" else self.var_joint

    def to_traces(self):
        """Variances in the normalized-measurement units of the squeezer model (vacuum = 1).

        The trace model measures phase from the amplified axis, a quarter turn
        from the quadrature convention used here, so phases shift by ``-pi/2``.
        Fitted ``phi1``, ``phi2`` are then directly usable in
        :func:`~twomode.squeezer.predict_covariance`.
        """
        from .squeezer import VarianceTraces

        return VarianceTraces(
            theta1=self.theta1 - np.pi / 2,
            theta2=self.theta2 - np.pi / 2,
            var1=2.0 * self.var_w1,
            var2=2.0 * self.var_w2,
            var_sum=2.0 * self.var_sum_w(),
            var_diff=2.0 * self.var_diff,
        )


def bin_variances(dataset: QuadratureDataset, joint: str = "half") -> BinnedVariances:
    """Unbiased variances across records at each sample index of the schedule."""
    if joint not in JOINT_CONVENTIONS:
        raise DomainError(f"joint must be one of {JOINT_CONVENTIONS}, got {joint!r}")
    if dataset.n_records < 2:
        raise DomainError("need at least 2 records to bin variances")
    if not dataset.is_schedule_aligned():
        raise DomainError("records do not share a phase schedule")
    w1, w2 = dataset.w1, dataset.w2
    var_sum = np.var(w1 + w2, axis=0, ddof=1)
    return BinnedVariances(
        sample=np.arange(dataset.samples_per_record),
        theta1=np.array(dataset.theta1[0]),
        theta2=np.array(dataset.theta2[0]),
        var_w1=np.var(w1, axis=0, ddof=1),
        var_w2=np.var(w2, axis=0, ddof=1),
        var_joint=0.5 * var_sum if joint == "half" else var_sum,
        var_diff=np.var(w1 - w2, axis=0, ddof=1),
        count=dataset.n_records,
        joint=joint,
    )


def analysis_quantities(state: GaussianState) -> tuple[float, float, float]:
    """``(E_W, N, Delta_EPR)``; NaN where the covariance admits no value."""
    w = entanglement_witness(state)
    try:
        n = negativity(state).negativity
    except DomainError:
        n = math.nan
    return w.e_w, n, w.delta_epr


def _replicate(state, config, seed):
    data = generate_dataset(state, config.replace(seed=seed))
    est = estimate_state(data)
    return analysis_quantities(est.state) + (est.physical,)


def _run_replicates(state, config, count, stream, seed, workers):
    physical, _ = check_physicality(state)
    if not physical:
        raise UnphysicalStateError("cannot resample from an unphysical state")
    base = config.seed if seed is None else seed
    seeds = [derive_seed(base, stream, i) for i in range(count)]
    if workers <= 1:
        rows = [_replicate(state, config, s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda s: _replicate(state, config, s), seeds))
    values = np.array([r[:3] for r in rows], dtype=float)
    flags = np.array([r[3] for r in rows], dtype=bool)
    return seeds, values, flags


def _std(x):
    return float(np.std(x, ddof=1)) if x.size >= 2 else None


@dataclass
class BootstrapReport:
    replicates: int
    seeds: list[int]
    e_w: np.ndarray
    negativity: np.ndarray
    delta_epr: np.ndarray
    physical: np.ndarray

    @property
    def std_e_w(self) -> float:
        return _std(self.e_w)

    @property
    def std_negativity(self) -> float:
        return _std(self.negativity)

    @property
    def std_delta_epr(self) -> float:
        return _std(self.delta_epr)

    def to_dict(self) -> dict:
        return {
            "replicates": self.replicates,
            "seeds": list(self.seeds),
            "std": {
                "e_w": self.std_e_w,
                "negativity": self.std_negativity,
                "delta_epr": self.std_delta_epr,
            },
            "values": {
                "e_w": [float(v) for v in self.e_w],
                "negativity": [float(v) for v in self.negativity],
                "delta_epr": [float(v) for v in self.delta_epr],
                "physical": [bool(v) for v in self.physical],
            },
        }


def parametric_bootstrap(
    state: GaussianState,
    config: AcquisitionConfig,
    replicates: int = 20,
    seed: int | None = None,
    workers: int = 1,
) -> BootstrapReport:
    """Resimulate ``replicates`` datasets from ``state`` and re-run the estimate and analysis.

    Replicate ``i`` uses the seed derived from ``(seed, i)`` (``seed``
    defaults to ``config.seed``), so reports are reproducible and independent
    of ``workers``.
    """
    if replicates < 2:
        raise DomainError("bootstrap needs at least 2 replicates")
    seeds, values, flags = _run_replicates(state, config, replicates, BOOTSTRAP_STREAM, seed, workers)
    return BootstrapReport(
        replicates=replicates,
        seeds=seeds,
        e_w=values[:, 0],
        negativity=values[:, 1],
        delta_epr=values[:, 2],
        physical=flags,
    )


@dataclass
class TrialSummary:
    trials: int
    e_w: np.ndarray
    negativity: np.ndarray

    @property
    def mean_e_w(self) -> float:
        return float(np.mean(self.e_w))

    @property
    def mean_negativity(self) -> float:
        return float(np.mean(self.negativity))

    @property
    def std_e_w(self) -> float | None:
        return _std(self.e_w)

    @property
    def std_negativity(self) -> float | None:
        return _std(self.negativity)


def repeatability_trials(
    state: GaussianState,
    config: AcquisitionConfig,
    trials: int,
    seed: int | None = None,
    workers: int = 1,
) -> TrialSummary:
    """Independent end-to-end runs; standard deviations are ``None`` for a single trial."""
    if trials < 1:
        raise DomainError("need at least one trial")
    _, values, _ = _run_replicates(state, config, trials, TRIALS_STREAM, seed, workers)
    return TrialSummary(trials=trials, e_w=values[:, 0], negativity=values[:, 1])
