"""Seeded synthesis of dual-channel quadrature records.

Each record sweeps both measurement phases through the same schedule. The
phases advance at the detunings of the two measurement chains, so with the
defaults one record holds one full turn of ``theta1`` and fifty of
``theta2``. Random draws come from a Philox counter-based generator keyed by
the seed, with the record index placed in the counter, so every record owns
an independent stream and records can be produced in any order or in
parallel without changing a single bit of the output.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError, UnphysicalStateError
from .gaussian import GaussianState, quadrature_variance

PSD_TOL = 1e-12


@dataclass(frozen=True)
class AcquisitionConfig:
    sample_interval: float = 1e-7
    detune1: float = 1e3
    detune2: float = 5e4
    samples_per_record: int = 10_000
    n_records: int = 1_000
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_record < 1 or self.n_records < 1:
            raise DomainError("record counts must be positive")
        if not self.sample_interval > 0:
            raise DomainError("sample interval must be positive")
        if not 0 <= self.seed < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")
        for name in ("detune1", "detune2"):
            turns = self.periods(name)
            if abs(turns - round(turns)) > 1e-9 or round(turns) < 1:
                raise DomainError(
                    f"{name} must give a whole number of phase turns per record, got {turns:.6g}"
                )

    def periods(self, which: str = "detune1") -> float:
        return self.samples_per_record * self.sample_interval * getattr(self, which)

    @property
    def n_samples(self) -> int:
        return self.samples_per_record * self.n_records

    def replace(self, **changes) -> "AcquisitionConfig":
        return AcquisitionConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AcquisitionConfig":
        fields = ("sample_interval", "detune1", "detune2", "samples_per_record", "n_records", "seed")
        kwargs = {k: data[k] for k in fields if k in data}
        for k in ("samples_per_record", "n_records", "seed"):
            if k in kwargs:
                kwargs[k] = int(kwargs[k])
        return cls(**kwargs)


@dataclass
class QuadratureDataset:
    """Quadruplets ``(theta1, w1, theta2, w2)`` laid out as ``(record, sample)`` arrays.

    Phase arrays may be broadcast views of a single schedule row.
    """

    theta1: np.ndarray
    w1: np.ndarray
    theta2: np.ndarray
    w2: np.ndarray
    config: AcquisitionConfig | None = None

    def __post_init__(self):
        w1 = np.atleast_2d(np.asarray(self.w1, dtype=float))
        shape = w1.shape
        self.w1 = w1
        self.w2 = np.asarray(self.w2, dtype=float).reshape(shape)
        self.theta1 = np.broadcast_to(np.asarray(self.theta1, dtype=float), shape)
        self.theta2 = np.broadcast_to(np.asarray(self.theta2, dtype=float), shape)

    @property
    def n_records(self) -> int:
        return self.w1.shape[0]

    @property
    def samples_per_record(self) -> int:
        return self.w1.shape[1]

    def __len__(self):
        return self.w1.size

    def is_schedule_aligned(self) -> bool:
        """True when every record visits the same phase pairs in the same order."""
        return bool(
            np.array_equal(self.theta1, np.broadcast_to(self.theta1[:1], self.theta1.shape))
            and np.array_equal(self.theta2, np.broadcast_to(self.theta2[:1], self.theta2.shape))
        )


def phase_schedule(config: AcquisitionConfig, sample_index):
    """Phases ``2 pi * detune * k * dt`` reduced to ``[0, 2 pi)``.

    The configuration guarantees a whole number of turns per record, so the
    reduction is done exactly in integers; the default schedule gives
    ``theta2 = 0`` at ``k = 5000``, not a rounding residue.
    """
    k = np.asarray(sample_index)
    if np.any(k < 0) or np.any(k >= config.samples_per_record):
        raise DomainError(f"sample index out of range [0, {config.samples_per_record})")
    n = config.samples_per_record
    out = []
    for name in ("detune1", "detune2"):
        turns = int(round(config.periods(name)))
        out.append(2.0 * np.pi * ((k.astype(np.int64) * turns) % n) / n)
    if k.ndim == 0:
        return float(out[0]), float(out[1])
    return out[0], out[1]


def schedule(config: AcquisitionConfig) -> tuple[np.ndarray, np.ndarray]:
    """The full per-record phase schedule as two arrays."""
    return phase_schedule(config, np.arange(config.samples_per_record))


def _projected(state: GaussianState, theta1, theta2):
    """Means and symmetric square roots of the projected 2x2 covariances."""
    s = state.sigma
    mu = state.mu
    v1, v2, c = quadrature_variance(s, theta1, theta2)
    v1, v2, c = np.broadcast_arrays(np.asarray(v1, float), np.asarray(v2, float), np.asarray(c, float))
    m1 = mu[0] * np.cos(theta1) + mu[1] * np.sin(theta1)
    m2 = mu[2] * np.cos(theta2) + mu[3] * np.sin(theta2)
    return (m1, m2), _sqrt2x2(v1, v2, c)


def _sqrt2x2(a, c, b):
    """Closed-form symmetric square root of ``[[a, b], [b, c]]``, elementwise.

    Eigenvalues within ``PSD_TOL`` below zero are clamped; anything more
    negative raises :class:`UnphysicalStateError`.
    """
    half_tr = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    lam_lo = half_tr - rad
    lam_hi = half_tr + rad
    if np.any(lam_lo < -PSD_TOL):
        raise UnphysicalStateError(
            f"projected covariance is not positive semidefinite (eigenvalue {lam_lo.min():.3e})"
        )
    r_lo = np.sqrt(np.clip(lam_lo, 0.0, None))
    r_hi = np.sqrt(np.clip(lam_hi, 0.0, None))
    # sqrt(M) = (M + sqrt(det) I) / (r_lo + r_hi) for 2x2 PSD M
    denom = r_lo + r_hi
    safe = np.where(denom > 0, denom, 1.0)
    det_root = r_lo * r_hi
    l11 = np.where(denom > 0, (a + det_root) / safe, 0.0)
    l22 = np.where(denom > 0, (c + det_root) / safe, 0.0)
    l12 = np.where(denom > 0, b / safe, 0.0)
    return l11, l12, l22


def _record_generator(seed: int, record: int) -> np.random.Generator:
    key = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    bitgen = np.random.Philox(key=key, counter=np.array([0, 0, record, 0], dtype=np.uint64))
    return np.random.Generator(bitgen)


def sample_pair(state: GaussianState, theta1: float, theta2: float, rng: np.random.Generator):
    """One draw of ``(W1(theta1), W2(theta2))`` from ``state``."""
    (m1, m2), (l11, l12, l22) = _projected(state, theta1, theta2)
    z1, z2 = rng.standard_normal(2)
    return float(m1 + l11 * z1 + l12 * z2), float(m2 + l12 * z1 + l22 * z2)


def _fill_records(records, out1, out2, seed, means, root):
    (m1, m2), (l11, l12, l22) = means, root
    for r in records:
        z = _record_generator(seed, r).standard_normal((2, m1.size))
        out1[r] = m1 + l11 * z[0] + l12 * z[1]
        out2[r] = m2 + l12 * z[0] + l22 * z[1]


def generate_dataset(
    state: GaussianState, config: AcquisitionConfig, workers: int = 1
) -> QuadratureDataset:
    """Synthesize ``n_records`` records following the acquisition schedule.

    Draws within a record come from that record's own stream in sample
    order, so the result is bit-identical for any ``workers``.
    """
    theta1, theta2 = schedule(config)
    means, root = _projected(state, theta1, theta2)
    shape = (config.n_records, config.samples_per_record)
    w1 = np.empty(shape)
    w2 = np.empty(shape)
    records = range(config.n_records)
    if workers <= 1:
        _fill_records(records, w1, w2, config.seed, means, root)
    else:
        chunk = math.ceil(config.n_records / workers)
        parts = [records[i : i + chunk] for i in range(0, config.n_records, chunk)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for f in [pool.submit(_fill_records, p, w1, w2, config.seed, means, root) for p in parts]:
                f.result()
    return QuadratureDataset(theta1=theta1, w1=w1, theta2=theta2, w2=w2, config=config)


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit child seed determined by ``seed`` and the integer path ``keys``."""
    words = np.random.SeedSequence(seed, spawn_key=tuple(keys)).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)
