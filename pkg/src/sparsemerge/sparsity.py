"""Magnitude pruning, sparsity measurement, and the cyclic prune-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .params import ParameterSet, flatten, param_count, require_compatible, unflatten

# Pair-normalization guard for the magnitude measure.
MAGNITUDE_EPS = 1e-12


class SparsityMeasure(Enum):
    ZERO_COUNT = "zero-count"
    MAGNITUDE = "magnitude"


class Granularity(Enum):
    GLOBAL = "global"
    LOCAL = "local"


class RampKind(Enum):
    LINEAR = "linear"
    COSINE = "cosine"


@dataclass(frozen=True)
class SparsitySchedule:
    """Cyclic ramp of the prune rate.

    Within each cycle the rate ramps from ``s_min`` to ``s_max`` (linearly by
    default; a half-cosine ramp hits the same endpoints); every restart
    returns to ``s_min`` and multiplies the cycle length by ``t_mult``. The
    final cycle may be cut short by ``total_steps``, in which case the ramp
    slope is still that of the full nominal cycle.
    """

    s_min: float = 0.1
    s_max: float = 0.6
    t0: int = 3
    t_mult: int = 2
    total_steps: int = 12
    ramp: RampKind = RampKind.LINEAR

    def __post_init__(self):
        if not (0.0 <= self.s_min <= self.s_max <= 1.0):
            raise ValueError(f"need 0 <= s_min <= s_max <= 1, got ({self.s_min}, {self.s_max})")
        if self.t0 < 1:
            raise ValueError(f"t0 must be >= 1, got {self.t0}")
        if self.t_mult < 1:
            raise ValueError(f"t_mult must be >= 1, got {self.t_mult}")
        # total_steps == 0 is allowed so a zero-step run stays constructible.
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")


def schedule_rate(sched: SparsitySchedule, step: int) -> float:
    if not 0 <= step < sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps})")
    t_cur = step
    t_i = sched.t0
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= sched.t_mult
    if t_i == 1:
        return sched.s_max
    progress = t_cur / (t_i - 1)
    if sched.ramp is RampKind.COSINE:
        progress = 0.5 * (1.0 - np.cos(np.pi * progress))
    return sched.s_min + (sched.s_max - sched.s_min) * progress


def _prune_flat(flat: np.ndarray, rate: float) -> np.ndarray:
    quota = int(np.floor(rate * flat.size))
    if quota == 0:
        return flat
    out = flat.copy()
    # Stable sort on |value| puts existing zeros first and breaks magnitude
    # ties by ascending flat index.
    order = np.argsort(np.abs(flat), kind="stable")
    out[order[:quota]] = 0.0
    return out


def prune(p: ParameterSet, rate: float, granularity: Granularity = Granularity.GLOBAL) -> ParameterSet:
    """Zero the smallest-magnitude entries up to ``floor(rate * n)``.

    Global granularity ranks entries across the whole model; local prunes
    each layer independently. Surviving entries are returned bit-for-bit.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"prune rate must be in [0, 1], got {rate}")
    if granularity is Granularity.GLOBAL:
        return unflatten(p, _prune_flat(flatten(p), rate))
    return ParameterSet.from_pairs(
        (name, _prune_flat(arr.ravel(), rate).reshape(arr.shape)) for name, arr in p.items()
    )


@dataclass(frozen=True)
class SparsityStats:
    layer_zero_frac: dict[str, float]
    layer_mean_abs: dict[str, float]
    zero_frac: float
    mean_abs: float


def collect_stats(p: ParameterSet) -> SparsityStats:
    layer_zero = {}
    layer_mean = {}
    zeros = 0
    total_abs = 0.0
    n = param_count(p)
    for name, arr in p.items():
        z = int(np.count_nonzero(arr == 0.0))
        layer_zero[name] = z / arr.size
        layer_mean[name] = float(np.abs(arr).mean())
        zeros += z
        total_abs += float(np.abs(arr).sum())
    return SparsityStats(
        layer_zero_frac=layer_zero,
        layer_mean_abs=layer_mean,
        zero_frac=zeros / n if n else 0.0,
        mean_abs=total_abs / n if n else 0.0,
    )


def sparsity_weights(
    a: ParameterSet,
    b: ParameterSet,
    measure: SparsityMeasure,
    granularity: Granularity,
) -> dict[str, tuple[float, float]]:
    """Per-layer sparsity signals (w_a, w_b), each in [0, 1].

    Zero-count: a model's own zero fraction (layer-wise under local scoring,
    the model-level fraction replicated to every layer under global).
    Magnitude: pair-normalized mean |value|, so the parent with the smaller
    mean magnitude receives the larger weight and the pair sums to 1 up to
    the normalization guard.
    """
    require_compatible(a, b)
    stats_a = collect_stats(a)
    stats_b = collect_stats(b)
    out: dict[str, tuple[float, float]] = {}
    for name in a.names:
        if measure is SparsityMeasure.ZERO_COUNT:
            if granularity is Granularity.LOCAL:
                out[name] = (stats_a.layer_zero_frac[name], stats_b.layer_zero_frac[name])
            else:
                out[name] = (stats_a.zero_frac, stats_b.zero_frac)
        else:
            if granularity is Granularity.LOCAL:
                m_a = stats_a.layer_mean_abs[name]
                m_b = stats_b.layer_mean_abs[name]
            else:
                m_a = stats_a.mean_abs
                m_b = stats_b.mean_abs
            den = m_a + m_b + MAGNITUDE_EPS
            out[name] = (1.0 - m_a / den, 1.0 - m_b / den)
    return out


def variant_rates(n_dense: int, capacity: int, sched: SparsitySchedule) -> np.ndarray:
    """Prune rates for the sparse variants that fill an archive to capacity."""
    if capacity < n_dense:
        raise ValueError(f"capacity {capacity} below number of dense models {n_dense}")
    k = capacity - n_dense
    if k == 0:
        return np.zeros(0)
    if k == 1:
        return np.array([sched.s_min])
    return np.linspace(sched.s_min, sched.s_max, k)


def make_sparse_variants(
    dense: list[ParameterSet], capacity: int, sched: SparsitySchedule
) -> list[ParameterSet]:
    """Pruned copies of the dense models, filling the archive to capacity.

    Rates are evenly spaced across [s_min, s_max]; variant i is pruned from
    parent i mod len(dense). Fully deterministic.
    """
    rates = variant_rates(len(dense), capacity, sched)
    return [
        prune(dense[i % len(dense)], float(rate), Granularity.GLOBAL)
        for i, rate in enumerate(rates)
    ]
