"""Estimators of the maximum expected value (MEV) of a set of random variables.

Two layers live here:

* a scalar API over :class:`SampleSummary` sequences (``t_estimator``,
  ``k_estimator``, ...), returning plain floats or :class:`MevEstimate`;
* batched array kernels (``*_batch``) operating on the last axis of
  ``(..., M)`` arrays.  The Monte-Carlo harness and both RL modules run on
  these; the scalar API is a thin wrapper around them.

Batched functions accept an optional boolean ``mask`` of the same shape that
marks which of the ``M`` entries exist (used for states with fewer actions).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernels import IndicatorAlpha, KernelSpec, z_quantile


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class SampleSummary:
    mean: float
    variance: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise EstimatorError("count must be >= 1")
        if not self.variance >= 0:
            raise EstimatorError("variance must be non-negative")

    @property
    def mean_variance(self) -> float:
        """Variance of the sample mean, ``variance / count``."""
        return self.variance / self.count


@dataclass(frozen=True)
class MevEstimate:
    value: float
    weights: tuple[float, ...]
    retained_count: int


def summarize(values: Sequence[float]) -> SampleSummary:
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 2:
        raise EstimatorError("insufficient sample: need at least 2 values")
    return SampleSummary(float(x.mean()), float(x.var(ddof=1)), int(x.size))


def as_arrays(summaries: Sequence[SampleSummary]):
    if len(summaries) == 0:
        raise EstimatorError("need at least one summary")
    means = np.array([s.mean for s in summaries], dtype=float)
    variances = np.array([s.variance for s in summaries], dtype=float)
    counts = np.array([s.count for s in summaries], dtype=float)
    return means, variances, counts


# ---------------------------------------------------------------------------
# batched kernels
# ---------------------------------------------------------------------------

def _masked(means, mask):
    means = np.asarray(means, dtype=float)
    if mask is None:
        return means
    return np.where(mask, means, -np.inf)


def champion_index(means, mask=None):
    """Lowest index attaining the maximum along the last axis."""
    return np.argmax(_masked(means, mask), axis=-1)


def me_batch(means, mask=None):
    return np.max(_masked(means, mask), axis=-1)


def ae_batch(means, mask=None):
    means = np.asarray(means, dtype=float)
    if mask is None:
        return means.mean(axis=-1)
    return np.where(mask, means, 0.0).sum(axis=-1) / mask.sum(axis=-1)


def test_statistics(means, variances, counts=1.0, mask=None):
    """Two-sample statistics of every entry against the champion.

    Returns ``(T, champion)``.  ``T`` is clamped to ``<= 0``; a zero pooled
    standard error gives ``T = 0`` for ties with the champion and ``-inf``
    for strictly smaller means.  Masked-out entries get ``-inf``.
    """
    means = np.asarray(means, dtype=float)
    se2 = np.asarray(variances, dtype=float) / np.asarray(counts, dtype=float)
    se2 = np.broadcast_to(se2, means.shape)
    champ = champion_index(means, mask)[..., None]
    best = np.take_along_axis(means, champ, axis=-1)
    best_se2 = np.take_along_axis(se2, champ, axis=-1)
    diff = means - best
    denom = np.sqrt(se2 + best_se2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / denom
    degenerate = denom == 0.0
    if np.any(degenerate):
        t = np.where(degenerate, np.where(diff == 0.0, 0.0, -np.inf), t)
    t = np.minimum(t, 0.0)
    if mask is not None:
        t = np.where(mask, t, -np.inf)
    return t, champ[..., 0]


def _weighted_offset(means, weights, champ):
    # value = best + sum w (mu - best) / sum w keeps value <= max exactly
    best = np.take_along_axis(means, champ[..., None], axis=-1)[..., 0]
    diff = np.where(weights > 0, means - best[..., None], 0.0)
    total = weights.sum(axis=-1)
    return best + (weights * diff).sum(axis=-1) / total, total


def te_batch(means, variances, counts=1.0, alpha=0.05, mask=None):
    """T-Estimator along the last axis; returns ``(values, retained_counts)``."""
    if not (0.0 < alpha <= 0.5):
        raise EstimatorError("alpha must lie in (0, 0.5]")
    means = np.asarray(means, dtype=float)
    t, champ = test_statistics(means, variances, counts, mask)
    keep = (t >= z_quantile(alpha)).astype(float)
    values, total = _weighted_offset(means, keep, champ)
    return values, total.astype(int)


def ke_batch(means, variances, counts=1.0, kernel: KernelSpec | None = None,
             mask=None, return_weights=False):
    """K-Estimator along the last axis.

    With ``return_weights`` also returns the unnormalised kernel weights.
    """
    if kernel is None:
        raise EstimatorError("a kernel spec is required")
    means = np.asarray(means, dtype=float)
    t, champ = test_statistics(means, variances, counts, mask)
    w = np.asarray(kernel(t), dtype=float)
    if mask is not None:
        w = np.where(mask, w, 0.0)
    if np.any(w.sum(axis=-1) <= 0):
        raise AssertionError("kernel assigned zero total weight; kappa(0) must be > 0")
    values, _ = _weighted_offset(means, w, champ)
    if return_weights:
        return values, w
    return values


def de_batch(means_a, means_b, mode="cve", mask=None):
    """Double / cross-validation estimator from per-half sample means."""
    means_a = np.asarray(means_a, dtype=float)
    means_b = np.asarray(means_b, dtype=float)
    pick_a = champion_index(means_a, mask)[..., None]
    single = np.take_along_axis(means_b, pick_a, axis=-1)[..., 0]
    if mode == "single":
        return single
    if mode != "cve":
        raise EstimatorError(f"unknown double-estimator mode {mode!r}")
    pick_b = champion_index(means_b, mask)[..., None]
    other = np.take_along_axis(means_a, pick_b, axis=-1)[..., 0]
    return 0.5 * (single + other)


def we_weights_batch(means, mean_sds, draws: int, rng: np.random.Generator,
                     mask=None):
    """Monte-Carlo probabilities of each entry being the maximum.

    Draws ``draws`` Gaussian vectors per row; exact ties inside a draw split
    the count evenly.
    """
    if draws < 1:
        raise EstimatorError("mc_sample_count must be >= 1")
    means = np.asarray(means, dtype=float)
    sds = np.broadcast_to(np.asarray(mean_sds, dtype=float), means.shape)
    shape = means.shape[:-1] + (draws, means.shape[-1])
    sample = rng.standard_normal(shape)
    sample *= sds[..., None, :]
    sample += means[..., None, :]
    if mask is not None:
        sample = np.where(mask[..., None, :], sample, -np.inf)
    hits = sample == sample.max(axis=-1, keepdims=True)
    n_hits = hits.sum(axis=-1, keepdims=True)
    if np.all(n_hits == 1):
        return hits.mean(axis=-2)
    return (hits / n_hits).mean(axis=-2)


def we_batch(means, mean_sds, draws=100, rng=None, mask=None):
    rng = np.random.default_rng() if rng is None else rng
    w = we_weights_batch(means, mean_sds, draws, rng, mask)
    means = np.asarray(means, dtype=float)
    return (w * np.where(w > 0, means, 0.0)).sum(axis=-1)


# ---------------------------------------------------------------------------
# scalar API
# ---------------------------------------------------------------------------

def max_estimator(summaries: Sequence[SampleSummary]) -> float:
    means, _, _ = as_arrays(summaries)
    return float(means.max())


def average_estimator(summaries: Sequence[SampleSummary]) -> float:
    means, _, _ = as_arrays(summaries)
    return float(means.mean())


def t_statistic(candidate: SampleSummary, champion: SampleSummary) -> float:
    """Two-sample statistic ``(candidate - champion) / pooled standard error``."""
    diff = candidate.mean - champion.mean
    if diff > 0:
        raise EstimatorError("champion mean must not be below the candidate mean")
    denom = np.sqrt(candidate.mean_variance + champion.mean_variance)
    if denom == 0.0:
        return 0.0 if diff == 0.0 else -np.inf
    return float(diff / denom)


def t_estimator(summaries: Sequence[SampleSummary], alpha: float) -> MevEstimate:
    means, variances, counts = as_arrays(summaries)
    values, retained = te_batch(means, variances, counts, alpha)
    t, _ = test_statistics(means, variances, counts)
    keep = (t >= z_quantile(alpha)).astype(float)
    return MevEstimate(float(values), tuple(keep / keep.sum()), int(retained))


def k_estimator(summaries: Sequence[SampleSummary], spec: KernelSpec) -> MevEstimate:
    means, variances, counts = as_arrays(summaries)
    value, w = ke_batch(means, variances, counts, spec, return_weights=True)
    return MevEstimate(float(value), tuple(w / w.sum()), int(np.count_nonzero(w)))


def weighted_estimator(summaries: Sequence[SampleSummary], mc_sample_count: int = 100,
                       seed=None) -> float:
    means, variances, counts = as_arrays(summaries)
    rng = np.random.default_rng(seed)
    return float(we_batch(means, np.sqrt(variances / counts), mc_sample_count, rng))


def split_samples(samples: Sequence[Sequence[float]], rng: np.random.Generator):
    """Shuffle each sample and cut it in two; the first half takes the odd element."""
    half_a, half_b = [], []
    for values in samples:
        x = np.asarray(values, dtype=float).ravel()
        perm = rng.permutation(x.size)
        cut = (x.size + 1) // 2
        half_a.append(x[perm[:cut]])
        half_b.append(x[perm[cut:]])
    return half_a, half_b


def double_estimator(samples: Sequence[Sequence[float]], mode: str = "cve",
                     seed=None) -> float:
    if len(samples) == 0:
        raise EstimatorError("need at least one sample")
    if any(len(s) < 4 for s in samples):
        raise EstimatorError("insufficient sample: double estimator needs >= 4 values per variable")
    rng = np.random.default_rng(seed)
    half_a, half_b = split_samples(samples, rng)
    means_a = np.array([h.mean() for h in half_a])
    means_b = np.array([h.mean() for h in half_b])
    return float(de_batch(means_a, means_b, mode))


def estimate(name: str, summaries: Sequence[SampleSummary], **kw) -> float:
    """Dispatch by estimator id: ``me``, ``ae``, ``we``, ``te``, ``ke``."""
    if name == "me":
        return max_estimator(summaries)
    if name == "ae":
        return average_estimator(summaries)
    if name == "we":
        return weighted_estimator(summaries, kw.get("mc_sample_count", 100), kw.get("seed"))
    if name == "te":
        return t_estimator(summaries, kw["alpha"]).value
    if name == "ke":
        return k_estimator(summaries, kw["spec"]).value
    raise EstimatorError(f"unknown estimator {name!r}")


__all__ = [
    "EstimatorError",
    "SampleSummary",
    "MevEstimate",
    "IndicatorAlpha",
    "summarize",
    "max_estimator",
    "average_estimator",
    "double_estimator",
    "weighted_estimator",
    "t_statistic",
    "t_estimator",
    "k_estimator",
    "split_samples",
    "test_statistics",
    "me_batch",
    "ae_batch",
    "te_batch",
    "ke_batch",
    "de_batch",
    "we_batch",
    "we_weights_batch",
    "champion_index",
]
