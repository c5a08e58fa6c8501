"""Monte-Carlo drivers: iid Gaussian sweep, AR(1) study, internet ads.

Runs are grouped in fixed-size blocks; every block draws from its own RNG
stream keyed by ``(seed, point index, block index)``.  Results therefore do
not depend on how blocks are scheduled across worker processes.

For iid data the harness never materialises raw samples.  Each variable's
sample is represented by the sufficient statistics of its two halves (mean
and sum of squares for Gaussians, click counts for Bernoulli draws), drawn
from their exact sampling distributions.  The full-sample summary is
assembled from the halves, so the double estimator and all others see the
same underlying data within a run.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import estimators as est
from .kernels import KernelSpec, parse_kernel

BLOCK_SIZE = 10_000


@dataclass
class SummaryBatch:
    """Per-run summaries of ``M`` variables; all arrays have shape ``(R, M)``."""

    means: np.ndarray
    variances: np.ndarray
    counts: np.ndarray
    half_a: np.ndarray
    half_b: np.ndarray

    @property
    def runs(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    alpha: float | None = None
    kernel: KernelSpec | None = None
    draws: int = 100

    @property
    def name(self) -> str:
        if self.kind == "te":
            return f"te({self.alpha:g})"
        if self.kind == "ke":
            return self.kernel.label()
        return self.kind


def parse_estimator(text: str) -> EstimatorSpec:
    """``me``, ``ae``, ``de``, ``cve``, ``we``, ``te:0.05``, ``ke:gauss:1``, ``ke:beta:2,0.5``."""
    kind, _, rest = text.strip().lower().partition(":")
    if kind in ("me", "ae", "de", "cve"):
        return EstimatorSpec(kind)
    if kind == "we":
        return EstimatorSpec("we", draws=int(rest or 100))
    if kind == "te":
        alpha = float(rest or 0.05)
        if not (0.0 < alpha <= 0.5):
            raise ValueError("alpha must lie in (0, 0.5]")
        return EstimatorSpec("te", alpha=alpha)
    if kind == "ke":
        return EstimatorSpec("ke", kernel=parse_kernel(rest or "gauss:1"))
    raise ValueError(f"unknown estimator {text!r}")


def parse_estimators(items: Iterable[str | EstimatorSpec]) -> list[EstimatorSpec]:
    return [s if isinstance(s, EstimatorSpec) else parse_estimator(s) for s in items]


def apply_estimator(spec: EstimatorSpec, batch: SummaryBatch, rng: np.random.Generator):
    if spec.kind == "me":
        return est.me_batch(batch.means)
    if spec.kind == "ae":
        return est.ae_batch(batch.means)
    if spec.kind == "de":
        return est.de_batch(batch.half_a, batch.half_b, "single")
    if spec.kind == "cve":
        return est.de_batch(batch.half_a, batch.half_b, "cve")
    if spec.kind == "we":
        sds = np.sqrt(batch.variances / batch.counts)
        return est.we_batch(batch.means, sds, spec.draws, rng)
    if spec.kind == "te":
        return est.te_batch(batch.means, batch.variances, batch.counts, spec.alpha)[0]
    if spec.kind == "ke":
        return est.ke_batch(batch.means, batch.variances, batch.counts, spec.kernel)
    raise ValueError(spec.kind)


@dataclass(frozen=True)
class MetricsRow:
    estimator: str
    bias: float
    variance: float
    mse: float
    mc_standard_error: float
    variance_se: float = float("nan")
    mean: float = float("nan")
    runs: int = 0


def compute_metrics(name: str, values, target: float) -> MetricsRow:
    x = np.asarray(values, dtype=float)
    n = x.size
    mean = float(x.mean())
    centred = x - mean
    var = float(np.mean(centred ** 2))
    m4 = float(np.mean(centred ** 4))
    bias = mean - target
    se = math.sqrt(var / n) if n > 1 else float("nan")
    var_se = math.sqrt(max(m4 - var * var, 0.0) / n) if n > 1 else float("nan")
    return MetricsRow(name, bias, var, bias * bias + var, se, var_se, mean, n)


def _block_sizes(runs: int, block: int = BLOCK_SIZE) -> list[int]:
    full, rest = divmod(runs, block)
    return [block] * full + ([rest] if rest else [])


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _map(fn: Callable, tasks: list, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# iid Gaussian sweep
# ---------------------------------------------------------------------------

def sample_gaussian_summaries(mus, sigma_sq, sizes, runs: int, rng: np.random.Generator,
                              known_variance: bool = False) -> SummaryBatch:
    """Exact sampling distribution of Gaussian sample summaries, split in halves.

    Half A holds ``ceil(n/2)`` observations.  ``sigma_sq`` is a common
    variance or one per variable.  With ``known_variance`` the variance
    field carries the true ``sigma_sq`` instead of the estimate.
    """
    mus = np.asarray(mus, float)
    sizes = np.broadcast_to(np.asarray(sizes, dtype=int), mus.shape)
    sigma_sq = np.broadcast_to(np.asarray(sigma_sq, dtype=float), mus.shape)
    if np.any(sizes < 2):
        raise ValueError("every sample needs at least 2 observations")
    if np.any(sigma_sq < 0):
        raise ValueError("variances must be non-negative")
    na = (sizes + 1) // 2
    nb = sizes - na
    sd = np.sqrt(sigma_sq)
    m = mus.size
    ma = mus + sd / np.sqrt(na) * rng.standard_normal((runs, m))
    mb = mus + sd / np.sqrt(nb) * rng.standard_normal((runs, m))
    ss_a = sigma_sq * rng.chisquare(np.maximum(na - 1, 1), (runs, m)) * (na > 1)
    ss_b = sigma_sq * rng.chisquare(np.maximum(nb - 1, 1), (runs, m)) * (nb > 1)
    means = (na * ma + nb * mb) / sizes
    ss = ss_a + ss_b + na * nb / sizes * (ma - mb) ** 2
    if known_variance:
        variances = np.array(np.broadcast_to(sigma_sq, (runs, m)))
    else:
        variances = ss / (sizes - 1)
    counts = np.broadcast_to(sizes.astype(float), (runs, m))
    return SummaryBatch(means, variances, counts, ma, mb)


@dataclass(frozen=True)
class IidSweepConfig:
    M: int = 2
    means: tuple = (0.0, 0.0)
    sigma_sq: float = 100.0
    sample_sizes: tuple = (100, 100)
    gap_grid: tuple = tuple(np.round(np.linspace(0.0, 5.0, 11), 10))
    runs: int = 100_000
    seed: int = 0
    known_variance: bool = False

    def __post_init__(self):
        if self.M < 2 or len(self.means) != self.M or len(self.sample_sizes) != self.M:
            raise ValueError("means and sample_sizes must both have M >= 2 entries")
        if self.sigma_sq < 0:
            raise ValueError("sigma_sq must be non-negative")
        if self.runs < 1:
            raise ValueError("runs must be positive")

    def point_means(self, mu1: float) -> np.ndarray:
        return np.array((mu1,) + tuple(self.means[1:]), dtype=float)


DEFAULT_IID_ESTIMATORS = ("me", "cve", "we", "te:0.05", "te:0.10", "te:0.15", "ke:gauss:1")


def _iid_block(task):
    cfg, specs, point, block, size = task
    rng = _stream(cfg.seed, point, block)
    mus = cfg.point_means(cfg.gap_grid[point])
    batch = sample_gaussian_summaries(mus, cfg.sigma_sq, cfg.sample_sizes, size, rng,
                                      cfg.known_variance)
    return [apply_estimator(s, batch, rng) for s in specs]


@dataclass
class SweepPoint:
    mu1: float
    target: float
    rows: list[MetricsRow]
    values: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def row(self, name: str) -> MetricsRow:
        for r in self.rows:
            if r.estimator == name:
                return r
        raise KeyError(name)


def run_iid_sweep(cfg: IidSweepConfig, estimators: Sequence = DEFAULT_IID_ESTIMATORS,
                  jobs: int = 1, keep_values: bool = False) -> list[SweepPoint]:
    specs = parse_estimators(estimators)
    sizes = _block_sizes(cfg.runs)
    tasks = [(cfg, specs, p, b, s) for p in range(len(cfg.gap_grid))
             for b, s in enumerate(sizes)]
    results = _map(_iid_block, tasks, jobs)
    out = []
    nb = len(sizes)
    for p, mu1 in enumerate(cfg.gap_grid):
        chunk = results[p * nb:(p + 1) * nb]
        target = float(cfg.point_means(mu1).max())
        values = {s.name: np.concatenate([c[i] for c in chunk]) for i, s in enumerate(specs)}
        rows = [compute_metrics(name, v, target) for name, v in values.items()]
        out.append(SweepPoint(float(mu1), target, rows, values if keep_values else {}))
    return out


# ---------------------------------------------------------------------------
# AR(1) non-iid study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArConfig:
    rho: float = 0.0
    tau: float = 0.1
    horizon: int = 100
    mu: tuple = (1.0, 0.0)
    sigma_sq: float = 100.0
    runs: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0):
            raise ValueError("rho must lie in [0, 1]")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.sigma_sq < 0:
            raise ValueError("sigma_sq must be non-negative")


def _ar_paths(mu, rho, tau, sigma_sq, horizon, runs, rng, keep_paths=False):
    """Simulate X_t and its exponentially weighted mean for t = 0..horizon.

    Returns the final mean estimates, the sample variance of each mean path
    and, when requested, the full paths of shape ``(runs, horizon+1, M)``.
    """
    mu = np.asarray(mu, float)
    m = mu.size
    innov_sd = math.sqrt(max(1.0 - rho * rho, 0.0) * sigma_sq)
    x = np.broadcast_to(mu, (runs, m)).copy()
    mu_hat = x.copy()
    # Welford over the mu_hat path
    count = 1
    path_mean = mu_hat.copy()
    path_m2 = np.zeros((runs, m))
    xs = [x.copy()] if keep_paths else None
    hs = [mu_hat.copy()] if keep_paths else None
    for _ in range(horizon):
        eps = innov_sd * rng.standard_normal((runs, m)) if innov_sd > 0 else 0.0
        x = (1.0 - rho) * mu + rho * x + eps
        mu_hat = mu_hat + tau * (x - mu_hat)
        count += 1
        delta = mu_hat - path_mean
        path_mean += delta / count
        path_m2 += delta * (mu_hat - path_mean)
        if keep_paths:
            xs.append(x.copy())
            hs.append(mu_hat.copy())
    path_var = path_m2 / (count - 1)
    if keep_paths:
        return mu_hat, path_var, np.stack(xs, axis=1), np.stack(hs, axis=1)
    return mu_hat, path_var


def simulate_ar_pair(cfg: ArConfig, run_seed) -> tuple[np.ndarray, np.ndarray]:
    """One realisation: ``X`` and ``mu_hat`` paths, each of shape ``(T+1, M)``."""
    rng = np.random.default_rng(run_seed)
    _, _, xs, hs = _ar_paths(cfg.mu, cfg.rho, cfg.tau, cfg.sigma_sq, cfg.horizon, 1, rng,
                             keep_paths=True)
    return xs[0], hs[0]


DEFAULT_NONIID_ESTIMATORS = ("me", "de", "te:0.1", "ke:gauss:1")


def _noniid_block(task):
    cfg, specs, block, size = task
    rng = _stream(cfg.seed, block)
    final, path_var = _ar_paths(cfg.mu, cfg.rho, cfg.tau, cfg.sigma_sq, cfg.horizon, size, rng)
    half = max(cfg.horizon // 2, 1)
    sel, _ = _ar_paths(cfg.mu, cfg.rho, cfg.tau, cfg.sigma_sq, half, size, rng)
    evl, _ = _ar_paths(cfg.mu, cfg.rho, cfg.tau, cfg.sigma_sq, half, size, rng)
    batch = SummaryBatch(final, path_var, np.ones_like(final), sel, evl)
    return [apply_estimator(s, batch, rng) for s in specs]


def run_noniid_experiment(cfg: ArConfig, estimators: Sequence = DEFAULT_NONIID_ESTIMATORS,
                          jobs: int = 1, with_kde: bool = True):
    """Returns ``(values, rows, kdes)`` keyed by estimator name.

    The double estimator selects on one half-horizon mean process and
    evaluates on an independent second one.
    """
    specs = parse_estimators(estimators)
    tasks = [(cfg, specs, b, s) for b, s in enumerate(_block_sizes(cfg.runs))]
    results = _map(_noniid_block, tasks, jobs)
    target = float(np.max(cfg.mu))
    values = {s.name: np.concatenate([r[i] for r in results]) for i, s in enumerate(specs)}
    rows = [compute_metrics(k, v, target) for k, v in values.items()]
    kdes = {k: gaussian_kde(v) for k, v in values.items()} if with_kde else {}
    return values, rows, kdes


def silverman_bandwidth(values) -> float:
    x = np.asarray(values, float)
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * x.size ** (-0.2)


def gaussian_kde(values, bandwidth: float | None = None, grid_points: int = 512):
    """Gaussian kernel density on an even grid spanning the data +- 3 bandwidths."""
    x = np.asarray(values, float).ravel()
    if x.size < 2:
        raise ValueError("kernel density needs at least 2 values")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    h = max(h, 1e-9)
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid_points)
    dens = np.zeros(grid_points)
    chunk = max(1, 2_000_000 // grid_points)
    for start in range(0, x.size, chunk):
        z = (grid[:, None] - x[None, start:start + chunk]) / h
        dens += np.exp(-0.5 * z * z).sum(axis=1)
    dens /= x.size * h * math.sqrt(2 * math.pi)
    return grid, dens


# ---------------------------------------------------------------------------
# internet ads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdsConfig:
    n_customers: int = 1000
    n_ads: int = 5
    hi: float = 0.05
    lo: float = 0.02
    runs: int = 2000
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.lo <= self.hi < 1.0):
            raise ValueError("need 0 < lo <= hi < 1")
        if self.n_ads < 2:
            raise ValueError("need at least two ads")
        if self.per_ad < 2:
            raise ValueError("floor(N/M) must be >= 2 so that variances exist")

    @property
    def per_ad(self) -> int:
        return self.n_customers // self.n_ads

    @property
    def true_means(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_ads)


def default_ads_grid(runs: int = 2000, seed: int = 0) -> list[AdsConfig]:
    """Six configurations: two customer counts for each of three (M, hi) panels."""
    panels = [(5, 0.05), (10, 0.05), (5, 0.1)]
    return [AdsConfig(n, m, hi, runs=runs, seed=seed)
            for m, hi in panels for n in (1000, 10000)]


DEFAULT_ADS_ESTIMATORS = ("me", "cve", "we", "te:0.1", "ke:gauss:1")


def sample_bernoulli_summaries(ps, n: int, runs: int, rng) -> SummaryBatch:
    ps = np.asarray(ps, float)
    na = (n + 1) // 2
    nb = n - na
    ka = rng.binomial(na, ps, (runs, ps.size))
    kb = rng.binomial(nb, ps, (runs, ps.size))
    k = ka + kb
    means = k / n
    variances = k * (n - k) / (n * (n - 1.0))
    counts = np.full(means.shape, float(n))
    return SummaryBatch(means, variances, counts, ka / na, kb / nb)


def _ads_block(task):
    cfg, specs, block, size = task
    rng = _stream(cfg.seed, block)
    batch = sample_bernoulli_summaries(cfg.true_means, cfg.per_ad, size, rng)
    return [apply_estimator(s, batch, rng) for s in specs]


def run_internet_ads(cfg: AdsConfig, estimators: Sequence = DEFAULT_ADS_ESTIMATORS,
                     jobs: int = 1) -> list[MetricsRow]:
    specs = parse_estimators(estimators)
    tasks = [(cfg, specs, b, s) for b, s in enumerate(_block_sizes(cfg.runs))]
    results = _map(_ads_block, tasks, jobs)
    target = float(cfg.true_means.max())
    return [compute_metrics(s.name, np.concatenate([r[i] for r in results]), target)
            for i, s in enumerate(specs)]


__all__ = [
    "SummaryBatch",
    "EstimatorSpec",
    "MetricsRow",
    "IidSweepConfig",
    "ArConfig",
    "AdsConfig",
    "parse_estimator",
    "sample_gaussian_summaries",
    "sample_bernoulli_summaries",
    "compute_metrics",
    "run_iid_sweep",
    "simulate_ar_pair",
    "run_noniid_experiment",
    "gaussian_kde",
    "silverman_bandwidth",
    "run_internet_ads",
    "default_ads_grid",
]
