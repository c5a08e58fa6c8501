"""Quadrature oracles for the two-Gaussian MEV problem.

Everything here assumes ``X_i ~ N(mu_i, sigma^2)`` with known common variance
and sample sizes ``n_i``, so that the sample means are exactly Gaussian with
variances ``sigma^2 / n_i``.  The module provides the closed form for the
Maximum Estimator, the integral forms for the double / cross-validation
estimator and the K-Estimator (T-Estimator included via the indicator
kernel), and a search for bias-minimising kernel parameters.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .estimators import SampleSummary, as_arrays
from .kernels import GaussianCdf, IndicatorAlpha, KernelSpec, ShiftedBetaCdf

TRUNCATION_SDS = 8.0
_SQRT2PI = math.sqrt(2.0 * math.pi)


class QuadratureError(RuntimeError):
    def __init__(self, message, estimate=float("nan"), error=float("nan")):
        super().__init__(f"{message} (best estimate {estimate!r}, error {error!r})")
        self.estimate = estimate
        self.error = error


@dataclass(frozen=True)
class TwoGaussianConfig:
    mu1: float = 0.0
    mu2: float = 0.0
    sigma_sq: float = 100.0
    n1: int = 100
    n2: int = 100

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be positive")
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError("sample sizes must be positive")

    @property
    def v1(self) -> float:
        return self.sigma_sq / self.n1

    @property
    def v2(self) -> float:
        return self.sigma_sq / self.n2

    @property
    def theta(self) -> float:
        return math.sqrt(self.v1 + self.v2)

    @property
    def mev(self) -> float:
        return max(self.mu1, self.mu2)

    def with_gap(self, gap: float) -> "TwoGaussianConfig":
        return replace(self, mu1=self.mu2 + gap)


@dataclass(frozen=True)
class MomentPair:
    expectation: float
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            if self.variance > -1e-12:
                object.__setattr__(self, "variance", 0.0)
            else:
                raise ValueError("variance must be non-negative")


def _npdf(x, mu, sd):
    z = (x - mu) / sd
    return np.exp(-0.5 * z * z) / (sd * _SQRT2PI)


def integrate_1d(f: Callable[[float], float], lower: float, upper: float,
                 tolerance: float = 1e-10, center: float | None = None,
                 scale: float | None = None, points: Sequence[float] = (),
                 limit: int = 500) -> float:
    """Adaptive Gauss-Kronrod quadrature with an absolute error target.

    Infinite limits are truncated to ``center +- 8 * scale`` when a scale is
    given (the Gaussian tail beyond is below 1e-15); otherwise they are left
    to the library's variable transformation.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    if scale is not None:
        c = 0.0 if center is None else center
        lower = max(lower, c - TRUNCATION_SDS * scale)
        upper = min(upper, c + TRUNCATION_SDS * scale)
    if upper <= lower:
        return 0.0
    finite = math.isfinite(lower) and math.isfinite(upper)
    pts = sorted(p for p in points if lower < p < upper) if finite else []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        out = integrate.quad(f, lower, upper, epsabs=tolerance, epsrel=0.0,
                             limit=limit, points=pts or None, full_output=1)
    value, err = out[0], out[1]
    if len(out) > 3 and err > tolerance:
        raise QuadratureError(f"quadrature did not converge: {out[3]}", value, err)
    return float(value)


# ---------------------------------------------------------------------------
# Maximum / average estimators
# ---------------------------------------------------------------------------

def me_moments_two_gaussians(cfg: TwoGaussianConfig) -> MomentPair:
    th = cfg.theta
    d = (cfg.mu1 - cfg.mu2) / th
    p1, p2 = ndtr(d), ndtr(-d)
    dens = math.exp(-0.5 * d * d) / _SQRT2PI
    first = cfg.mu1 * p1 + cfg.mu2 * p2 + th * dens
    second = ((cfg.v1 + cfg.mu1 ** 2) * p1 + (cfg.v2 + cfg.mu2 ** 2) * p2
              + (cfg.mu1 + cfg.mu2) * th * dens)
    return MomentPair(float(first), float(second - first * first))


def ae_moments_two_gaussians(cfg: TwoGaussianConfig) -> MomentPair:
    return MomentPair(0.5 * (cfg.mu1 + cfg.mu2), 0.25 * (cfg.v1 + cfg.v2))


def me_expectation_quadrature(means, mean_sds, tolerance=1e-10) -> float:
    """``sum_i int x f_i(x) prod_{j != i} F_j(x) dx`` for independent Gaussians."""
    means = np.asarray(means, float)
    sds = np.asarray(mean_sds, float)
    total = 0.0
    for i in range(means.size):
        others = [j for j in range(means.size) if j != i]

        def f(x, i=i, others=others):
            return x * _npdf(x, means[i], sds[i]) * np.prod(
                [ndtr((x - means[j]) / sds[j]) for j in others])

        total += integrate_1d(f, -np.inf, np.inf, tolerance, means[i], sds[i])
    return total


# ---------------------------------------------------------------------------
# Double / cross-validation estimator
# ---------------------------------------------------------------------------

def selection_probabilities(means, mean_sds, tolerance=1e-11) -> np.ndarray:
    """``P(i = argmax)`` for independent Gaussian means (point masses allowed)."""
    means = np.asarray(means, float)
    sds = np.asarray(mean_sds, float)
    m = means.size
    probs = np.zeros(m)

    def cdf(j, x):
        if sds[j] == 0:
            return float(x >= means[j])
        return float(ndtr((x - means[j]) / sds[j]))

    for i in range(m):
        others = [j for j in range(m) if j != i]
        if sds[i] == 0:
            probs[i] = np.prod([cdf(j, means[i]) for j in others])
            continue
        pts = [means[j] for j in others if sds[j] == 0]

        def f(x, i=i, others=others):
            return _npdf(x, means[i], sds[i]) * np.prod([cdf(j, x) for j in others])

        probs[i] = integrate_1d(f, -np.inf, np.inf, tolerance, means[i], sds[i], points=pts)
    return probs


def de_expectation(selection_means, selection_sds, evaluation_means=None) -> float:
    """Expectation of the double estimator: evaluation mean times selection probability."""
    probs = selection_probabilities(selection_means, selection_sds)
    ev = np.asarray(selection_means if evaluation_means is None else evaluation_means, float)
    return float(np.dot(probs, ev))


def cve_moments_two_gaussians(cfg: TwoGaussianConfig, tolerance=1e-11) -> MomentPair:
    """Moments of the 2-fold cross-validation estimator with an even split."""
    h1, h2 = max(cfg.n1 // 2, 1), max(cfg.n2 // 2, 1)
    va1, va2 = cfg.sigma_sq / h1, cfg.sigma_sq / h2
    s1, s2 = math.sqrt(va1), math.sqrt(va2)
    mu1, mu2 = cfg.mu1, cfg.mu2

    def f1F2(x):
        return _npdf(x, mu1, s1) * ndtr((x - mu2) / s2)

    def f2F1(x):
        return _npdf(x, mu2, s2) * ndtr((x - mu1) / s1)

    p1 = integrate_1d(f1F2, -np.inf, np.inf, tolerance, mu1, s1)
    p2 = integrate_1d(f2F1, -np.inf, np.inf, tolerance, mu2, s2)
    mean_de = mu1 * p1 + mu2 * p2
    second_de = (va1 + mu1 ** 2) * p1 + (va2 + mu2 ** 2) * p2
    var_de = second_de - mean_de ** 2

    x_f1F2 = integrate_1d(lambda x: x * f1F2(x), -np.inf, np.inf, tolerance, mu1, s1)
    i1 = mu1 - x_f1F2
    i2 = integrate_1d(lambda x: x * f2F1(x), -np.inf, np.inf, tolerance, mu2, s2)
    cross = mu1 ** 2 + 2.0 * i1 * (mu2 - mu1) + (i1 - i2) ** 2
    cov = cross - mean_de ** 2
    return MomentPair(float(mean_de), float(0.5 * var_de + 0.5 * cov))


# ---------------------------------------------------------------------------
# K-Estimator (T-Estimator via the indicator kernel)
# ---------------------------------------------------------------------------

def _gap_weight(kernel: KernelSpec, theta: float):
    k0 = kernel.at_zero

    def g(gap):
        kt = kernel(-abs(gap) / theta)
        return kt / (k0 + kt)

    return g


def _ke_nested(cfg: TwoGaussianConfig, kernel: KernelSpec, tolerance: float):
    th = cfg.theta
    s1, s2 = math.sqrt(cfg.v1), math.sqrt(cfg.v2)
    k0 = kernel.at_zero
    brk = kernel.breakpoints()
    lo1, hi1 = cfg.mu1 - TRUNCATION_SDS * s1, cfg.mu1 + TRUNCATION_SDS * s1
    lo2, hi2 = cfg.mu2 - TRUNCATION_SDS * s2, cfg.mu2 + TRUNCATION_SDS * s2
    inner_tol = tolerance * 0.1

    def value(champ, other):
        kt = kernel((other - champ) / th)
        return (k0 * champ + kt * other) / (k0 + kt)

    def region(power, champ_mu, champ_sd, other_mu, other_sd, lo_c, hi_c, lo_o):
        def inner(xc):
            if xc <= lo_o:
                return 0.0
            pts = [xc + b * th for b in brk]
            return integrate_1d(
                lambda xo: value(xc, xo) ** power * _npdf(xo, other_mu, other_sd),
                lo_o, xc, inner_tol, points=pts)

        return integrate_1d(lambda xc: _npdf(xc, champ_mu, champ_sd) * inner(xc),
                            lo_c, hi_c, tolerance, points=[lo_o])

    out = []
    for power in (1, 2):
        r1 = region(power, cfg.mu1, s1, cfg.mu2, s2, lo1, hi1, lo2)
        r2 = region(power, cfg.mu2, s2, cfg.mu1, s1, lo2, hi2, lo1)
        out.append(r1 + r2)
    return out[0], out[1]


def _ke_reduced(cfg: TwoGaussianConfig, kernel: KernelSpec, tolerance: float,
                second_moment=True):
    # value = S/2 + h(D) with S = X1 + X2, D = X1 - X2 and h(d) = |d|/2 - g(|d|)|d|
    th = cfg.theta
    delta = cfg.mu1 - cfg.mu2
    g = _gap_weight(kernel, th)
    pts = [0.0] + [s * b * th for b in kernel.breakpoints() for s in (-1.0, 1.0)]

    def h(d):
        a = abs(d)
        return 0.5 * a - g(a) * a

    def dens(d):
        return _npdf(d, delta, th)

    me = me_moments_two_gaussians(cfg)
    shrink = integrate_1d(lambda d: g(abs(d)) * abs(d) * dens(d), -np.inf, np.inf,
                          tolerance, delta, th, points=pts)
    first = me.expectation - shrink
    if not second_moment:
        return first, float("nan")
    m_s = cfg.mu1 + cfg.mu2
    slope = (cfg.v1 - cfg.v2) / (cfg.v1 + cfg.v2)
    e_sh = integrate_1d(lambda d: (m_s + slope * (d - delta)) * h(d) * dens(d),
                        -np.inf, np.inf, tolerance, delta, th, points=pts)
    e_hh = integrate_1d(lambda d: h(d) ** 2 * dens(d), -np.inf, np.inf,
                        tolerance, delta, th, points=pts)
    second = 0.25 * (cfg.v1 + cfg.v2 + m_s ** 2) + e_sh + e_hh
    return first, second


def ke_moments_two_gaussians(cfg: TwoGaussianConfig, spec: KernelSpec,
                             tolerance: float = 1e-9, method: str = "nested") -> MomentPair:
    """Expectation and variance of the K-Estimator with known variances.

    ``method="nested"`` integrates the two-region double integral directly;
    ``method="reduced"`` uses the exact one-dimensional form over the gap
    ``X1 - X2`` (much faster, used by the kernel fit).
    """
    if method == "nested":
        first, second = _ke_nested(cfg, spec, tolerance)
    elif method == "reduced":
        first, second = _ke_reduced(cfg, spec, tolerance)
    else:
        raise ValueError(f"unknown method {method!r}")
    return MomentPair(float(first), float(second - first * first))


def te_moments_two_gaussians(cfg: TwoGaussianConfig, alpha: float, **kw) -> MomentPair:
    return ke_moments_two_gaussians(cfg, IndicatorAlpha(alpha), **kw)


def ke_bias_two_gaussians(cfg: TwoGaussianConfig, spec: KernelSpec,
                          tolerance: float = 1e-10) -> float:
    first, _ = _ke_reduced(cfg, spec, tolerance, second_moment=False)
    return first - cfg.mev


# ---------------------------------------------------------------------------
# quadrature-backed weighted estimator
# ---------------------------------------------------------------------------

def we_quadrature(summaries: Sequence[SampleSummary]) -> float:
    """Weighted estimator with the max-probabilities integrated, not sampled."""
    means, variances, counts = as_arrays(summaries)
    probs = selection_probabilities(means, np.sqrt(variances / counts))
    return float(np.dot(probs / probs.sum(), means))


# ---------------------------------------------------------------------------
# bias / variance bounds
# ---------------------------------------------------------------------------

def me_bias_upper_bound(mean_variances) -> float:
    v = np.asarray(mean_variances, float)
    m = v.size
    return float(math.sqrt((m - 1) / m * v.sum()))


def ke_bias_lower_bound(mus, mean_variances) -> float:
    mus = np.asarray(mus, float)
    return 0.5 * (mus.min() - mus.max() - me_bias_upper_bound(mean_variances))


def variance_upper_bound(mean_variances) -> float:
    return float(np.sum(mean_variances))


# ---------------------------------------------------------------------------
# kernel-parameter search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelFit:
    spec: KernelSpec
    objective: float
    params: dict


def default_gap_grid(points: int = 51, hi: float = 5.0) -> np.ndarray:
    return np.linspace(0.0, hi, points)


def squared_bias_objective(spec: KernelSpec, gap_grid, cfg_base: TwoGaussianConfig) -> float:
    total = 0.0
    for g in gap_grid:
        cfg = cfg_base.with_gap(g)
        try:
            bias = ke_bias_two_gaussians(cfg, spec)
        except QuadratureError as exc:
            # steep beta shapes trip the roundoff detector well inside tolerance
            if not exc.error < 1e-6:
                raise
            bias = me_moments_two_gaussians(cfg).expectation - exc.estimate - cfg.mev
        total += bias * bias
    return float(total)


def golden_section(f, a: float, b: float, tol: float = 1e-5, max_iter: int = 200):
    """Minimise a unimodal ``f`` on ``[a, b]``; returns ``(x, f(x))``."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def _refine_1d(f, grid):
    values = [f(x) for x in grid]
    i = int(np.argmin(values))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    x, fx = golden_section(f, lo, hi, tol=1e-5 * max(1.0, abs(hi)))
    if values[i] < fx:
        return grid[i], values[i]
    return x, fx


def fit_min_bias_kernel(family: str, gap_grid=None, cfg_base: TwoGaussianConfig | None = None,
                        sweeps: int = 4) -> KernelFit:
    """Minimise the summed squared analytic bias over ``gap_grid``.

    ``family`` is ``"te"`` (significance level), ``"gauss"`` (cdf scale
    lambda) or ``"beta"`` (shape parameters of the shifted beta cdf on
    ``[-5, 0]``, fitted by coordinate descent).
    """
    gaps = default_gap_grid() if gap_grid is None else np.asarray(gap_grid, float)
    if gaps.size == 0 or not np.all(np.isfinite(gaps)):
        raise ValueError("gap grid must be non-empty and finite")
    cfg = TwoGaussianConfig() if cfg_base is None else cfg_base

    def obj(spec):
        return squared_bias_objective(spec, gaps, cfg)

    if family == "te":
        grid = np.linspace(0.01, 0.5, 50)
        x, fx = _refine_1d(lambda a: obj(IndicatorAlpha(float(min(max(a, 1e-6), 0.5)))), grid)
        return KernelFit(IndicatorAlpha(float(x)), fx, {"alpha": float(x)})
    if family == "gauss":
        grid = np.linspace(0.05, 4.0, 80)
        x, fx = _refine_1d(lambda l: obj(GaussianCdf(float(max(l, 1e-6)))), grid)
        return KernelFit(GaussianCdf(float(x)), fx, {"lambda": float(x)})
    if family == "beta":
        log_grid = np.linspace(math.log(0.05), math.log(50.0), 13)
        best = min(((obj(ShiftedBetaCdf(math.exp(la), math.exp(lb))), la, lb)
                    for la in log_grid for lb in log_grid))
        fx, la, lb = best
        step = log_grid[1] - log_grid[0]
        for _ in range(sweeps):
            u, fu = golden_section(lambda u: obj(ShiftedBetaCdf(math.exp(u), math.exp(lb))),
                                   la - step, la + step, tol=1e-3)
            if fu < fx:
                la, fx = u, fu
            u, fu = golden_section(lambda u: obj(ShiftedBetaCdf(math.exp(la), math.exp(u))),
                                   lb - step, lb + step, tol=1e-3)
            if fu < fx:
                lb, fx = u, fu
        spec = ShiftedBetaCdf(math.exp(la), math.exp(lb))
        return KernelFit(spec, fx, {"a": spec.a, "b": spec.b})
    raise ValueError(f"unknown kernel family {family!r}")
