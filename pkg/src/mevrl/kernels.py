"""Weighting kernels for the K-Estimator.

A kernel maps a non-positive test statistic ``T`` to a non-negative weight.
Every kernel here is non-decreasing on ``(-inf, 0]``, positive at zero and
vanishes as ``T -> -inf``.  Kernels are vectorised: ``kernel(t)`` accepts
scalars or arrays and returns float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Base class; subclasses implement ``_eval`` on clamped inputs."""

    name: str = field(init=False, default="kernel")

    def __call__(self, t):
        t = np.minimum(np.asarray(t, dtype=float), 0.0)
        out = self._eval(t)
        return out if out.ndim else float(out)

    def _eval(self, t: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    @property
    def at_zero(self) -> float:
        return float(self(0.0))

    def breakpoints(self) -> tuple[float, ...]:
        """Locations in T where the kernel is discontinuous or kinked."""
        return ()

    def label(self) -> str:
        return self.name


@dataclass(frozen=True)
class IndicatorAlpha(KernelSpec):
    """``1{T >= z_alpha}``; turns the K-Estimator into the T-Estimator."""

    alpha: float = 0.05
    name: str = field(init=False, default="indicator")

    def __post_init__(self):
        if not (0.0 < self.alpha <= 0.5):
            raise KernelError("alpha must lie in (0, 0.5]")

    @property
    def z(self) -> float:
        return float(special.ndtri(self.alpha))

    def _eval(self, t):
        return (t >= self.z).astype(float)

    def breakpoints(self):
        return (self.z,)

    def label(self):
        return f"te({self.alpha:g})"


@dataclass(frozen=True)
class GaussianCdf(KernelSpec):
    lam: float = 1.0
    name: str = field(init=False, default="gauss")

    def __post_init__(self):
        if not self.lam > 0:
            raise KernelError("lambda must be positive")

    def _eval(self, t):
        return special.ndtr(t / self.lam)

    def label(self):
        return f"ke-gauss({self.lam:g})"


@dataclass(frozen=True)
class StudentTCdf(KernelSpec):
    nu: float = 1.0
    name: str = field(init=False, default="student-t")

    def __post_init__(self):
        if not self.nu > 0:
            raise KernelError("nu must be positive")

    def _eval(self, t):
        return np.asarray(stats.t.cdf(t, self.nu), dtype=float)

    def label(self):
        return f"ke-t({self.nu:g})"


@dataclass(frozen=True)
class Epanechnikov(KernelSpec):
    name: str = field(init=False, default="epanechnikov")

    def _eval(self, t):
        return np.where(np.abs(t) <= 1.0, 0.75 * (1.0 - t * t), 0.0)

    def breakpoints(self):
        return (-1.0,)

    def label(self):
        return "ke-epanechnikov"


@dataclass(frozen=True)
class Laplace(KernelSpec):
    name: str = field(init=False, default="laplace")

    def _eval(self, t):
        return 0.5 * np.exp(-np.abs(t))

    def label(self):
        return "ke-laplace"


@dataclass(frozen=True)
class Triangle(KernelSpec):
    name: str = field(init=False, default="triangle")

    def _eval(self, t):
        return np.where(np.abs(t) <= 1.0, 1.0 - np.abs(t), 0.0)

    def breakpoints(self):
        return (-1.0,)

    def label(self):
        return "ke-triangle"


@dataclass(frozen=True)
class ShiftedBetaCdf(KernelSpec):
    """Beta(a, b) cdf stretched affinely from [0, 1] onto [lo, 0]."""

    a: float = 2.0
    b: float = 0.5
    lo: float = -5.0
    name: str = field(init=False, default="beta")

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise KernelError("beta shape parameters must be positive")
        if not self.lo < 0:
            raise KernelError("lower support edge must be negative")

    def _eval(self, t):
        u = np.clip((t - self.lo) / (0.0 - self.lo), 0.0, 1.0)
        return special.betainc(self.a, self.b, u)

    def breakpoints(self):
        return (self.lo,)

    def label(self):
        return f"ke-beta({self.a:g},{self.b:g})"


def parse_kernel(text: str) -> KernelSpec:
    """Parse ``te:0.05``, ``gauss:1``, ``t:3``, ``beta:2,0.5``, ``epanechnikov``, ..."""
    name, _, arg = text.strip().lower().partition(":")
    try:
        if name in ("te", "indicator"):
            return IndicatorAlpha(float(arg or 0.05))
        if name in ("gauss", "gaussian", "phi"):
            return GaussianCdf(float(arg or 1.0))
        if name in ("t", "student-t", "studentt"):
            return StudentTCdf(float(arg or 1.0))
        if name in ("epanechnikov", "epa"):
            return Epanechnikov()
        if name == "laplace":
            return Laplace()
        if name == "triangle":
            return Triangle()
        if name == "beta":
            parts = [float(p) for p in arg.split(",")] if arg else [2.0, 0.5]
            return ShiftedBetaCdf(*parts)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, KernelError):
            raise
        raise KernelError(f"bad kernel parameters in {text!r}") from exc
    raise KernelError(f"unknown kernel {text!r}")


def z_quantile(alpha: float) -> float:
    return float(special.ndtri(alpha))


__all__ = [
    "KernelSpec",
    "KernelError",
    "IndicatorAlpha",
    "GaussianCdf",
    "StudentTCdf",
    "Epanechnikov",
    "Laplace",
    "Triangle",
    "ShiftedBetaCdf",
    "parse_kernel",
    "z_quantile",
]

