"""Per-sensor Cramér-Rao bounds, covariance-intersection fusion and the
measurement-noise covariance they induce."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NonInformativeSensor(ValueError):
    pass


@dataclass(frozen=True)
class CrbConstants:
    kappa_d: float
    kappa_theta: float
    kappa_phi: float
    kappa_v: float
    bandwidth: float

    def __post_init__(self) -> None:
        if min(self.kappa_d, self.kappa_theta, self.kappa_phi, self.kappa_v, self.bandwidth) <= 0:
            raise ValueError("CRB constants must be positive")

    @classmethod
    def from_kappa(cls, kappa, bandwidth: float) -> "CrbConstants":
        return cls(*[float(k) for k in kappa], bandwidth=float(bandwidth))

    def scale(self) -> np.ndarray:
        return np.array([self.kappa_d / self.bandwidth, self.kappa_theta, self.kappa_phi, self.kappa_v])


@dataclass(frozen=True)
class CrbVector:
    """Variance bounds on (range, polar angle, azimuth, radial velocity)."""

    var_d: float
    var_theta: float
    var_phi: float
    var_v: float

    def __post_init__(self) -> None:
        a = self.as_array()
        if not (np.all(np.isfinite(a)) and np.all(a > 0)):
            raise ValueError(f"CRB components must be positive and finite, got {a}")

    def as_array(self) -> np.ndarray:
        return np.array([self.var_d, self.var_theta, self.var_phi, self.var_v], dtype=float)

    @classmethod
    def from_array(cls, a) -> "CrbVector":
        return cls(*[float(x) for x in a])


@dataclass(frozen=True)
class FusionWeights:
    omega: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.omega, dtype=float)
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValueError(f"fusion weights must be non-negative and sum to 1, got {w}")
        object.__setattr__(self, "omega", w)

    @classmethod
    def metropolis(cls, n_uavs: int) -> "FusionWeights":
        return cls(np.full(n_uavs + 1, 1.0 / (n_uavs + 1)))

    @classmethod
    def bs_only(cls, n_uavs: int) -> "FusionWeights":
        w = np.zeros(n_uavs + 1)
        w[0] = 1.0
        return cls(w)


def crb_from_sinr(sinr: float, consts: CrbConstants, linear: bool = False) -> CrbVector:
    """CRBs with the squared SINR in the denominator; ``linear=True`` uses SINR^1."""
    if not sinr > 0:
        raise NonInformativeSensor("non-informative sensor")
    denom = sinr if linear else sinr**2
    return CrbVector.from_array(consts.scale() / denom)


def crb_or_cap(sinr: float, consts: CrbConstants, cap: float, linear: bool = False) -> CrbVector:
    """:func:`crb_from_sinr` with every component clipped to ``cap``.

    A beam null (SINR 0) or a vanishing SINR yields ``cap`` instead of an
    unbounded variance.
    """
    if not sinr > 0:
        return CrbVector(cap, cap, cap, cap)
    denom = sinr if linear else sinr**2
    return CrbVector.from_array(np.minimum(consts.scale() / denom, cap))


def ci_fuse(crbs: list[CrbVector], w: FusionWeights) -> CrbVector:
    """Per-component covariance intersection: ``(sum_n w_n / var_n)^-1``."""
    if len(crbs) != len(w.omega):
        raise ValueError(f"{len(crbs)} CRBs for {len(w.omega)} weights")
    v = np.array([c.as_array() for c in crbs])
    if np.any(v <= 0):
        raise ValueError("variances must be positive")
    info = w.omega @ (1.0 / v)
    return CrbVector.from_array(1.0 / info)


def measurement_covariance(fused: CrbVector) -> np.ndarray:
    return np.diag(fused.as_array())
