"""Target kinematics, the spherical measurement model, the posterior Fisher
information recursion and the extended Kalman filter.

State layout is ``[x, y, z, vx, vy, vz]``; measurements are
``[range, polar angle, azimuth, radial velocity]`` seen from the BS.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

JITTER = 1e-9
AZIMUTH_NUDGE = 1e-6


class SingularGeometry(ValueError):
    pass


@dataclass(frozen=True)
class MotionModel:
    T: float
    sigma2: float

    @property
    def F(self) -> np.ndarray:
        return np.kron(np.array([[1.0, self.T], [0.0, 1.0]]), np.eye(3))

    @property
    def Phi(self) -> np.ndarray:
        T = self.T
        block = np.array([[T**3 / 3.0, T**2 / 2.0], [T**2 / 2.0, T]])
        return np.kron(block, self.sigma2 * np.eye(3))


@dataclass(frozen=True)
class SphericalMeasurement:
    d: float
    theta: float
    phi: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.theta, self.phi, self.v])


@dataclass
class FisherState:
    J: np.ndarray
    pcrb: np.ndarray
    rho: float
    est: np.ndarray
    M: np.ndarray
    K: np.ndarray | None = None
    H: np.ndarray | None = None

    @classmethod
    def initial(cls, est, m0_diag) -> "FisherState":
        M0 = np.diag(np.asarray(m0_diag, dtype=float))
        J0 = np.linalg.inv(M0)
        return cls(J=J0, pcrb=M0.copy(), rho=float(np.trace(M0)), est=np.asarray(est, float).copy(), M=M0.copy())


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def spd_inverse(A: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix; jitters once if needed."""
    A = symmetrize(A)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        scale = max(float(np.max(np.abs(np.diag(A)))), 1.0)
        A = A + JITTER * scale * np.eye(A.shape[0])
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("matrix is not positive definite even after jitter") from exc
        log.debug("applied jitter before inversion")
    Linv = np.linalg.inv(L)
    return symmetrize(Linv.T @ Linv)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, float) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def propagate_truth(state, model: MotionModel, accel, rng=None, noise_scale: float = 1.0) -> np.ndarray:
    """Constant-acceleration truth step; noise is drawn with covariance
    ``noise_scale * Phi`` when an rng is given."""
    state = np.asarray(state, float)
    a = np.asarray(accel, float)
    T = model.T
    out = model.F @ state + np.concatenate([0.5 * a * T**2, a * T])
    if rng is not None and noise_scale > 0:
        L = np.linalg.cholesky(noise_scale * model.Phi)
        out = out + L @ rng.standard_normal(6)
    return out


def h_measure(state) -> SphericalMeasurement:
    x, y, z, vx, vy, vz = np.asarray(state, float)
    d = float(np.sqrt(x * x + y * y + z * z))
    if d == 0.0:
        raise SingularGeometry("singular range")
    theta = float(np.arccos(np.clip(z / d, -1.0, 1.0)))
    phi = float(np.arctan2(y, x))
    v = (vx * x + vy * y + vz * z) / d
    return SphericalMeasurement(d, theta, phi, float(v))


def h_jacobian(state) -> np.ndarray:
    """Analytic 4x6 Jacobian of :func:`h_measure`."""
    x, y, z, vx, vy, vz = np.asarray(state, float)
    r2 = x * x + y * y
    if r2 == 0.0:
        raise SingularGeometry("azimuth singularity")
    d2 = r2 + z * z
    d = np.sqrt(d2)
    r = np.sqrt(r2)
    p = np.array([x, y, z])
    vel = np.array([vx, vy, vz])
    H = np.zeros((4, 6))
    H[0, :3] = p / d
    H[1, :3] = [x * z / (d2 * r), y * z / (d2 * r), -r / d2]
    H[2, :3] = [-y / r2, x / r2, 0.0]
    H[3, :3] = vel / d - (p @ vel) * p / d**3
    H[3, 3:] = p / d
    return H


def safe_jacobian(state) -> np.ndarray:
    s = np.array(state, float)
    if s[0] == 0.0 and s[1] == 0.0:
        s[0] = AZIMUTH_NUDGE
    return h_jacobian(s)


def fim_update(prev: FisherState, model: MotionModel, H: np.ndarray, Psi_hat: np.ndarray, literal: bool = False) -> FisherState:
    """One step of the posterior FIM recursion.

    The data term is ``H^T Psi^-1 H``; ``literal=True`` uses ``H^T Psi H``.
    """
    F = model.F
    prior_cov = model.Phi + F @ spd_inverse(prev.J) @ F.T
    J_P = spd_inverse(prior_cov)
    Psi = np.asarray(Psi_hat, float)
    if literal:
        weight = Psi
    elif np.array_equal(Psi, np.diag(np.diag(Psi))):
        weight = np.diag(1.0 / np.diag(Psi))
    else:
        weight = spd_inverse(Psi)
    J_D = H.T @ weight @ H
    J = symmetrize(J_P + J_D)
    pcrb = spd_inverse(J)
    return FisherState(J=J, pcrb=pcrb, rho=float(np.trace(pcrb)), est=prev.est, M=prev.M, K=prev.K, H=H)


def ekf_predict(est, M, model: MotionModel) -> tuple[np.ndarray, np.ndarray]:
    F = model.F
    return F @ np.asarray(est, float), symmetrize(F @ M @ F.T + model.Phi)


def ekf_step(prev_est, prev_M, model: MotionModel, y, Psi_hat: np.ndarray, H: np.ndarray | None = None):
    """Predict/update cycle. Returns ``(est, M, K, H)``.

    ``H`` defaults to the Jacobian at the predicted state. Angle innovations
    are wrapped into (-pi, pi].
    """
    pred, M_pred = ekf_predict(prev_est, prev_M, model)
    if H is None:
        H = safe_jacobian(pred)
    y = y.as_array() if isinstance(y, SphericalMeasurement) else np.asarray(y, float)
    innov = y - h_measure(pred).as_array()
    innov[1:3] = wrap_angle(innov[1:3])
    S = symmetrize(np.asarray(Psi_hat, float) + H @ M_pred @ H.T)
    K = M_pred @ H.T @ spd_inverse(S)
    est = pred + K @ innov
    M = symmetrize((np.eye(6) - K @ H) @ M_pred)
    return est, M, K, H
