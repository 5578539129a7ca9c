"""Decoding the BS agent's raw action into a feasible beamforming matrix.

Pipeline: real action vector -> Kronecker factors -> raw beam matrix ->
QR orthonormalization -> per-beam amplitudes from diag(R) -> rescale to the
transmit-power budget. Each stage can be bypassed for the ablations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .channel import BeamformingMatrix

log = logging.getLogger(__name__)

RANK_TOL = 1e-12
DEFICIENT_R = 1e-12


@dataclass
class KroneckerFactors:
    """``u[k, j]`` (length Mx) and ``v[k, j]`` (length My) for beam k, term j."""

    u: np.ndarray  # (beams, rank, Mx) complex
    v: np.ndarray  # (beams, rank, My) complex

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    @property
    def n_real_params(self) -> int:
        beams, r, mx = self.u.shape
        return 2 * r * (mx + self.v.shape[2]) * beams

    @classmethod
    def from_action(cls, raw, mx: int, my: int, beams: int, rank: int) -> "KroneckerFactors":
        raw = np.asarray(raw, float)
        expected = 2 * rank * (mx + my) * beams
        if raw.size != expected:
            raise ValueError(f"expected {expected} action entries, got {raw.size}")
        a = raw.reshape(beams, rank, 2, mx + my)
        z = a[:, :, 0, :] + 1j * a[:, :, 1, :]
        return cls(z[..., :mx], z[..., mx:])


@dataclass
class QrFactors:
    Q: np.ndarray
    R: np.ndarray


def kron_reconstruct(f: KroneckerFactors) -> np.ndarray:
    """Column k is ``sum_j u[k, j] (x) v[k, j]``."""
    if f.u.shape[:2] != f.v.shape[:2]:
        raise ValueError("factor shapes disagree")
    beams, _, mx = f.u.shape
    my = f.v.shape[2]
    cols = np.einsum("kjp,kjq->kpq", f.u, f.v).reshape(beams, mx * my)
    return cols.T


def qr_orthonormalize(W_raw, rng: np.random.Generator | None = None) -> QrFactors:
    """Reduced QR with a non-negative real diagonal on R.

    Rank-deficient columns get a random direction orthogonal to the others and
    ``R_kk = DEFICIENT_R``.
    """
    W = np.asarray(W_raw, complex)
    m, k = W.shape
    if k > m:
        raise ValueError(f"cannot orthonormalize {k} beams with {m} antennas")
    Q, R = np.linalg.qr(W)
    d = np.diag(R).copy()
    mag = np.abs(d)
    phase = np.where(mag > 0, d / np.where(mag > 0, mag, 1.0), 1.0)
    Q = Q * phase
    R = phase.conj()[:, None] * R
    scale = max(float(np.max(np.abs(W))), 1.0)
    if np.any(np.abs(np.diag(R)) <= RANK_TOL * scale):
        Q, R = _gram_schmidt_fill(W, RANK_TOL * scale, rng or np.random.default_rng(0))
    R = np.triu(R)
    R[np.diag_indices(k)] = np.abs(np.diag(R))
    return QrFactors(Q, R)


def _gram_schmidt_fill(W: np.ndarray, tol: float, rng: np.random.Generator):
    m, k = W.shape
    Q = np.zeros((m, k), complex)
    R = np.zeros((k, k), complex)
    for c in range(k):
        z = W[:, c].copy()
        for _ in range(2):
            coef = Q[:, :c].conj().T @ z
            R[:c, c] += coef
            z -= Q[:, :c] @ coef
        nz = np.linalg.norm(z)
        if nz > tol:
            Q[:, c] = z / nz
            R[c, c] = nz
            continue
        log.info("rank-deficient beam matrix: replacing column %d", c)
        for _ in range(16):
            z = rng.standard_normal(m) + 1j * rng.standard_normal(m)
            z -= Q[:, :c] @ (Q[:, :c].conj().T @ z)
            nz = np.linalg.norm(z)
            if nz > 1e-8:
                break
        Q[:, c] = z / nz
        R[c, c] = DEFICIENT_R
    return Q, R


def power_normalize(W, power: float) -> np.ndarray:
    W = np.asarray(W, complex)
    norm = np.linalg.norm(W)
    if norm == 0.0:
        W = np.ones_like(W)
        norm = np.linalg.norm(W)
    return W * (np.sqrt(power) / norm)


def assemble_beams(qr: QrFactors, power: float) -> BeamformingMatrix:
    """Beam k = ``Q[:, k] * |R_kk|``, then a global rescale to ``power``."""
    amp = np.abs(np.diag(qr.R))
    if not np.any(amp > 0):
        amp = np.ones_like(amp)
    W = qr.Q * amp
    return BeamformingMatrix(power_normalize(W, power), power)


def raw_matrix_from_action(raw, m: int, beams: int) -> np.ndarray:
    raw = np.asarray(raw, float)
    if raw.size != 2 * m * beams:
        raise ValueError(f"expected {2 * m * beams} action entries, got {raw.size}")
    a = raw.reshape(2, m, beams)
    return a[0] + 1j * a[1]


def decode_bs_action(raw, mx: int, my: int, n_uavs: int, power: float, *, kron: bool = True,
                     rank: int = 2, qr: bool = True, rng=None) -> BeamformingMatrix:
    """Map a raw BS action to beams (column 0 = sensing, n = UAV n).

    Orthonormalization runs in the order ``[w_1 .. w_N, w_0]`` so the sensing
    beam is the last one Gram-Schmidt touches.
    """
    beams = n_uavs + 1
    if kron:
        W_raw = kron_reconstruct(KroneckerFactors.from_action(raw, mx, my, beams, rank))
    else:
        W_raw = raw_matrix_from_action(raw, mx * my, beams)
    if not qr:
        return BeamformingMatrix(power_normalize(W_raw, power), power)
    order = list(range(1, beams)) + [0]
    f = qr_orthonormalize(W_raw[:, order], rng)
    B = assemble_beams(f, power)
    W = np.empty_like(B.w)
    W[:, order] = B.w
    return BeamformingMatrix(W, power)
