"""BS/UAV channel models and the communication/sensing SINRs.

The BS carries an ``Mx x My`` uniform planar array; UAVs and the target are
point scatterers. Every SINR is computed from the beam projection matrix
``|a_p^H w_k|^2`` where ``p`` runs over the target (row 0) and the UAVs
(rows 1..N) and ``k`` over the beams (column 0 is the sensing beam).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import EnvConfig, db_to_linear, dbm_to_watts


class DegenerateGeometry(ValueError):
    pass


@dataclass(frozen=True)
class ArrayGeometry:
    mx: int
    my: int
    dx: float
    dy: float
    wavelength: float

    def __post_init__(self) -> None:
        if self.mx < 1 or self.my < 1:
            raise ValueError("antenna counts must be >= 1")
        if min(self.dx, self.dy, self.wavelength) <= 0:
            raise ValueError("spacings and wavelength must be positive")

    @property
    def m(self) -> int:
        return self.mx * self.my


@dataclass(frozen=True)
class ChannelParams:
    """Linear-unit channel constants (gains are power ratios, noises in watts)."""

    rician_k: float
    beta0_c: float
    beta0_s: float
    rcs_target: float
    rcs_uav: float
    sigma2_0: float
    sigma2_ubs: float
    sigma2_un: float
    g_frozen: bool = False
    min_distance: float = 1.0

    def __post_init__(self) -> None:
        if self.rician_k < 0:
            raise ValueError("Rician K-factor must be >= 0")
        if min(self.beta0_c, self.beta0_s, self.sigma2_0, self.sigma2_ubs, self.sigma2_un) <= 0:
            raise ValueError("reference gains and noise powers must be positive")

    @property
    def los_weight(self) -> float:
        if np.isinf(self.rician_k):
            return 1.0
        return float(np.sqrt(self.rician_k / (self.rician_k + 1.0)))

    @property
    def scatter_weight(self) -> float:
        if np.isinf(self.rician_k):
            return 0.0
        return float(np.sqrt(1.0 / (self.rician_k + 1.0)))


@dataclass(frozen=True)
class Scene:
    geom: ArrayGeometry
    params: ChannelParams
    power: float

    @classmethod
    def from_config(cls, cfg: EnvConfig) -> "Scene":
        geom = ArrayGeometry(cfg.mx, cfg.my, cfg.spacing, cfg.spacing, cfg.wavelength)
        params = ChannelParams(
            rician_k=cfg.rician_k,
            beta0_c=db_to_linear(cfg.beta0_c_db),
            beta0_s=db_to_linear(cfg.beta0_s_db),
            rcs_target=cfg.rcs_target,
            rcs_uav=cfg.rcs_uav,
            sigma2_0=dbm_to_watts(cfg.noise0_dbm),
            sigma2_ubs=dbm_to_watts(cfg.noise_ubs_dbm),
            sigma2_un=dbm_to_watts(cfg.noise_un_dbm),
            g_frozen=cfg.g_frozen,
            min_distance=cfg.min_link_distance,
        )
        return cls(geom, params, cfg.power)


@dataclass
class WorldState:
    bs_pos: np.ndarray
    uav_pos: np.ndarray  # (N, 3)
    target_pos: np.ndarray

    def __post_init__(self) -> None:
        self.bs_pos = np.asarray(self.bs_pos, dtype=float)
        self.uav_pos = np.atleast_2d(np.asarray(self.uav_pos, dtype=float))
        self.target_pos = np.asarray(self.target_pos, dtype=float)

    @property
    def n(self) -> int:
        return self.uav_pos.shape[0]


@dataclass
class BeamformingMatrix:
    """Beams as columns: column 0 senses the target, column n serves UAV n."""

    w: np.ndarray  # (M, N+1) complex
    power: float

    @property
    def column_powers(self) -> np.ndarray:
        return np.sum(np.abs(self.w) ** 2, axis=0)

    @property
    def total_power(self) -> float:
        return float(np.sum(np.abs(self.w) ** 2))


@dataclass
class SinrReport:
    comm: np.ndarray
    sense_bs: float
    sense_uav: np.ndarray


@dataclass
class FadingDraws:
    """Scatter components ``g`` for every physical link of one slot.

    ``uav_uav[n, i]`` is the path BS -> UAV i -> UAV n (diagonal unused).
    """

    bs_target: complex
    uav_target: np.ndarray
    comm: np.ndarray
    uav_uav: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "FadingDraws":
        return cls(0j, np.zeros(n, complex), np.zeros(n, complex), np.zeros((n, n), complex))

    @classmethod
    def draw(cls, n: int, rng: np.random.Generator) -> "FadingDraws":
        def cn(*shape):
            return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)

        return cls(complex(cn()), cn(n), cn(n), cn(n, n))


@dataclass
class LinkGains:
    bs_target: complex
    uav_target: np.ndarray  # (N,)
    comm: np.ndarray  # (N,)
    uav_uav: np.ndarray  # (N, N)
    steer: np.ndarray = field(repr=False)  # (M, N+1): target then UAVs


def _distance(a, b) -> float:
    d = float(np.linalg.norm(np.asarray(b, float) - np.asarray(a, float)))
    if d == 0.0:
        raise DegenerateGeometry("zero link distance")
    return d


def steering_vector(geom: ArrayGeometry, origin, toward) -> np.ndarray:
    """UPA response toward a point, ordered as kron(x-axis, y-axis)."""
    diff = np.asarray(toward, float) - np.asarray(origin, float)
    dist = np.linalg.norm(diff)
    if dist == 0.0:
        raise DegenerateGeometry("degenerate direction")
    psi, phi = diff[0] / dist, diff[1] / dist
    ax = np.exp(-2j * np.pi * geom.dx * np.arange(geom.mx) * psi / geom.wavelength)
    ay = np.exp(-2j * np.pi * geom.dy * np.arange(geom.my) * phi / geom.wavelength)
    return np.kron(ax, ay)


def rician_gain(params: ChannelParams, kind: str, bs, rx, via=None, rng=None, g=None) -> complex:
    """Complex Rician gain of one link.

    ``kind`` selects the path loss: ``bs_sense`` (round trip BS-target, d^4),
    ``uav_sense`` (BS -> ``via`` -> ``rx``, d1^2 d2^2) or ``comm`` (BS-UAV, d^2).
    ``g`` overrides the scatter draw; frozen channels use ``g = 0``.
    """
    floor = params.min_distance
    if kind == "bs_sense":
        pathloss = max(_distance(bs, rx), floor) ** 4
        beta0 = params.beta0_s
    elif kind == "uav_sense":
        if via is None:
            raise ValueError("uav_sense needs the scattering point 'via'")
        pathloss = max(_distance(bs, via), floor) ** 2 * max(_distance(via, rx), floor) ** 2
        beta0 = params.beta0_s
    elif kind == "comm":
        pathloss = max(_distance(bs, rx), floor) ** 2
        beta0 = params.beta0_c
    else:
        raise ValueError(f"unknown link kind {kind!r}")
    if g is None:
        if params.g_frozen:
            g = 0.0
        elif rng is None:
            raise ValueError("an rng is required unless the channel is frozen")
        else:
            g = (rng.standard_normal() + 1j * rng.standard_normal()) / np.sqrt(2.0)
    return complex((params.los_weight + params.scatter_weight * g) * np.sqrt(beta0 / pathloss))


def link_gains(scene: Scene, world: WorldState, fading: FadingDraws | None = None, rng=None) -> LinkGains:
    """All link gains of a slot, sharing one fading draw per physical link."""
    n = world.n
    p = scene.params
    if fading is None:
        if p.g_frozen:
            fading = FadingDraws.zeros(n)
        elif rng is None:
            raise ValueError("an rng is required unless the channel is frozen")
        else:
            fading = FadingDraws.draw(n, rng)
    if p.g_frozen:
        fading = FadingDraws.zeros(n)
    bs, tgt, uav = world.bs_pos, world.target_pos, world.uav_pos
    bs_t = rician_gain(p, "bs_sense", bs, tgt, g=fading.bs_target)
    u_t = np.array([rician_gain(p, "uav_sense", bs, uav[i], via=tgt, g=fading.uav_target[i]) for i in range(n)])
    comm = np.array([rician_gain(p, "comm", bs, uav[i], g=fading.comm[i]) for i in range(n)])
    uu = np.zeros((n, n), complex)
    for a in range(n):
        for b in range(n):
            if a != b:
                uu[a, b] = rician_gain(p, "uav_sense", bs, uav[a], via=uav[b], g=fading.uav_uav[a, b])
    steer = np.empty((scene.geom.m, n + 1), complex)
    steer[:, 0] = steering_vector(scene.geom, bs, tgt)
    for i in range(n):
        steer[:, i + 1] = steering_vector(scene.geom, bs, uav[i])
    return LinkGains(bs_t, u_t, comm, uu, steer)


def beam_projections(steer: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``out[p, k] = |a_p^H w_k|^2``."""
    return np.abs(steer.conj().T @ w) ** 2


def _comm(n: int, params: ChannelParams, gains: LinkGains, proj: np.ndarray) -> float:
    # n is 1-based; row/column n of proj belongs to UAV n
    N = proj.shape[0] - 1
    c2 = abs(gains.comm[n - 1]) ** 2
    num = c2 * proj[n, n]
    intra = c2 * (proj[n, 1:].sum() - proj[n, n])
    echo = params.rcs_target**2 * abs(gains.uav_target[n - 1]) ** 2 * proj[0, :].sum()
    scatter = 0.0
    for i in range(1, N + 1):
        if i != n:
            scatter += params.rcs_uav**2 * abs(gains.uav_uav[n - 1, i - 1]) ** 2 * proj[i, :].sum()
    return float(num / (intra + echo + scatter + params.sigma2_0))


def _sense(gain: complex, residual: float, params: ChannelParams, proj: np.ndarray) -> float:
    s2 = params.rcs_target**2 * abs(gain) ** 2
    num = s2 * proj[0, 0]
    interf = s2 * proj[0, 1:].sum()
    return float(num / (interf + residual + params.sigma2_0))


def comm_sinr(n: int, scene: Scene, world: WorldState, W: BeamformingMatrix, gains: LinkGains) -> float:
    """Downlink SINR at UAV ``n`` (1-based)."""
    if not 1 <= n <= world.n:
        raise IndexError(f"UAV index {n} outside 1..{world.n}")
    return _comm(n, scene.params, gains, beam_projections(gains.steer, W.w))


def sensing_sinr_bs(scene: Scene, world: WorldState, W: BeamformingMatrix, gains: LinkGains) -> float:
    proj = beam_projections(gains.steer[:, :1], W.w)
    return _sense(gains.bs_target, scene.params.sigma2_ubs, scene.params, proj)


def sensing_sinr_uav(n: int, scene: Scene, world: WorldState, W: BeamformingMatrix, gains: LinkGains) -> float:
    if not 1 <= n <= world.n:
        raise IndexError(f"UAV index {n} outside 1..{world.n}")
    proj = beam_projections(gains.steer[:, :1], W.w)
    return _sense(gains.uav_target[n - 1], scene.params.sigma2_un, scene.params, proj)


def compute_sinrs(scene: Scene, world: WorldState, W: BeamformingMatrix, gains: LinkGains) -> SinrReport:
    p = scene.params
    proj = beam_projections(gains.steer, W.w)
    n = world.n
    comm = np.array([_comm(i, p, gains, proj) for i in range(1, n + 1)])
    bs = _sense(gains.bs_target, p.sigma2_ubs, p, proj)
    uav = np.array([_sense(gains.uav_target[i], p.sigma2_un, p, proj) for i in range(n)])
    return SinrReport(comm, bs, uav)
