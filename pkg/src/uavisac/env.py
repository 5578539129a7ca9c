"""Heterogeneous multi-agent ISAC environment.

Agents ``0..N-1`` are the UAVs, agent ``N`` is the BS. Each slot the BS
action is decoded into beams, UAV waypoints are projected onto the speed and
separation constraints, the target moves, channels and SINRs are drawn, the
fused CRBs feed the Fisher recursion and the EKF, and the Lagrangian reward
is returned.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .beams import decode_bs_action
from .channel import BeamformingMatrix, FadingDraws, Scene, WorldState, compute_sinrs, link_gains
from .config import EnvConfig, linear_to_db
from .fusion import CrbConstants, FusionWeights, ci_fuse, crb_or_cap, measurement_covariance
from .tracking import (
    FisherState,
    MotionModel,
    ekf_step,
    fim_update,
    h_measure,
    propagate_truth,
    safe_jacobian,
    wrap_angle,
)

log = logging.getLogger(__name__)

SEPARATION_MARGIN = 1e-6
SEPARATION_ITERS = 50
SINR_DB_FLOOR = -100.0


class EnvAbort(RuntimeError):
    """Raised when a slot produces non-finite values; the episode is unusable."""


@dataclass
class JointAction:
    uav: np.ndarray  # (N, 3) raw displacements in units of du_max
    bs: np.ndarray  # (bs_action_dim,)


@dataclass
class JointObservation:
    core: np.ndarray
    n_agents: int

    def for_agent(self, i: int) -> np.ndarray:
        onehot = np.zeros(self.n_agents)
        onehot[i] = 1.0
        return np.concatenate([self.core, onehot])

    def stacked(self) -> np.ndarray:
        return np.stack([self.for_agent(i) for i in range(self.n_agents)])


@dataclass
class RewardBreakdown:
    r_s: float
    r_c: np.ndarray
    total: float


@dataclass
class SlotDraws:
    truth: np.ndarray
    fading: FadingDraws
    meas: np.ndarray
    split_seed: int


@dataclass
class SlotResult:
    W: BeamformingMatrix
    uav_pos: np.ndarray
    truth: np.ndarray
    sinr: object
    sinr_hat: object
    fisher: FisherState
    shadow_bs: FisherState | None
    est: np.ndarray
    M: np.ndarray
    y: np.ndarray | None
    reward: RewardBreakdown


def project_waypoint(current, raw, du_max: float) -> np.ndarray:
    """Move from ``current`` by ``raw`` rescaled onto the ball of radius ``du_max``."""
    current = np.asarray(current, float)
    disp = np.asarray(raw, float)
    norm = np.linalg.norm(disp)
    if norm > du_max:
        disp = disp * (du_max / norm)
    return current + disp


def _push_pass(pos: np.ndarray, dd_min: float, rng) -> bool:
    moved = False
    n = len(pos)
    for i in range(n):
        for j in range(i + 1, n):
            diff = pos[j] - pos[i]
            dist = np.linalg.norm(diff)
            if dist > dd_min:
                continue
            if dist == 0.0:
                axis = rng.standard_normal(3) if rng is not None else np.array([1.0, 0.0, 0.0])
                unit = axis / np.linalg.norm(axis)
            else:
                unit = diff / dist
            shift = 0.5 * (dd_min + SEPARATION_MARGIN - dist) * unit
            pos[i] -= shift
            pos[j] += shift
            moved = True
    return moved


def min_pairwise_distance(pos) -> float:
    pos = np.asarray(pos, float)
    n = len(pos)
    if n < 2:
        return np.inf
    return min(np.linalg.norm(pos[i] - pos[j]) for i in range(n) for j in range(i + 1, n))


def enforce_separation(positions, dd_min: float, rng=None, previous=None, max_iter: int = SEPARATION_ITERS,
                       project=None):
    """Push pairs apart symmetrically until every pair is farther than ``dd_min``.

    ``project`` (optional) maps the pushed positions back onto other
    constraints after each pass. If no feasible point is reached within
    ``max_iter`` passes, UAVs in offending pairs fall back to ``previous``.
    """
    pos = np.array(positions, float)
    for _ in range(max_iter):
        if min_pairwise_distance(pos) > dd_min:
            return pos
        _push_pass(pos, dd_min, rng)
        if project is not None:
            pos = project(pos)
    if min_pairwise_distance(pos) > dd_min:
        return pos
    if previous is None:
        log.warning("separation did not converge in %d passes", max_iter)
        return pos
    log.warning("separation did not converge; reverting offending UAVs")
    return _revert_offenders(pos, np.asarray(previous, float), dd_min)


def _revert_offenders(pos, previous, dd_min):
    pos = pos.copy()
    for _ in range(len(pos)):
        bad = set()
        for i in range(len(pos)):
            for j in range(i + 1, len(pos)):
                if np.linalg.norm(pos[i] - pos[j]) <= dd_min:
                    bad.update((i, j))
        if not bad:
            break
        for i in bad:
            pos[i] = previous[i]
    return pos


class RunningNormalizer:
    """Per-dimension running mean/variance with clipping at +-``clip`` std."""

    def __init__(self, dim: int, clip: float = 10.0, eps: float = 1e-8):
        self.dim = dim
        self.clip = clip
        self.eps = eps
        self.count = 0.0
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.frozen = False

    def update(self, batch) -> None:
        if self.frozen:
            return
        x = np.asarray(batch, float).reshape(-1, self.dim)
        n = x.shape[0]
        if n == 0:
            return
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        total = self.count + n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n + delta**2 * self.count * n / total
        self.mean = self.mean + delta * n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x) -> np.ndarray:
        z = (np.asarray(x, float) - self.mean) / np.sqrt(self.var + self.eps)
        return np.clip(z, -self.clip, self.clip)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "clip": self.clip, "eps": self.eps, "count": self.count,
                "mean": self.mean.tolist(), "var": self.var.tolist(), "frozen": self.frozen}

    @classmethod
    def from_dict(cls, d: dict) -> "RunningNormalizer":
        out = cls(d["dim"], d["clip"], d["eps"])
        out.count = d["count"]
        out.mean = np.array(d["mean"], float)
        out.var = np.array(d["var"], float)
        out.frozen = d["frozen"]
        return out


def sinr_db(x) -> np.ndarray:
    x = np.asarray(x, float)
    with np.errstate(divide="ignore"):
        return np.maximum(linear_to_db(np.maximum(x, 0.0)), SINR_DB_FLOOR)


def reward_breakdown(rho: float, comm_sinr_db, gamma_min_db: float, lambda_s: float, lambda_c: float) -> RewardBreakdown:
    r_s = -float(rho)
    r_c = np.minimum(np.asarray(comm_sinr_db, float) - gamma_min_db, 0.0)
    return RewardBreakdown(r_s, r_c, lambda_s * r_s + lambda_c * float(r_c.sum()))


class IsacEnv:
    """One rollout worker's environment. Owns its RNG; shares nothing."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.scene = Scene.from_config(cfg)
        self.model = MotionModel(cfg.slot_duration, cfg.sigma2_process)
        self.n = cfg.n_uavs
        self.n_agents = self.n + 1
        self._set_constants()
        self.rng = np.random.default_rng(0)
        self.t = 0
        self.done = True
        self._pending: SlotDraws | None = None

    # -- configuration -------------------------------------------------
    def _set_constants(self) -> None:
        cfg = self.cfg
        self.crb_consts = CrbConstants.from_kappa(cfg.kappa, cfg.bandwidth)
        self.weights = FusionWeights.metropolis(self.n) if cfg.fusion else FusionWeights.bs_only(self.n)
        self.bs_weights = FusionWeights.bs_only(self.n)

    def set_grading(self, values) -> None:
        """Apply curriculum grading parameters (gamma_min in dB, then kappas)."""
        self.cfg = self.cfg.with_grading(values)
        self._set_constants()

    @property
    def core_dim(self) -> int:
        return self.n + 3 * self.n + 1 + 6

    @property
    def obs_dim(self) -> int:
        return self.core_dim + self.n_agents

    @property
    def state_dim(self) -> int:
        return self.core_dim + 1

    @property
    def action_dims(self) -> list[int]:
        return [3] * self.n + [self.cfg.bs_action_dim]

    # -- episode -------------------------------------------------------
    def reset(self, seed=None) -> JointObservation:
        cfg = self.cfg
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self._pending = None
        self.uav_pos = np.array(cfg.uav_init, float)
        if min_pairwise_distance(self.uav_pos) <= cfg.dd_min:
            raise ValueError("initial UAV separation violates the minimum distance")
        self.bs_pos = np.array(cfg.bs_pos, float)
        self.truth = np.array([*cfg.target_init, *cfg.target_vel], float)
        self.fisher = FisherState.initial(self.truth, cfg.m0_diag)
        self.shadow_bs = FisherState.initial(self.truth, cfg.m0_diag)
        self.est = self.truth.copy()
        self.M = np.diag(np.asarray(cfg.m0_diag, float))
        self.comm_db = np.zeros(self.n)
        self.last: SlotResult | None = None
        return self.observation()

    def observation(self) -> JointObservation:
        return JointObservation(self._core(self.est), self.n_agents)

    def state(self) -> np.ndarray:
        """Centralised critic input: the core features with the true target state."""
        return np.concatenate([self._core(self.truth), [self.t / self.cfg.slots]])

    def _core(self, target_state) -> np.ndarray:
        s = self.cfg.position_scale
        ts = np.asarray(target_state, float)
        return np.concatenate([
            self.comm_db / 10.0,
            (self.uav_pos / s).ravel(),
            [np.log10(max(self.fisher.rho, 1e-12))],
            ts[:3] / s,
            ts[3:],
        ])

    def draw_slot(self) -> SlotDraws:
        """Random inputs for the next slot, cached so a candidate action can be
        evaluated against the same channel realisation before stepping."""
        if self._pending is None:
            r = self.rng
            self._pending = SlotDraws(
                truth=r.standard_normal(6),
                fading=FadingDraws.draw(self.n, r),
                meas=r.standard_normal(4),
                split_seed=int(r.integers(2**63)),
            )
        return self._pending

    def _move_uavs(self, raw_uav, draws: SlotDraws) -> np.ndarray:
        cfg = self.cfg
        lo, hi = np.array(cfg.arena_min), np.array(cfg.arena_max)
        prev = self.uav_pos
        raw_uav = np.asarray(raw_uav, float).reshape(self.n, 3)

        def project(pos):
            return np.array([np.clip(project_waypoint(prev[i], pos[i] - prev[i], cfg.du_max), lo, hi)
                             for i in range(self.n)])

        pos = project(prev + cfg.du_max * raw_uav)
        return enforce_separation(pos, cfg.dd_min, np.random.default_rng(draws.split_seed), previous=prev,
                                  project=project)

    def _psi(self, sinr, weights: FusionWeights) -> np.ndarray:
        cfg = self.cfg
        crbs = [crb_or_cap(sinr.sense_bs, self.crb_consts, cfg.var_cap, cfg.crb_linear_sinr)]
        crbs += [crb_or_cap(s, self.crb_consts, cfg.var_cap, cfg.crb_linear_sinr) for s in sinr.sense_uav]
        return measurement_covariance(ci_fuse(crbs, weights))

    def simulate(self, action: JointAction, draws: SlotDraws | None = None, light: bool = False) -> SlotResult:
        """Compute the outcome of ``action`` without committing it.

        ``light`` skips the measurement, the EKF and the BS-only shadow
        recursion (enough for the one-step reward).
        """
        cfg = self.cfg
        draws = draws or self.draw_slot()
        W = decode_bs_action(action.bs, cfg.mx, cfg.my, self.n, cfg.power, kron=cfg.kron,
                             rank=cfg.kron_rank, qr=cfg.qr,
                             rng=np.random.default_rng([draws.split_seed, 1]))
        uav = self._move_uavs(action.uav, draws)
        truth = propagate_truth(self.truth, self.model, cfg.target_accel)
        if cfg.truth_noise_scale > 0:
            truth = truth + np.linalg.cholesky(cfg.truth_noise_scale * self.model.Phi) @ draws.truth
        world = WorldState(self.bs_pos, uav, truth[:3])
        sinr = compute_sinrs(self.scene, world, W, link_gains(self.scene, world, draws.fading))

        pred = self.model.F @ self.est
        world_hat = WorldState(self.bs_pos, uav, pred[:3])
        sinr_hat = compute_sinrs(self.scene, world_hat, W, link_gains(self.scene, world_hat, draws.fading))
        psi_hat = self._psi(sinr_hat, self.weights)
        origin = np.concatenate([self.bs_pos, np.zeros(3)])
        H = safe_jacobian(pred - origin)
        fisher = fim_update(self.fisher, self.model, H, psi_hat, literal=cfg.fim_literal)

        comm_db = sinr_db(sinr.comm)
        reward = reward_breakdown(fisher.rho, comm_db, cfg.gamma_min_db, cfg.lambda_s, cfg.lambda_c)
        shadow = est = M = y = None
        if not light:
            psi_bs = self._psi(sinr_hat, self.bs_weights)
            shadow = fim_update(self.shadow_bs, self.model, H, psi_bs, literal=cfg.fim_literal)
            psi_true = self._psi(sinr, self.weights)
            y = h_measure(truth - origin).as_array() + np.sqrt(np.diag(psi_true)) * draws.meas
            y[2] = wrap_angle(y[2])
            est_rel, M, _, _ = ekf_step(self.est - origin, self.M, self.model, y, psi_hat, H)
            est = est_rel + origin
        return SlotResult(W, uav, truth, sinr, sinr_hat, fisher, shadow, est, M, y, reward)

    def evaluate(self, action: JointAction) -> float:
        """One-step reward of ``action`` on the cached draws of the next slot."""
        return self.simulate(action, self.draw_slot(), light=True).reward.total

    def step(self, action: JointAction):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        draws = self.draw_slot()
        try:
            res = self.simulate(action, draws)
        except (ValueError, np.linalg.LinAlgError) as exc:
            self.done = True
            raise EnvAbort(f"slot {self.t + 1}: {exc}") from exc
        self._pending = None
        checks = [res.truth, res.est, res.M, res.fisher.J, [res.fisher.rho, res.reward.total], res.sinr.comm]
        if not all(np.all(np.isfinite(c)) for c in checks):
            self.done = True
            raise EnvAbort(f"slot {self.t + 1}: non-finite values")
        self.t += 1
        self.uav_pos = res.uav_pos
        self.truth = res.truth
        self.fisher = dataclasses.replace(res.fisher, est=res.est, M=res.M)
        self.shadow_bs = res.shadow_bs
        self.est, self.M = res.est, res.M
        self.comm_db = sinr_db(res.sinr.comm)
        self.last = res
        self.done = self.t >= self.cfg.slots
        info = {
            "t": self.t,
            "rho": res.fisher.rho,
            "rho_bs_only": res.shadow_bs.rho,
            "comm_sinr_db": self.comm_db.copy(),
            "sense_bs_db": float(sinr_db(res.sinr.sense_bs)),
            "sense_uav_db": sinr_db(res.sinr.sense_uav),
            "violations": self.comm_db < self.cfg.gamma_min_db,
            "truth": res.truth.copy(),
            "est": res.est.copy(),
            "uav_pos": res.uav_pos.copy(),
            "beam_power": res.W.total_power,
        }
        return self.observation(), res.reward, self.done, info
