"""Configuration for the ISAC environment and the trainer.

All user-facing quantities are stored in the units the system tables use
(dB, dBm, metres, seconds). Conversion to linear units happens once, when a
:class:`Scene` is built from an :class:`EnvConfig`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

Vec3 = tuple[float, float, float]


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x)


def default_uav_positions(n: int) -> list[Vec3]:
    """Initial UAV positions: the two-UAV layout, extended along y in 20 m steps."""
    return [(30.0, 10.0 * (n - 1 - 2 * i), 70.0) for i in range(n)]


@dataclass
class EnvConfig:
    """Scene, physics and reward constants.

    Defaults reproduce the two-UAV system table. Grading parameters used by the
    curriculum are ``gamma_min_db`` and ``kappa``.
    """

    n_uavs: int = 2
    bs_pos: Vec3 = (0.0, 0.0, 0.0)
    uav_init: list[Vec3] | None = None
    target_init: Vec3 = (60.0, 0.0, 60.0)
    target_vel: Vec3 = (-1.0, 1.0, -1.0)
    target_accel: Vec3 = (0.02, -0.02, 0.02)
    sigma2_process: float = 0.1
    truth_noise_scale: float = 0.0
    mx: int = 8
    my: int = 8
    wavelength: float = 0.1
    spacing: float = 0.05
    bandwidth: float = 100e6
    power: float = 5.0
    gamma_min_db: float = 5.0
    beta0_c_db: float = -50.0
    beta0_s_db: float = -50.0
    rician_k: float = 10.0
    kappa: tuple[float, float, float, float] = (1.0, 1e-6, 1e-6, 1e-6)
    noise0_dbm: float = -80.0
    noise_ubs_dbm: float = -70.0
    noise_un_dbm: float = -70.0
    rcs_target: float = 0.9
    rcs_uav: float = 0.9
    slots: int = 100
    slot_duration: float = 1.0
    du_max: float = 5.0
    dd_min: float = 5.0
    lambda_s: float = 1.0
    lambda_c: float = 5.0
    fusion: bool = True
    fim_literal: bool = False
    crb_linear_sinr: bool = False
    var_cap: float = 1e6
    kron: bool = True
    kron_rank: int = 2
    qr: bool = True
    g_frozen: bool = False
    m0_diag: tuple[float, ...] = (1.0, 1.0, 1.0, 0.1, 0.1, 0.1)
    arena_min: Vec3 = (-300.0, -300.0, 10.0)
    arena_max: Vec3 = (300.0, 300.0, 300.0)
    min_link_distance: float = 1.0
    position_scale: float = 100.0

    def __post_init__(self) -> None:
        if self.uav_init is None:
            self.uav_init = default_uav_positions(self.n_uavs)
        self.uav_init = [tuple(float(c) for c in p) for p in self.uav_init]
        if len(self.uav_init) != self.n_uavs:
            raise ValueError(f"uav_init has {len(self.uav_init)} entries for n_uavs={self.n_uavs}")
        if self.n_uavs < 1:
            raise ValueError("n_uavs must be >= 1")
        for k in ("mx", "my", "kron_rank", "slots"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")

    @property
    def bs_action_dim(self) -> int:
        beams = self.n_uavs + 1
        if self.kron:
            return 2 * self.kron_rank * (self.mx + self.my) * beams
        return 2 * self.mx * self.my * beams

    @property
    def grading(self) -> np.ndarray:
        """Curriculum grading vector: gamma_min (dB) followed by the four kappas."""
        return np.array([self.gamma_min_db, *self.kappa], dtype=float)

    def with_grading(self, values) -> "EnvConfig":
        v = [float(x) for x in values]
        return dataclasses.replace(self, gamma_min_db=v[0], kappa=tuple(v[1:5]))


@dataclass
class TrainerConfig:
    """C-HAPPO hyperparameters (desk scale by default)."""

    episodes: int = 240
    workers: int = 5
    hidden: int = 64
    paper_scale: bool = False
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 0.0
    clip_eps: float = 0.2
    epochs: int = 5
    minibatches: int = 5
    max_grad_norm: float = 0.5
    target_kl: float = 0.005
    adv_norm: bool = True
    value_norm: bool = True
    log_std_init: float = -1.6
    actor_out_scale: float = 0.01
    bs_out_scale: float = 1.0
    entropy_coef: float = 0.0
    curriculum: bool = True
    levels: int = 2
    reward_threshold: float = -800.0
    reduced_grading: tuple[float, ...] = (1.0, 0.2, 2e-7, 2e-7, 2e-7)
    eval_episodes: int = 1
    checkpoint_every: int = 0

    @property
    def width(self) -> int:
        return 512 if self.paper_scale else self.hidden


@dataclass
class GaConfig:
    population: int = 64
    generations: int = 30
    mutation_std: float = 0.1
    crossover_rate: float = 0.7
    elite: int = 2
    tournament: int = 3

    def __post_init__(self) -> None:
        if self.population < 2:
            raise ValueError("population must be >= 2")
        for k in ("mutation_std", "crossover_rate"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ValueError(f"{k} must lie in [0, 1]")
        if not 0 <= self.elite <= self.population:
            raise ValueError("elite count out of range")


POLICY_FLAGS = {
    "chappo": dict(curriculum=True, kron=True, qr=True),
    "happo": dict(curriculum=False, kron=False, qr=False),
    "ncl": dict(curriculum=False, kron=True, qr=True),
    "nkr": dict(curriculum=True, kron=False, qr=True),
    "nqr": dict(curriculum=True, kron=True, qr=False),
}
LEARNED_POLICIES = tuple(POLICY_FLAGS)
POLICIES = LEARNED_POLICIES + ("ga", "random")


def apply_policy_flags(policy: str, env: EnvConfig, trainer: TrainerConfig) -> tuple[EnvConfig, TrainerConfig]:
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    flags = POLICY_FLAGS.get(policy)
    if flags is None:
        return env, trainer
    env = dataclasses.replace(env, kron=flags["kron"], qr=flags["qr"])
    trainer = dataclasses.replace(trainer, curriculum=flags["curriculum"])
    return env, trainer


def _jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def to_dict(cfg) -> dict:
    return _jsonable(cfg)


def _coerce(tp: Any, value: Any) -> Any:
    text = str(tp)
    if value is None:
        return None
    if "list[" in text and "Vec3" in text or "list[tuple" in text:
        return [tuple(float(c) for c in p) for p in value]
    if text.startswith("tuple") or "Vec3" in text:
        return tuple(float(c) for c in value)
    return value


def from_dict(cls, data: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: _coerce(known[k].type, v) for k, v in data.items()}
    return cls(**kwargs)


def fingerprint(*cfgs, extra: dict | None = None) -> str:
    payload = [to_dict(c) for c in cfgs]
    if extra:
        payload.append(extra)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_config(path: Path, **sections) -> None:
    data = {k: to_dict(v) for k, v in sections.items()}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_config(path: Path) -> dict:
    """Read a config JSON file into typed sections (``env``, ``trainer``, ``ga``)."""
    raw = json.loads(Path(path).read_text())
    out: dict[str, Any] = {}
    for key, cls in (("env", EnvConfig), ("trainer", TrainerConfig), ("ga", GaConfig)):
        if key in raw:
            out[key] = from_dict(cls, raw[key])
    for key, value in raw.items():
        out.setdefault(key, value)
    return out


def parse_override(text: str, cfg) -> tuple[str, Any]:
    """Parse ``name=value`` against a dataclass field, returning the typed value."""
    name, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override {text!r} is not of the form name=value")
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    if name not in fields:
        raise KeyError(f"{type(cfg).__name__} has no field {name!r}")
    current = getattr(cfg, name)
    value: Any = json.loads(raw) if raw[:1] in "[{" else raw
    if isinstance(current, bool):
        value = str(value).lower() in ("1", "true", "yes", "on")
    elif isinstance(current, int):
        value = int(value)
    elif isinstance(current, float):
        value = float(value)
    elif isinstance(current, (tuple, list)) or current is None:
        value = _coerce(fields[name].type, value)
    return name, value
