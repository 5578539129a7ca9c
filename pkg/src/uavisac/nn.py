"""Small numpy MLPs with hand-written reverse mode, diagonal-Gaussian policy
heads, Adam, and a flat binary checkpoint format.

Parameters always live in one flat float64 vector; layer weights are views
into it, so optimizers and checkpoints never need to know the layout.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LOG_STD_FLOOR = math.log(1e-6)
LOG_2PI = math.log(2.0 * math.pi)
MAX_LOG_RATIO = math.log(1e4)


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes ``[in, h1, ..., out]``; tanh on hidden layers, linear output."""

    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.sizes}")

    @classmethod
    def standard(cls, n_in: int, n_out: int, width: int = 64, layers: int = 2) -> "MlpSpec":
        return cls((n_in, *([width] * layers), n_out))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    @property
    def shapes(self) -> list[tuple[tuple[int, int], int]]:
        return [((a, b), b) for a, b in zip(self.sizes[:-1], self.sizes[1:])]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for (a, b), _ in self.shapes)

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        out, i = [], 0
        for (a, b), _ in self.shapes:
            W = params[i : i + a * b].reshape(a, b)
            i += a * b
            out.append((W, params[i : i + b]))
            i += b
        return out

    def init(self, rng: np.random.Generator, out_scale: float = 1.0) -> np.ndarray:
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases; last layer scaled."""
        params = np.zeros(self.n_params)
        layers = self.unpack(params)
        for idx, (W, _) in enumerate(layers):
            bound = 1.0 / math.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, W.shape)
            if idx == len(layers) - 1:
                W *= out_scale
        return params


def forward(spec: MlpSpec, params: np.ndarray, x) -> tuple[np.ndarray, list]:
    """Evaluate the network on a batch ``x`` of shape (B, n_in) or (n_in,)."""
    x = np.asarray(x, float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != spec.n_in:
        raise ValueError(f"input has {h.shape[1]} features, network expects {spec.n_in}")
    layers = spec.unpack(params)
    cache = [h]
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.tanh(h)
        cache.append(h)
    return (h[0] if single else h), cache


def backward(spec: MlpSpec, params: np.ndarray, cache: list, gout) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass. Returns ``(grad wrt params, grad wrt input)``."""
    g = np.asarray(gout, float)
    if g.ndim == 1:
        g = g[None, :]
    layers = spec.unpack(params)
    grad = np.zeros_like(params)
    glayers = spec.unpack(grad)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = glayers[i]
        if i < len(layers) - 1:
            g = g * (1.0 - cache[i + 1] ** 2)
        gW += cache[i].T @ g
        gb += g.sum(axis=0)
        g = g @ W.T
    return grad, g


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian with an MLP mean and a state-independent log-std.

    ``params`` holds the MLP weights followed by the ``act_dim`` log-stds.
    """

    spec: MlpSpec
    params: np.ndarray

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, width: int, rng: np.random.Generator,
               log_std_init: float = math.log(0.5), out_scale: float = 0.01) -> "GaussianPolicy":
        spec = MlpSpec.standard(obs_dim, act_dim, width)
        params = np.concatenate([spec.init(rng, out_scale=out_scale), np.full(act_dim, log_std_init)])
        return cls(spec, params)

    @property
    def act_dim(self) -> int:
        return self.spec.n_out

    def split(self, params=None):
        p = self.params if params is None else params
        return p[: self.spec.n_params], p[self.spec.n_params :]

    def log_std(self, params=None) -> np.ndarray:
        return np.maximum(self.split(params)[1], LOG_STD_FLOOR)

    def mean(self, obs, params=None) -> np.ndarray:
        return forward(self.spec, self.split(params)[0], obs)[0]

    def sample(self, obs, rng: np.random.Generator, deterministic: bool = False):
        """Draw actions for a batch of observations; returns ``(action, log_prob)``."""
        mu = self.mean(obs)
        ls = self.log_std()
        if deterministic:
            act = mu.copy()
        else:
            act = mu + np.exp(ls) * rng.standard_normal(mu.shape)
        return act, gaussian_log_prob(act, mu, ls)

    def log_prob(self, obs, act, params=None) -> np.ndarray:
        mu = self.mean(obs, params)
        return gaussian_log_prob(np.asarray(act, float), mu, self.log_std(params))

    def log_prob_and_grad(self, obs, act, glogp, params=None):
        """Log-probabilities plus the parameter gradient of ``sum(glogp * logp)``."""
        p = self.params if params is None else params
        mlp_p, raw_ls = self.split(p)
        mu, cache = forward(self.spec, mlp_p, obs)
        ls = np.maximum(raw_ls, LOG_STD_FLOOR)
        act = np.asarray(act, float)
        logp = gaussian_log_prob(act, mu, ls)
        gl = np.asarray(glogp, float)[:, None]
        z = (act - mu) * np.exp(-ls)
        gmu = gl * z * np.exp(-ls)
        gls = (gl * (z**2 - 1.0)).sum(axis=0) * (raw_ls > LOG_STD_FLOOR)
        gmlp, _ = backward(self.spec, mlp_p, cache, gmu)
        return logp, np.concatenate([gmlp, gls])

    def entropy(self, params=None) -> float:
        ls = self.log_std(params)
        return float(np.sum(ls + 0.5 * (LOG_2PI + 1.0)))


def gaussian_log_prob(act, mu, log_std) -> np.ndarray:
    z = (act - mu) * np.exp(-log_std)
    return -0.5 * np.sum(z**2, axis=-1) - np.sum(log_std) - 0.5 * mu.shape[-1] * LOG_2PI


def clipped_surrogate(policy: GaussianPolicy, obs, act, logp_old, m_factor, eps: float, params=None):
    """Mean clipped surrogate and its gradient with respect to ``params``."""
    p = policy.params if params is None else params
    m_factor = np.asarray(m_factor, float)
    logp = policy.log_prob(obs, act, p)
    log_ratio = logp - np.asarray(logp_old, float)
    ratio = np.exp(np.minimum(log_ratio, MAX_LOG_RATIO))
    unclipped = ratio * m_factor
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * m_factor
    value = float(np.mean(np.minimum(unclipped, clipped)))
    active = (unclipped <= clipped) & (log_ratio < MAX_LOG_RATIO)
    glogp = np.where(active, ratio * m_factor, 0.0) / len(m_factor)
    _, grad = policy.log_prob_and_grad(obs, act, glogp, p)
    return value, grad


@dataclass
class Adam:
    size: int
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    t: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        self.reset()

    def reset(self) -> None:
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float | None = None) -> np.ndarray:
        """Return updated parameters (descent on ``grads``)."""
        if params.shape != grads.shape:
            raise ValueError("parameter and gradient shapes differ")
        if not np.all(np.isfinite(grads)):
            log.warning("non-finite gradient, optimizer step skipped")
            return params
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1 - self.beta2) * grads**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# Checkpoint layout (all integers little-endian):
#   offset 0   8 bytes   magic b"UAVISAC\x01"
#   offset 8   uint32    header length H in bytes
#   offset 12  H bytes   UTF-8 JSON header: seed, step, segments[{name, dims, offset, count}], extra
#   offset 12+H          float64 little-endian parameters; segment offsets count float64 entries
MAGIC = b"UAVISAC\x01"


def save_checkpoint(path, segments: dict[str, tuple[list[int], np.ndarray]], seed: int, step: int,
                    extra: dict | None = None) -> None:
    entries, arrays, offset = [], [], 0
    for name, (dims, values) in segments.items():
        flat = np.ascontiguousarray(values, dtype="<f8").ravel()
        entries.append({"name": name, "dims": [int(d) for d in dims], "offset": offset, "count": int(flat.size)})
        arrays.append(flat)
        offset += flat.size
    header = json.dumps({"seed": int(seed), "step": int(step), "segments": entries, "extra": extra or {}},
                        sort_keys=True).encode()
    body = np.concatenate(arrays) if arrays else np.zeros(0, "<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(body.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + hlen].decode())
    data = np.frombuffer(blob, dtype="<f8", offset=12 + hlen)
    arrays = {s["name"]: data[s["offset"] : s["offset"] + s["count"]].astype(float) for s in header["segments"]}
    return header, arrays
