"""Denoiser abstraction, deterministic DDIM stepping and latent trajectories."""
import abc
import json
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from flexedit.attention import AttentionRecord

DEFAULT_T = 50
DEFAULT_GUIDANCE = 7.5
INVERSION_GUIDANCE = 1.0


class ScheduleRangeError(IndexError):
    pass


class TrajectoryError(ValueError):
    pass


@dataclass
class Latent:
    data: np.ndarray
    timestep: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"latent must be (C, H, W), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("latent contains non-finite values")
        self.timestep = int(self.timestep)

    @property
    def shape(self):
        return self.data.shape

    def copy(self) -> "Latent":
        return Latent(self.data.copy(), self.timestep)


@dataclass
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray
    guidance_scale: float = DEFAULT_GUIDANCE

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.alpha_bar.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have T+1={self.T + 1} entries, got {self.alpha_bar.shape}")
        if abs(self.alpha_bar[0] - 1.0) > 1e-6:
            raise ValueError("alpha_bar[0] must be 1")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] <= 0:
            raise ValueError("alpha_bar must stay positive")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be non-negative")

    @classmethod
    def linear(cls, T: int = DEFAULT_T, alpha_bar_end: float = 0.01,
               guidance_scale: float = DEFAULT_GUIDANCE) -> "NoiseSchedule":
        """Schedule linear in alpha_bar from 1 down to ``alpha_bar_end``."""
        return cls(T, np.linspace(1.0, alpha_bar_end, T + 1), guidance_scale)


@dataclass
class TextEmbedding:
    tokens: List[str]
    embedding: np.ndarray

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if self.embedding.ndim != 2 or self.embedding.shape[0] != len(self.tokens):
            raise ValueError("need exactly one embedding row per token")

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"token {token!r} not in prompt tokens {self.tokens}") from None


def _ddim_move(z: np.ndarray, eps: np.ndarray, a_from: float, a_to: float) -> np.ndarray:
    z64 = z.astype(np.float64)
    e64 = eps.astype(np.float64)
    x0 = (z64 - np.sqrt(1.0 - a_from) * e64) / np.sqrt(a_from)
    return np.sqrt(a_to) * x0 + np.sqrt(1.0 - a_to) * e64


def _check_eps(z: Latent, eps) -> np.ndarray:
    eps = np.asarray(eps)
    if eps.shape != z.data.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent shape {z.data.shape}")
    return eps


def ddim_invert_step(z: Latent, eps, sched: NoiseSchedule, t: int) -> Latent:
    """One deterministic DDIM step from noise level ``t`` to ``t + 1``."""
    eps = _check_eps(z, eps)
    if not 0 <= t < sched.T:
        raise ScheduleRangeError(f"inversion step needs 0 <= t < T={sched.T}, got {t}")
    a = sched.alpha_bar
    return Latent(_ddim_move(z.data, eps, a[t], a[t + 1]), t + 1)


def ddim_denoise_step(z: Latent, eps, sched: NoiseSchedule, t: int) -> Latent:
    """One deterministic DDIM step from noise level ``t`` to ``t - 1``."""
    eps = _check_eps(z, eps)
    if not 0 < t <= sched.T:
        raise ScheduleRangeError(f"denoising step needs 0 < t <= T={sched.T}, got {t}")
    a = sched.alpha_bar
    return Latent(_ddim_move(z.data, eps, a[t], a[t - 1]), t - 1)


LossBuilder = Callable[[AttentionRecord], object]


def _loss_value(out) -> float:
    return float(out[0] if isinstance(out, tuple) else out)


def finite_difference_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    probe = x.copy()
    flat_probe = probe.reshape(-1)
    flat_grad = grad.reshape(-1)
    for i in range(flat_probe.size):
        orig = flat_probe[i]
        flat_probe[i] = orig + step
        up = fn(probe)
        flat_probe[i] = orig - step
        down = fn(probe)
        flat_probe[i] = orig
        flat_grad[i] = (up - down) / (2.0 * step)
    return grad


class DenoiserBackend(abc.ABC):
    """Noise predictor with an attention side-channel.

    Subclasses implement :meth:`predict_noise` and :meth:`attention`; the
    default gradient oracle uses central finite differences so backends without
    differentiation support still work.
    """

    fd_step = 1e-3

    @abc.abstractmethod
    def encode_text(self, prompt: str) -> TextEmbedding:
        ...

    @abc.abstractmethod
    def predict_noise(self, latent: Latent, timestep: int, text: TextEmbedding):
        """Return ``(eps, AttentionRecord)`` for the conditional pass."""

    def attention(self, latent: Latent, timestep: int, text: TextEmbedding) -> AttentionRecord:
        return self.predict_noise(latent, timestep, text)[1]

    def attention_from_array(self, data: np.ndarray, timestep: int, text: TextEmbedding) -> AttentionRecord:
        # rounds probes to float32; backends computing in float64 should override
        return self.attention(Latent(data, timestep), timestep, text)

    def gradient_oracle(self, loss_builder: LossBuilder, latent: Latent, text: TextEmbedding):
        """Return ``(loss, d loss / d latent)`` for an attention-derived loss."""
        def f(x):
            return _loss_value(loss_builder(self.attention_from_array(x, latent.timestep, text)))

        value = f(latent.data.astype(np.float64))
        grad = finite_difference_gradient(f, latent.data, self.fd_step)
        return value, grad

    def guided_noise(self, latent: Latent, timestep: int, cond: TextEmbedding,
                     uncond: Optional[TextEmbedding], scale: float):
        """Classifier-free guidance; returns ``(eps, conditional record)``."""
        eps_c, rec = self.predict_noise(latent, timestep, cond)
        if scale == 1.0 or uncond is None:
            return eps_c, rec
        eps_u, _ = self.predict_noise(latent, timestep, uncond)
        return eps_u + scale * (eps_c - eps_u), rec


@dataclass
class LatentTrajectory:
    """Source latents indexed by noise level ``t = 0..T``."""

    latents: List[Latent]
    seed: Optional[int] = None
    noises: Optional[List[np.ndarray]] = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return len(self.latents) - 1

    @property
    def shape(self):
        return self.latents[0].shape

    def __getitem__(self, t: int) -> Latent:
        return self.latents[t]

    def __len__(self):
        return len(self.latents)

    def validate(self, T: Optional[int] = None) -> None:
        T = self.T if T is None else T
        have = {z.timestep for z in self.latents}
        missing = [t for t in range(T + 1) if t not in have]
        if missing:
            raise TrajectoryError(f"trajectory is missing steps {missing}")
        for t, z in enumerate(self.latents[: T + 1]):
            if z.timestep != t:
                raise TrajectoryError(f"trajectory entry {t} holds timestep {z.timestep}")
            if z.shape != self.shape:
                raise TrajectoryError(f"trajectory entry {t} has shape {z.shape}, expected {self.shape}")

    def save(self, path) -> None:
        os.makedirs(path, exist_ok=True)
        meta = {
            "T": self.T,
            "shape": list(self.shape),
            "dtype": "f32",
            "byte_order": "little-endian",
            "seed": self.seed,
        }
        with open(os.path.join(path, "meta.json"), "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for z in self.latents:
            z.data.astype("<f4").tofile(os.path.join(path, f"z_{z.timestep}.bin"))

    @classmethod
    def load(cls, path) -> "LatentTrajectory":
        meta_path = os.path.join(path, "meta.json")
        if not os.path.exists(meta_path):
            raise TrajectoryError(f"no meta.json in {path}")
        with open(meta_path) as fh:
            meta = json.load(fh)
        if meta.get("dtype") != "f32" or meta.get("byte_order") != "little-endian":
            raise TrajectoryError("only little-endian f32 trajectories are supported")
        shape = tuple(meta["shape"])
        T = int(meta["T"])
        latents, missing = [], []
        for t in range(T + 1):
            fname = os.path.join(path, f"z_{t}.bin")
            if not os.path.exists(fname):
                missing.append(t)
                continue
            data = np.fromfile(fname, dtype="<f4")
            if data.size != int(np.prod(shape)):
                raise TrajectoryError(f"{fname} holds {data.size} values, expected {int(np.prod(shape))}")
            latents.append(Latent(data.reshape(shape), t))
        if missing:
            raise TrajectoryError(f"trajectory is missing steps {missing}")
        return cls(latents, seed=meta.get("seed"))


def forward_stage(source: Union[Latent, LatentTrajectory], backend: DenoiserBackend, sched: NoiseSchedule,
                  prompt: TextEmbedding, guidance: float = INVERSION_GUIDANCE,
                  uncond: Optional[TextEmbedding] = None) -> LatentTrajectory:
    """Collect source latents for every noise level.

    A recorded trajectory (synthetic image) is validated and returned as is;
    a clean latent (real image) is DDIM-inverted step by step.
    """
    if isinstance(source, LatentTrajectory):
        source.validate(sched.T)
        return source
    if source.timestep != 0:
        raise ValueError("real-image inversion starts from a clean latent at t=0")
    latents = [source]
    noises = []
    z = source
    for t in range(sched.T):
        eps, _ = backend.guided_noise(z, t, prompt, uncond, guidance)
        noises.append(np.asarray(eps, dtype=np.float32))
        z = ddim_invert_step(z, eps, sched, t)
        latents.append(z)
    return LatentTrajectory(latents, seed=getattr(backend, "seed", None), noises=noises)


def denoise_with_noises(z_T: Latent, noises: Sequence[np.ndarray], sched: NoiseSchedule) -> Latent:
    """Replay a recorded noise sequence backwards from ``z_T`` to ``z_0``."""
    z = z_T
    for t in range(sched.T, 0, -1):
        z = ddim_denoise_step(z, noises[t - 1], sched, t)
    return z

