"""Deterministic desk-scale stand-ins for the diffusion model and the VAE.

The toy denoiser has cross-attention layers on a coarse grid (half the latent
resolution) and self-attention layers on the fine grid (the latent
resolution). Everything is computed in float64 and the attention-loss gradient
is back-propagated by hand, so the finite-difference oracle of the base class
is an independent check.
"""
import re
import zlib
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from flexedit.attention import AttentionGrad, AttentionRecord
from flexedit.backend import DenoiserBackend, Latent, TextEmbedding

SOT = "<sot>"
_WORD = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


def tokenize(prompt: str):
    return [SOT] + _WORD.findall(prompt.lower())


def _pool2(x: np.ndarray) -> np.ndarray:
    C, H, W = x.shape
    return x.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def _unpool2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - np.sum(g * p, axis=1, keepdims=True))


class ToyBackend(DenoiserBackend):
    """Small seeded attention network producing noise and attention maps."""

    def __init__(self, seed: int = 0, latent_shape: Tuple[int, int, int] = (4, 8, 8),
                 vocab: Iterable[str] = (), attn_dim: int = 8, embed_dim: int = 16,
                 n_cross: int = 2, n_self: int = 2, noise_gain: float = 0.05,
                 locality: float = 1.5):
        C, H, W = latent_shape
        if H % 4 or W % 4:
            raise ValueError(f"latent spatial dims must be divisible by 4, got {H}x{W}")
        self.seed = int(seed)
        self.latent_shape = (C, H, W)
        self.fine_shape = (H, W)
        self.coarse_shape = (H // 2, W // 2)
        self.attn_dim = attn_dim
        self.embed_dim = embed_dim
        self.noise_gain = noise_gain
        self.vocab = {}

        rng = np.random.default_rng([self.seed, 7919])
        d, M = attn_dim, embed_dim
        self.scale = 1.0 / np.sqrt(d)
        self.cross_layers = [
            dict(wq=rng.normal(size=(C, d)), wk=rng.normal(size=(M, d)), wv=rng.normal(size=(M, C)) * 0.3)
            for _ in range(n_cross)
        ]
        self.self_layers = [
            dict(wq=rng.normal(size=(C, d)) * 0.7, wk=rng.normal(size=(C, d)) * 0.7,
                 wv=rng.normal(size=(C, C)) * 0.3)
            for _ in range(n_self)
        ]
        self.w_mix = rng.normal(size=(C, C)) * 0.5
        Pc = self.coarse_shape[0] * self.coarse_shape[1]
        self.pos_coarse = rng.normal(size=(Pc, C)) * 0.8
        self.pos_fine = rng.normal(size=(H * W, C)) * 0.3
        yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        coords = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
        dist2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
        self.locality_bias = -dist2 / (2.0 * locality ** 2)
        for tok in vocab:
            self._token_vector(tok)

    def _token_vector(self, token: str) -> np.ndarray:
        if token not in self.vocab:
            rng = np.random.default_rng([self.seed, zlib.crc32(token.encode("utf-8"))])
            self.vocab[token] = rng.normal(size=self.embed_dim)
        return self.vocab[token]

    def encode_text(self, prompt: str) -> TextEmbedding:
        tokens = tokenize(prompt)
        return TextEmbedding(tokens, np.stack([self._token_vector(t) for t in tokens]))

    def unconditional(self) -> TextEmbedding:
        return self.encode_text("")

    def _check(self, data: np.ndarray) -> np.ndarray:
        if data.shape != self.latent_shape:
            raise ValueError(f"latent shape {data.shape} does not match backend shape {self.latent_shape}")
        return data.astype(np.float64)

    def _forward(self, z: np.ndarray, text: TextEmbedding, with_noise: bool):
        C, H, W = self.latent_shape
        rms = np.sqrt(np.mean(z ** 2) + 1e-12)
        x = z / rms
        E = text.embedding
        cache = dict(z=z, rms=rms, x=x, cross=[], self=[])

        pooled = _pool2(x).reshape(C, -1).T + self.pos_coarse
        mixed = np.einsum("dc,chw->dhw", self.w_mix, x)
        for layer in self.cross_layers:
            q = pooled @ layer["wq"]
            k = E @ layer["wk"]
            attn = softmax(q @ k.T * self.scale, axis=1)
            cache["cross"].append(dict(q=q, k=k, a=attn))
            if with_noise:
                out = (attn @ (E @ layer["wv"])).T.reshape(C, *self.coarse_shape)
                mixed = mixed + _unpool2(out)

        xf = x.reshape(C, -1).T + self.pos_fine
        cache["xf"] = xf
        for layer in self.self_layers:
            q = xf @ layer["wq"]
            k = xf @ layer["wk"]
            attn = softmax(q @ k.T * self.scale + self.locality_bias, axis=1)
            cache["self"].append(dict(q=q, k=k, a=attn))
            if with_noise:
                mixed = mixed + (attn @ xf @ layer["wv"]).T.reshape(C, H, W)

        eps = self.noise_gain * np.tanh(mixed) if with_noise else None
        return eps, cache

    def _record(self, cache, timestep: int, text: TextEmbedding) -> AttentionRecord:
        cross = {
            j: [layer["a"][:, j].reshape(self.coarse_shape) for layer in cache["cross"]]
            for j in range(len(text.tokens))
        }
        return AttentionRecord(cross=cross, self_attn=[layer["a"] for layer in cache["self"]],
                               timestep=timestep, fine_shape=self.fine_shape, tokens=list(text.tokens))

    def predict_noise(self, latent: Latent, timestep: int, text: TextEmbedding):
        eps, cache = self._forward(self._check(latent.data), text, with_noise=True)
        return eps.astype(np.float32), self._record(cache, timestep, text)

    def attention(self, latent: Latent, timestep: int, text: TextEmbedding) -> AttentionRecord:
        return self.attention_from_array(latent.data, timestep, text)

    def attention_from_array(self, data: np.ndarray, timestep: int, text: TextEmbedding) -> AttentionRecord:
        _, cache = self._forward(self._check(np.asarray(data)), text, with_noise=False)
        return self._record(cache, timestep, text)

    def _backward(self, cache, grad: AttentionGrad) -> np.ndarray:
        C, H, W = self.latent_shape
        gx = np.zeros((C, H, W))
        n_cross = len(cache["cross"])
        if grad.cross:
            g_pooled = np.zeros_like(self.pos_coarse)
            for layer, c in zip(self.cross_layers, cache["cross"]):
                g_attn = np.zeros_like(c["a"])
                for j, g in grad.cross.items():
                    g_attn[:, j] = np.ravel(g) / n_cross
                g_logits = _softmax_backward(c["a"], g_attn) * self.scale
                g_pooled += (g_logits @ c["k"]) @ layer["wq"].T
            g_pool_map = g_pooled.T.reshape(C, *self.coarse_shape)
            gx += _unpool2(g_pool_map) / 4.0
        if grad.self_attn is not None:
            n_self = len(cache["self"])
            g_xf = np.zeros_like(cache["xf"])
            for layer, c in zip(self.self_layers, cache["self"]):
                g_logits = _softmax_backward(c["a"], grad.self_attn / n_self) * self.scale
                g_q = g_logits @ c["k"]
                g_k = g_logits.T @ c["q"]
                g_xf += g_q @ layer["wq"].T + g_k @ layer["wk"].T
            gx += g_xf.T.reshape(C, H, W)
        z, rms, x = cache["z"], cache["rms"], cache["x"]
        return gx / rms - x * np.sum(gx * x) / (rms * x.size)

    def gradient_oracle(self, loss_builder, latent: Latent, text: TextEmbedding):
        _, cache = self._forward(self._check(latent.data), text, with_noise=False)
        out = loss_builder(self._record(cache, latent.timestep, text))
        if not isinstance(out, tuple) or out[1] is None:
            return super().gradient_oracle(loss_builder, latent, text)
        value, grad = out
        return float(value), self._backward(cache, grad)


def toy_backend(seed: int, latent_shape=(4, 8, 8), vocab: Sequence[str] = ()) -> ToyBackend:
    return ToyBackend(seed=seed, latent_shape=latent_shape, vocab=vocab)


class ToyCodec:
    """Exactly invertible pixel-space codec.

    Each RGB pixel maps to ``channels`` latent values through a seeded matrix
    with orthonormal columns, so ``decode(encode(x)) == x`` up to rounding.
    """

    def __init__(self, seed: int = 0, channels: int = 4):
        if channels < 3:
            raise ValueError("toy codec needs at least 3 latent channels")
        rng = np.random.default_rng([seed, 104729])
        q, _ = np.linalg.qr(rng.normal(size=(channels, 3)))
        self.basis = q
        self.channels = channels

    def latent_shape(self, image_shape) -> Tuple[int, int, int]:
        return (self.channels, image_shape[0], image_shape[1])

    def encode(self, image: np.ndarray) -> Latent:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {img.shape}")
        return Latent(np.einsum("ck,hwk->chw", self.basis, 2.0 * img - 1.0), 0)

    def decode(self, latent: Latent) -> np.ndarray:
        rgb = np.einsum("ck,chw->hwk", self.basis, latent.data.astype(np.float64))
        return np.clip((rgb + 1.0) / 2.0, 0.0, 1.0)

    tolerance = 1e-6


def sample_image(seed: int, size: Tuple[int, int] = (8, 8), blob: Optional[Tuple[int, int, int, int]] = None) -> np.ndarray:
    """Smooth random RGB test image with an optional bright rectangle ``(y0, x0, y1, x1)``."""
    rng = np.random.default_rng(seed)
    H, W = size
    base = rng.uniform(0.2, 0.5, size=3)
    grad = np.linspace(0.0, 0.2, W)[None, :, None]
    img = np.broadcast_to(base, (H, W, 3)) + grad + rng.normal(scale=0.02, size=(H, W, 3))
    if blob is not None:
        y0, x0, y1, x1 = blob
        img[y0:y1, x0:x1] = [0.9, 0.3, 0.2]
    return np.clip(img, 0.0, 1.0)
