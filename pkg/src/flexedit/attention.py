"""Attention aggregation, self-attention refinement and dynamic object masks.

Cross-attention maps live on a coarse grid and self-attention on a fine grid
with twice the resolution. Refinement upsamples the coarse map, propagates it
``tau`` times through the averaged self-attention matrix and min-max
normalizes the result.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np


@dataclass
class AttentionRecord:
    """Per-layer attention captured from one denoiser pass.

    ``cross`` maps a token index to one 2-D coarse map per layer;
    ``self_attn`` holds one row-stochastic ``(P, P)`` matrix per layer where
    ``P`` is the number of fine pixels.
    """

    cross: Dict[int, List[np.ndarray]]
    self_attn: List[np.ndarray]
    timestep: int
    fine_shape: Tuple[int, int]
    tokens: Optional[List[str]] = None

    @property
    def coarse_shape(self) -> Tuple[int, int]:
        first = next(iter(self.cross.values()))
        return first[0].shape

    def token_index(self, token) -> int:
        if isinstance(token, (int, np.integer)):
            if int(token) not in self.cross:
                raise KeyError(f"token index {token} not present in attention record")
            return int(token)
        if self.tokens is None or token not in self.tokens:
            raise KeyError(f"token {token!r} not present in attention record")
        return self.tokens.index(token)


@dataclass
class AttentionGrad:
    """Gradient of a scalar w.r.t. the layer-averaged maps of a record."""

    cross: Dict[int, np.ndarray] = field(default_factory=dict)
    self_attn: Optional[np.ndarray] = None


@dataclass
class RefinedMap:
    values: np.ndarray
    token: int
    timestep: int
    raw: Optional[np.ndarray] = None


@dataclass
class DynamicMask:
    bits: np.ndarray
    token: int
    timestep: int


def average_maps(rec: AttentionRecord):
    """Layer-mean of every cross map and of the self-attention matrices."""
    if not rec.self_attn:
        raise ValueError("attention record has no self-attention layers")
    avg_cross = {}
    for j, layers in rec.cross.items():
        if not layers:
            raise ValueError(f"attention record has no cross-attention layers for token {j}")
        avg_cross[j] = np.mean(np.stack(layers), axis=0)
    avg_self = np.mean(np.stack(rec.self_attn), axis=0)
    return avg_cross, avg_self


def upsample_nearest(arr: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a 2-D array (also used for downsampling)."""
    h, w = arr.shape
    H, W = shape
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    return arr[rows[:, None], cols[None, :]]


def _upsample_adjoint(grad: np.ndarray, coarse_shape: Tuple[int, int]) -> np.ndarray:
    h, w = coarse_shape
    H, W = grad.shape
    rows = (np.arange(H) * h) // H
    cols = (np.arange(W) * w) // W
    out = np.zeros(coarse_shape, dtype=np.float64)
    np.add.at(out, (rows[:, None], cols[None, :]), grad)
    return out


def _fine_shape(avg_self: np.ndarray, fine_shape=None) -> Tuple[int, int]:
    n = avg_self.shape[0]
    if fine_shape is not None:
        if fine_shape[0] * fine_shape[1] != n:
            raise ValueError(f"fine shape {fine_shape} does not match self-attention size {n}")
        return tuple(fine_shape)
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise ValueError("cannot infer a square fine grid; pass fine_shape")
    return side, side


def min_max_normalize(y: np.ndarray) -> np.ndarray:
    lo, hi = y.min(), y.max()
    span = hi - lo
    if not span > 0:
        # constant map carries no object evidence
        return np.zeros_like(y)
    return (y - lo) / span


def _min_max_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    flat_y = y.ravel()
    lo_i, hi_i = int(np.argmin(flat_y)), int(np.argmax(flat_y))
    span = flat_y[hi_i] - flat_y[lo_i]
    if not span > 0:
        return np.zeros_like(y)
    n = (flat_y - flat_y[lo_i]) / span
    gf = g.ravel()
    out = gf / span
    out[lo_i] += (np.sum(gf * n) - np.sum(gf)) / span
    out[hi_i] -= np.sum(gf * n) / span
    return out.reshape(y.shape)


def propagate(avg_cross_j: np.ndarray, avg_self: np.ndarray, tau: int, fine_shape=None) -> np.ndarray:
    """Un-normalized refinement ``(A_self ** tau) @ upsample(A_cross)``."""
    if avg_self.ndim != 2 or avg_self.shape[0] != avg_self.shape[1]:
        raise ValueError(f"self-attention map must be square, got {avg_self.shape}")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    shape = _fine_shape(avg_self, fine_shape)
    v = upsample_nearest(np.asarray(avg_cross_j, dtype=np.float64), shape).ravel()
    for _ in range(int(tau)):
        v = avg_self @ v
    return v.reshape(shape)


def refine(avg_cross_j: np.ndarray, avg_self: np.ndarray, tau: int, token: int = -1,
           timestep: int = -1, fine_shape=None) -> RefinedMap:
    raw = propagate(avg_cross_j, avg_self, tau, fine_shape)
    return RefinedMap(values=min_max_normalize(raw), token=token, timestep=timestep, raw=raw)


def refine_backward(avg_cross_j: np.ndarray, avg_self: np.ndarray, tau: int, grad_values: np.ndarray,
                    fine_shape=None):
    """Vector-Jacobian product of :func:`refine` (normalized output).

    Returns ``(grad_cross, grad_self)`` shaped like the two inputs.
    """
    shape = _fine_shape(avg_self, fine_shape)
    v0 = upsample_nearest(np.asarray(avg_cross_j, dtype=np.float64), shape).ravel()
    # forward iterates v_k = S^k v0
    iterates = [v0]
    for _ in range(int(tau)):
        iterates.append(avg_self @ iterates[-1])
    g = _min_max_backward(iterates[-1].reshape(shape), grad_values).ravel()

    grad_self = np.zeros_like(avg_self, dtype=np.float64)
    # y = S v_{tau-1}; walk back accumulating outer products
    for k in range(int(tau) - 1, -1, -1):
        grad_self += np.outer(g, iterates[k])
        g = avg_self.T @ g
    grad_cross = _upsample_adjoint(g.reshape(shape), np.shape(avg_cross_j))
    return grad_cross, grad_self


def binarize(m: RefinedMap, beta: float) -> DynamicMask:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    return DynamicMask(bits=(m.values >= beta).astype(np.uint8), token=m.token, timestep=m.timestep)


def dynamic_mask(rec: AttentionRecord, token, tau: int, beta: float) -> DynamicMask:
    j = rec.token_index(token)
    avg_cross, avg_self = average_maps(rec)
    refined = refine(avg_cross[j], avg_self, tau, token=j, timestep=rec.timestep, fine_shape=rec.fine_shape)
    return binarize(refined, beta)
