"""Object geometry and the position, size and separation losses.

Hard dynamic masks are not differentiable, so losses used for latent
optimization are evaluated on a logistic relaxation of the refined map. Every
loss here comes with an analytic gradient w.r.t. the refined map values.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from flexedit.attention import upsample_nearest

REPLACE, ADD, REMOVE = "replace", "add", "remove"
KINDS = (REPLACE, ADD, REMOVE)


class EmptyObjectError(ValueError):
    pass


class ConstraintConfigError(ValueError):
    pass


@dataclass
class ObjectGeometry:
    """Centroid in pixel units ``(x, y)`` and size as a fraction of the grid."""

    centroid: Optional[Tuple[float, float]]
    size: float
    grid: Tuple[int, int]

    @property
    def normalized_centroid(self) -> Tuple[float, float]:
        """Centroid in ``[0, 1]`` using pixel-centre coordinates."""
        if self.centroid is None:
            raise EmptyObjectError("object mask is empty; centroid undefined")
        H, W = self.grid
        return ((self.centroid[0] + 0.5) / W, (self.centroid[1] + 0.5) / H)


@dataclass
class TargetSpec:
    """User targets; ``centroid_star`` is normalized ``(x, y)`` in ``[0, 1]``."""

    centroid_star: Optional[Tuple[float, float]] = None
    size_star: Optional[float] = None

    def __post_init__(self):
        if self.centroid_star is not None:
            self.centroid_star = tuple(float(c) for c in self.centroid_star)
            if len(self.centroid_star) != 2 or not all(0.0 <= c <= 1.0 for c in self.centroid_star):
                raise ValueError(f"centroid_star must be (x, y) in [0, 1], got {self.centroid_star}")
        if self.size_star is not None:
            self.size_star = float(self.size_star)
            if not 0.0 <= self.size_star <= 1.0:
                raise ValueError(f"size_star must lie in [0, 1], got {self.size_star}")

    @property
    def empty(self) -> bool:
        return self.centroid_star is None and self.size_star is None

    @classmethod
    def from_pixels(cls, x: float, y: float, width: int, height: int, size_star=None) -> "TargetSpec":
        return cls(((x + 0.5) / width, (y + 0.5) / height), size_star)


@dataclass
class ConstraintLosses:
    l_pos: float = 0.0
    l_size: float = 0.0
    l_sep: float = 0.0
    l_optim: float = 0.0


def soft_mask(values: np.ndarray, beta: float, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return expit((np.asarray(values, dtype=np.float64) - beta) / temperature)


def geometry(mask: np.ndarray, H: Optional[int] = None, W: Optional[int] = None) -> ObjectGeometry:
    """Mass-weighted centroid and relative size of a (soft) mask.

    The mask is nearest-resized to ``H x W`` first when a size is given. An
    empty mask yields ``size == 0`` and no centroid.
    """
    m = np.asarray(mask, dtype=np.float64)
    if H is not None and W is not None and m.shape != (H, W):
        m = upsample_nearest(m, (H, W))
    H, W = m.shape
    mass = m.sum()
    size = mass / (H * W)
    if not mass > 0:
        return ObjectGeometry(None, 0.0, (H, W))
    ys, xs = np.indices((H, W))
    return ObjectGeometry((float((xs * m).sum() / mass), float((ys * m).sum() / mass)), float(size), (H, W))


def loss_pos(geom: ObjectGeometry, spec: TargetSpec) -> float:
    if spec.centroid_star is None:
        return 0.0
    cx, cy = geom.normalized_centroid
    tx, ty = spec.centroid_star
    return (cx - tx) ** 2 + (cy - ty) ** 2


def loss_size(geom: ObjectGeometry, spec: TargetSpec) -> float:
    if spec.size_star is None:
        return 0.0
    return (geom.size - spec.size_star) ** 2


def _cosine(f: np.ndarray, g: np.ndarray) -> float:
    nf, ng = np.linalg.norm(f), np.linalg.norm(g)
    if nf == 0.0:
        return 0.0
    return float(f @ g / (nf * ng))


def loss_sep(target_soft: np.ndarray, existing) -> float:
    """Cosine similarity between a target map and existing object masks.

    ``existing`` is one mask or a sequence of masks; several masks are
    averaged pairwise.
    """
    f = np.ravel(target_soft).astype(np.float64)
    gs = _as_mask_list(existing)
    for g in gs:
        if g.size != f.size:
            raise ValueError(f"separation vectors differ in length: {f.size} vs {g.size}")
        if not np.any(g):
            raise ValueError("existing-object mask is empty")
    return float(np.mean([_cosine(f, g) for g in gs]))


def _as_mask_list(existing):
    if isinstance(existing, np.ndarray):
        existing = [existing]
    return [np.ravel(g).astype(np.float64) for g in existing]


def combine_losses(kind: str, l_pos: Optional[float] = None, l_size: Optional[float] = None,
                   l_sep: Optional[float] = None, has_existing: bool = True) -> ConstraintLosses:
    """Select the task's optimized loss; absent terms count as zero."""
    if kind == REMOVE:
        return ConstraintLosses(0.0, 0.0, 0.0, 0.0)
    if kind == REPLACE:
        pos, size = l_pos or 0.0, l_size or 0.0
        return ConstraintLosses(pos, size, 0.0, pos + size)
    if kind == ADD:
        if not has_existing:
            raise ConstraintConfigError("object addition needs at least one existing-object mask")
        sep = l_sep or 0.0
        return ConstraintLosses(0.0, 0.0, sep, sep)
    raise ConstraintConfigError(f"unknown task kind {kind!r}")


def _geometry_grads(s: np.ndarray):
    """Geometry of a soft mask plus gradients of (ncx, ncy, size) w.r.t. it."""
    H, W = s.shape
    mass = s.sum()
    ys, xs = np.indices((H, W))
    cx = (xs * s).sum() / mass
    cy = (ys * s).sum() / mass
    geom = ObjectGeometry((float(cx), float(cy)), float(mass / (H * W)), (H, W))
    d_ncx = (xs - cx) / mass / W
    d_ncy = (ys - cy) / mass / H
    d_size = np.full((H, W), 1.0 / (H * W))
    return geom, d_ncx, d_ncy, d_size


def _cosine_grad(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    nf, ng = np.linalg.norm(f), np.linalg.norm(g)
    if nf == 0.0:
        return np.zeros_like(f)
    return g / (nf * ng) - (f @ g) * f / (nf ** 3 * ng)


def constraint_loss_and_grad(values: np.ndarray, kind: str, target: Optional[TargetSpec] = None,
                             existing: Sequence[np.ndarray] = (), beta: float = 0.6,
                             temperature: float = 0.05):
    """Losses of one refined map and ``d l_optim / d values``."""
    values = np.asarray(values, dtype=np.float64)
    if kind == REMOVE:
        return combine_losses(kind), np.zeros_like(values)
    s = soft_mask(values, beta, temperature)
    ds = s * (1.0 - s) / temperature
    grad_s = np.zeros_like(values)
    if kind == REPLACE:
        target = target or TargetSpec()
        geom, d_ncx, d_ncy, d_size = _geometry_grads(s)
        l_pos = l_size = None
        if target.centroid_star is not None:
            l_pos = loss_pos(geom, target)
            ncx, ncy = geom.normalized_centroid
            tx, ty = target.centroid_star
            grad_s += 2.0 * (ncx - tx) * d_ncx + 2.0 * (ncy - ty) * d_ncy
        if target.size_star is not None:
            l_size = loss_size(geom, target)
            grad_s += 2.0 * (geom.size - target.size_star) * d_size
        return combine_losses(kind, l_pos=l_pos, l_size=l_size), grad_s * ds
    if kind == ADD:
        gs = _as_mask_list(existing)
        losses = combine_losses(kind, l_sep=loss_sep(s, gs) if gs else None, has_existing=bool(gs))
        f = s.ravel()
        for g in gs:
            grad_s += _cosine_grad(f, g).reshape(s.shape) / len(gs)
        return losses, grad_s * ds
    raise ConstraintConfigError(f"unknown task kind {kind!r}")
