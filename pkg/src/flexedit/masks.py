"""Dilation, the adaptive blending mask and the evaluation masks."""
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np
from scipy import ndimage

from flexedit.attention import DynamicMask, upsample_nearest


class MaskResolutionError(ValueError):
    pass


class ProviderError(RuntimeError):
    """Segmentation provider failed (timeout, bad response, missing file)."""


@dataclass
class SourceMask:
    bits: np.ndarray
    label: str

    def __post_init__(self):
        self.bits = (np.asarray(self.bits) > 0).astype(np.uint8)


@dataclass
class AdaptiveMask:
    bits: np.ndarray
    timestep: int


@dataclass
class EvalMasks:
    src: np.ndarray
    tgt: np.ndarray
    bg: np.ndarray


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a ``(2r+1) x (2r+1)`` square; pixels outside count as 0."""
    if radius < 0:
        raise ValueError("dilation radius must be non-negative")
    m = np.asarray(mask) > 0
    if radius == 0 or not m.any():
        return m.astype(np.uint8)
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_dilation(m, structure=structure).astype(np.uint8)


def resize_mask(mask: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    return upsample_nearest((np.asarray(mask) > 0).astype(np.uint8), shape)


def union(masks: Iterable[np.ndarray], shape: Tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        if m.shape != shape:
            raise MaskResolutionError(f"mask of shape {m.shape} does not match {shape}")
        out |= m > 0
    return out.astype(np.uint8)


def adaptive_mask(source_masks: Iterable[SourceMask], dynamic_masks: Iterable[DynamicMask], radius: int,
                  shape: Tuple[int, int], timestep: int = -1) -> AdaptiveMask:
    """Dilated union of source object masks and dynamic target masks at latent resolution."""
    parts = [s.bits for s in source_masks]
    parts += [resize_mask(d.bits, shape) for d in dynamic_masks]
    return AdaptiveMask(dilate(union(parts, shape), radius), timestep)


def eval_masks(src_img: np.ndarray, edited_img: np.ndarray, src_label: Optional[str], tgt_label: Optional[str],
               provider, src_id: Optional[str] = None, edited_id: Optional[str] = None) -> EvalMasks:
    """Source mask on the source image, target mask on the edited image, background as the complement.

    A missing label yields an empty mask. Provider failures propagate as
    :class:`ProviderError`.
    """
    shape = src_img.shape[:2]
    if edited_img.shape[:2] != shape:
        raise ValueError("source and edited images differ in size")
    src = _provider_mask(provider, src_img, src_label, src_id, shape)
    tgt = _provider_mask(provider, edited_img, tgt_label, edited_id, shape)
    bg = (1 - (src | tgt)).astype(np.uint8)
    return EvalMasks(src, tgt, bg)


def _provider_mask(provider, image, label, image_id, shape):
    if not label:
        return np.zeros(shape, dtype=np.uint8)
    mask = provider.segment(image, label, image_id)
    if mask is None:
        return np.zeros(shape, dtype=np.uint8)
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    if mask.shape != shape:
        raise ProviderError(f"provider returned a {mask.shape} mask for a {shape} image")
    return mask
