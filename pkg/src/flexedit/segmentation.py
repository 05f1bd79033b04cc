"""Segmentation providers returning a binary mask for ``(image, label)``.

Providers are looked up by image id so tests can run from PNG fixtures laid
out as ``<root>/masks/<image_id>/<label>.png``.
"""
import io
import json
import os
import threading
import urllib.error
import urllib.request
from typing import Dict, Optional, Tuple

import numpy as np
from PIL import Image

from flexedit.imageio import load_mask
from flexedit.masks import ProviderError

FIXTURES_ENV = "FLEXEDIT_FIXTURES"


def fixtures_root(default=None) -> Optional[str]:
    return os.environ.get(FIXTURES_ENV, default)


class FixtureProvider:
    """Masks read from ``<root>/masks/<image_id>/<label>.png``.

    A missing label file means the object is absent (empty mask); a missing
    image directory is a provider failure.
    """

    def __init__(self, root):
        self.root = root

    def segment(self, image, label: str, image_id: Optional[str] = None):
        if image_id is None:
            raise ProviderError("fixture provider needs an image id")
        folder = os.path.join(self.root, "masks", image_id)
        if not os.path.isdir(folder):
            raise ProviderError(f"no fixture masks for image {image_id!r} under {self.root}")
        path = os.path.join(folder, f"{label}.png")
        if not os.path.exists(path):
            return None
        return load_mask(path)


class DictProvider:
    """In-memory provider keyed by ``(image_id, label)``; a ``None`` value signals failure."""

    def __init__(self, masks: Dict[Tuple[str, str], Optional[np.ndarray]]):
        self.masks = masks

    def segment(self, image, label: str, image_id: Optional[str] = None):
        key = (image_id, label)
        if key not in self.masks:
            return None
        mask = self.masks[key]
        if mask is None:
            raise ProviderError(f"segmentation failed for {key}")
        return mask


class HttpSegmentationProvider:
    """Client for an external grounded-segmentation service.

    POSTs ``{"image_path": ..., "label": ...}`` as JSON and expects a
    single-channel PNG body. Requests are serialized per instance.
    """

    def __init__(self, url: str, timeout: float = 30.0, image_dir: Optional[str] = None):
        self.url = url
        self.timeout = timeout
        self.image_dir = image_dir
        self._lock = threading.Lock()

    def _image_path(self, image_id):
        if self.image_dir is None:
            return image_id
        return os.path.join(self.image_dir, f"{image_id}.png")

    def segment(self, image, label: str, image_id: Optional[str] = None):
        body = json.dumps({"image_path": self._image_path(image_id), "label": label}).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        with self._lock:
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    if resp.status != 200:
                        raise ProviderError(f"segmentation service returned HTTP {resp.status}")
                    payload = resp.read()
            except urllib.error.HTTPError as exc:
                raise ProviderError(f"segmentation service returned HTTP {exc.code}") from exc
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                raise ProviderError(f"segmentation request failed: {exc}") from exc
        try:
            with Image.open(io.BytesIO(payload)) as im:
                mask = (np.asarray(im.convert("L")) > 127).astype(np.uint8)
        except Exception as exc:
            raise ProviderError("segmentation service did not return a PNG mask") from exc
        return mask if mask.any() else None
