"""Object-centric editing metrics: background-masked LPIPS, CLIP-O and CLIP-NO.

Scorers are pluggable. The stubs here (mean absolute difference and a seeded
hash table) keep the whole evaluation path runnable without model weights.
"""
import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from flexedit.constraints import ADD, KINDS, REMOVE
from flexedit.imageio import load_image
from flexedit.masks import EvalMasks, ProviderError, eval_masks


class NotApplicable(ValueError):
    """Metric undefined for this task kind."""


class MeanAbsDistance:
    """Perceptual-distance stub: mean absolute pixel difference."""

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


class HashScorer:
    """Deterministic image-text similarity stub.

    Looks up ``(image hash, text)`` in ``table`` first, otherwise derives a
    value in ``[0, 1]`` from a seeded hash.
    """

    def __init__(self, seed: int = 0, table: Optional[Dict] = None):
        self.seed = seed
        self.table = dict(table or {})

    @staticmethod
    def image_key(image: np.ndarray) -> str:
        arr = np.round(np.asarray(image, dtype=np.float64) * 255).astype(np.uint8)
        return hashlib.sha256(arr.tobytes() + str(arr.shape).encode()).hexdigest()

    def similarity(self, image: np.ndarray, text: str) -> float:
        key = (self.image_key(image), text)
        if key in self.table:
            return float(self.table[key])
        digest = hashlib.sha256(f"{self.seed}|{key[0]}|{text}".encode()).digest()
        return int.from_bytes(digest[:8], "little") / 2.0 ** 64


class ConstantScorer:
    def __init__(self, value: float):
        self.value = value

    def similarity(self, image, text) -> float:
        return self.value


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero pixels outside ``mask``; geometry is kept for patch-based scorers."""
    return np.asarray(image, dtype=np.float64) * (np.asarray(mask) > 0)[..., None]


def _clamp(s: float) -> float:
    return min(1.0, max(0.0, float(s)))


def masked_lpips(I: np.ndarray, I_star: np.ndarray, masks: EvalMasks, pd) -> float:
    if np.shape(I) != np.shape(I_star):
        raise ValueError(f"image sizes differ: {np.shape(I)} vs {np.shape(I_star)}")
    return float(pd.distance(apply_mask(I, masks.bg), apply_mask(I_star, masks.bg)))


def clip_o(I_star: np.ndarray, masks: EvalMasks, w_star: Optional[str], scorer) -> float:
    """Target-object presence, ``100 * CLIP(M_tgt * I*, w*)``."""
    if not w_star:
        raise NotApplicable("CLIP-O needs a target object")
    return 100.0 * _clamp(scorer.similarity(apply_mask(I_star, masks.tgt), w_star))


def clip_no(I_star: np.ndarray, masks: EvalMasks, w: Optional[str], scorer) -> float:
    """Source-object absence, ``100 * (1 - CLIP(M_src * I*, w))``."""
    if not w:
        raise NotApplicable("CLIP-NO needs a source object")
    return 100.0 * (1.0 - _clamp(scorer.similarity(apply_mask(I_star, masks.src), w)))


@dataclass
class SampleMetrics:
    id: str
    kind: str
    method: str
    lpips: Optional[float] = None
    clip_o: Optional[float] = None
    clip_no: Optional[float] = None
    error: Optional[str] = None


@dataclass
class MetricReport:
    samples: List[SampleMetrics] = field(default_factory=list)

    def aggregates(self) -> Dict[str, dict]:
        """Per-kind means over samples without errors."""
        out = {}
        for kind in KINDS:
            rows = [s for s in self.samples if s.kind == kind and s.error is None]
            if not rows:
                continue
            agg = {"count": len(rows)}
            for metric in ("lpips", "clip_o", "clip_no"):
                vals = [getattr(s, metric) for s in rows if getattr(s, metric) is not None]
                agg[metric] = float(np.mean(vals)) if vals else None
            out[kind] = agg
        return out

    def to_dict(self) -> dict:
        return {"samples": [asdict(s) for s in self.samples], "aggregates": self.aggregates()}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_scatter_csv(self, path) -> None:
        """One row per sample and applicable CLIP metric, for LPIPS-vs-CLIP trade-off plots."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "task", "id", "lpips", "clip_metric", "clip_value"])
            for s in self.samples:
                if s.error is not None:
                    continue
                for name in ("clip_o", "clip_no"):
                    value = getattr(s, name)
                    if value is not None:
                        writer.writerow([s.method, s.kind, s.id, repr(s.lpips), name, repr(value)])

    def summary_table(self) -> str:
        lines = [f"{'task':<10}{'n':>5}{'LPIPS↓':>12}{'CLIP-O↑':>12}{'CLIP-NO↑':>12}"]
        fmt = lambda v: f"{v:12.4f}" if v is not None else f"{'-':>12}"
        for kind, agg in self.aggregates().items():
            lines.append(f"{kind:<10}{agg['count']:>5}{fmt(agg['lpips'])}{fmt(agg['clip_o'])}{fmt(agg['clip_no'])}")
        failed = sum(1 for s in self.samples if s.error is not None)
        if failed:
            lines.append(f"{failed} sample(s) failed and are excluded")
        return "\n".join(lines)


def evaluate_sample(sample: dict, source_img: np.ndarray, edited_img: np.ndarray, pd, scorer, provider,
                    src_id: Optional[str] = None, edited_id: Optional[str] = None) -> SampleMetrics:
    kind = sample["task"]
    src_label = sample.get("source_object") if kind != ADD else None
    tgt_label = sample.get("target_object") if kind != REMOVE else None
    res = SampleMetrics(id=sample["id"], kind=kind, method=sample.get("method", "flexedit"))
    try:
        masks = eval_masks(source_img, edited_img, src_label, tgt_label, provider, src_id, edited_id)
    except ProviderError as exc:
        res.error = f"provider: {exc}"
        return res
    res.lpips = masked_lpips(source_img, edited_img, masks, pd)
    if kind != REMOVE:
        res.clip_o = clip_o(edited_img, masks, tgt_label, scorer)
    if kind != ADD:
        res.clip_no = clip_no(edited_img, masks, src_label, scorer)
    return res


def _image_id(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def read_manifest(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_benchmark(entries: Sequence[dict], pd, scorer, provider, base_dir: str = ".",
                  runner: Optional[Callable[[dict], tuple]] = None, workers: int = 1) -> MetricReport:
    """Evaluate every manifest entry; failures are recorded per sample.

    Entries carry ``source_image``/``edited_image`` paths (relative to
    ``base_dir``) unless ``runner`` returns ``(source, edited)`` arrays.
    """
    def one(entry):
        try:
            if runner is not None:
                src, edited = runner(entry)
                src_id, edited_id = f"{entry['id']}_source", f"{entry['id']}_edited"
            else:
                src_path = os.path.join(base_dir, entry["source_image"])
                edited_path = os.path.join(base_dir, entry["edited_image"])
                src, edited = load_image(src_path), load_image(edited_path)
                src_id, edited_id = _image_id(src_path), _image_id(edited_path)
            return evaluate_sample(entry, src, edited, pd, scorer, provider, src_id, edited_id)
        except Exception as exc:
            return SampleMetrics(id=str(entry.get("id")), kind=str(entry.get("task")),
                                 method=entry.get("method", "flexedit"), error=f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, entries))
    else:
        results = [one(e) for e in entries]
    return MetricReport(results)
