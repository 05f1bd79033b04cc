"""The FlexEdit block and the two-stage editing pipeline.

Each denoising step produces ``z'``; the block optimizes it against the task's
object constraints (``z''``) and blends the result with the recorded source
latent through the adaptive mask (``z*``). At checkpoint steps the pair is
repeated until the losses drop below that checkpoint's threshold.
"""
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from flexedit.attention import AttentionGrad, average_maps, dynamic_mask, refine, refine_backward
from flexedit.backend import (
    DEFAULT_GUIDANCE, DEFAULT_T, DenoiserBackend, Latent, LatentTrajectory, NoiseSchedule, TextEmbedding,
    ddim_denoise_step, forward_stage,
)
from flexedit.constraints import (
    ADD, KINDS, REMOVE, REPLACE, ConstraintConfigError, ConstraintLosses, TargetSpec, constraint_loss_and_grad,
)
from flexedit.masks import AdaptiveMask, SourceMask, adaptive_mask, resize_mask


class EditSpecError(ValueError):
    pass


class EditStageError(RuntimeError):
    """A pipeline stage failed; ``diagnostics`` holds whatever was recorded before."""

    def __init__(self, stage: str, message: str, diagnostics=None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.diagnostics = diagnostics or []


@dataclass
class EditSpec:
    """What to edit.

    ``source_tokens`` are the objects being replaced or removed; for addition
    ``existing_tokens`` name the objects the new one must stay apart from.
    """

    kind: str
    source_prompt: str
    target_prompt: str
    source_tokens: Tuple[str, ...] = ()
    target_tokens: Tuple[str, ...] = ()
    target_geometry: TargetSpec = field(default_factory=TargetSpec)
    existing_tokens: Tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        self.source_tokens = tuple(self.source_tokens)
        self.target_tokens = tuple(self.target_tokens)
        self.existing_tokens = tuple(self.existing_tokens)
        if isinstance(self.target_geometry, dict):
            self.target_geometry = TargetSpec(**self.target_geometry)
        if self.kind not in KINDS:
            raise EditSpecError(f"unknown edit kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == REPLACE and not (self.source_tokens and self.target_tokens):
            raise EditSpecError("replacement needs source and target tokens")
        if self.kind == ADD and not self.target_tokens:
            raise EditSpecError("addition needs target tokens")
        if self.kind == REMOVE and (not self.source_tokens or self.target_tokens):
            raise EditSpecError("removal needs source tokens and no target tokens")

    def to_dict(self):
        d = asdict(self)
        d["source_tokens"] = list(self.source_tokens)
        d["target_tokens"] = list(self.target_tokens)
        d["existing_tokens"] = list(self.existing_tokens)
        return d


@dataclass
class EditConfig:
    tau: int = 4
    beta: float = 0.6
    T: int = DEFAULT_T
    guidance: float = DEFAULT_GUIDANCE
    alpha_start: float = 20.0
    alpha_end: float = 10.0
    checkpoint_steps: Tuple[int, ...] = (1, 10, 15, 20)
    geom_thresholds: Tuple[float, ...] = (0.4, 0.2, 0.1, 0.05)
    sep_thresholds: Tuple[float, ...] = (0.8, 0.5, 0.3, 0.1)
    max_inner_iters: int = 20
    dilation_radius: int = 1
    soft_temperature: float = 0.05

    def __post_init__(self):
        self.checkpoint_steps = tuple(int(s) for s in self.checkpoint_steps)
        self.geom_thresholds = tuple(float(v) for v in self.geom_thresholds)
        self.sep_thresholds = tuple(float(v) for v in self.sep_thresholds)
        self.validate()

    def validate(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.max_inner_iters < 1:
            raise ValueError("max_inner_iters must be at least 1")
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be non-negative")
        if self.soft_temperature <= 0:
            raise ValueError("soft_temperature must be positive")
        steps = self.checkpoint_steps
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("checkpoint_steps must be strictly increasing")
        if steps and (steps[0] < 1 or steps[-1] > self.T):
            raise ValueError(f"checkpoint_steps must lie in [1, T={self.T}]")
        for name in ("geom_thresholds", "sep_thresholds"):
            vals = getattr(self, name)
            if len(vals) != len(steps):
                raise ValueError(f"{name} needs one value per checkpoint step")
            if any(b >= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly decreasing")

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.T, guidance_scale=self.guidance)

    def checkpoint_index(self, step_index: int) -> Optional[int]:
        try:
            return self.checkpoint_steps.index(step_index)
        except ValueError:
            return None

    def to_dict(self):
        d = asdict(self)
        for k in ("checkpoint_steps", "geom_thresholds", "sep_thresholds"):
            d[k] = list(d[k])
        return d


@dataclass
class StepReport:
    losses: ConstraintLosses
    alpha: float = 0.0
    grad_norm: float = 0.0
    stepped: bool = False
    converged: bool = False
    error: Optional[str] = None


@dataclass
class StepSnapshot:
    timestep: int
    step_index: int
    latent: Latent
    mask: AdaptiveMask
    dynamic: Dict[str, np.ndarray]


@dataclass
class EditResult:
    edited_image: Optional[np.ndarray]
    final_latent: Latent
    diagnostics: List[dict]
    steps: List[StepSnapshot]
    trajectory: LatentTrajectory
    source_masks: List[SourceMask]


def alpha_schedule(t: int, cfg: EditConfig) -> float:
    """Gradient step size, linear from ``alpha_end`` at t=0 to ``alpha_start`` at t=T."""
    if not 0 <= t <= cfg.T:
        raise ValueError(f"timestep {t} outside [0, {cfg.T}]")
    return cfg.alpha_end + (cfg.alpha_start - cfg.alpha_end) * (t / cfg.T)


class ObjectLossBuilder:
    """Maps an attention record to ``(l_optim, AttentionGrad)`` for the target tokens.

    Losses of several target tokens are summed; the per-term totals of the last
    call are kept in :attr:`losses`.
    """

    def __init__(self, kind: str, token_ids: Sequence[int], cfg: EditConfig,
                 target: Optional[TargetSpec] = None, existing: Sequence[np.ndarray] = ()):
        self.kind = kind
        self.token_ids = list(token_ids)
        self.cfg = cfg
        self.target = target
        self.existing = list(existing)
        self.losses = ConstraintLosses()

    def __call__(self, rec):
        cfg = self.cfg
        avg_cross, avg_self = average_maps(rec)
        existing = [resize_mask(m, rec.fine_shape) for m in self.existing]
        total = ConstraintLosses()
        grad = AttentionGrad(cross={}, self_attn=np.zeros_like(avg_self))
        for j in self.token_ids:
            refined = refine(avg_cross[j], avg_self, cfg.tau, token=j, fine_shape=rec.fine_shape)
            losses, g_values = constraint_loss_and_grad(
                refined.values, self.kind, self.target, existing, cfg.beta, cfg.soft_temperature)
            g_cross, g_self = refine_backward(avg_cross[j], avg_self, cfg.tau, g_values, fine_shape=rec.fine_shape)
            grad.cross[j] = g_cross
            grad.self_attn += g_self
            total.l_pos += losses.l_pos
            total.l_size += losses.l_size
            total.l_sep += losses.l_sep
            total.l_optim += losses.l_optim
        self.losses = total
        return total.l_optim, grad


def losses_converged(kind: str, losses: ConstraintLosses, target: TargetSpec, cfg: EditConfig, idx: int) -> bool:
    if kind == REPLACE:
        thr = cfg.geom_thresholds[idx]
        checks = []
        if target.centroid_star is not None:
            checks.append(losses.l_pos <= thr)
        if target.size_star is not None:
            checks.append(losses.l_size <= thr)
        return all(checks)
    if kind == ADD:
        return losses.l_sep <= cfg.sep_thresholds[idx]
    return True


def _target_ids(spec: EditSpec, text: TextEmbedding) -> List[int]:
    return [text.index(tok) for tok in spec.target_tokens]


def optimize_latent(z_prime: Latent, spec: EditSpec, cfg: EditConfig, backend: DenoiserBackend,
                    text: Optional[TextEmbedding] = None, existing: Sequence[np.ndarray] = (),
                    alpha: Optional[float] = None, checkpoint: Optional[int] = None):
    """One gradient step ``z'' = z' - alpha * grad(l_optim)``.

    Returns ``(latent, StepReport)``. Removal never steps. At a checkpoint the
    step is skipped when the losses already meet its threshold. A non-finite
    gradient leaves the latent unchanged and is reported.
    """
    if alpha is None:
        alpha = alpha_schedule(z_prime.timestep, cfg)
    if spec.kind == REMOVE:
        return z_prime, StepReport(ConstraintLosses(), alpha=alpha, converged=True)
    if text is None:
        text = backend.encode_text(spec.target_prompt)
    if spec.kind == ADD and not len(existing):
        raise ConstraintConfigError("object addition needs at least one existing-object mask")
    builder = ObjectLossBuilder(spec.kind, _target_ids(spec, text), cfg, spec.target_geometry, existing)
    _, grad = backend.gradient_oracle(builder, z_prime, text)
    report = StepReport(builder.losses, alpha=alpha)
    if checkpoint is not None and losses_converged(spec.kind, builder.losses, spec.target_geometry, cfg, checkpoint):
        report.converged = True
        return z_prime, report
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        report.error = "non-finite gradient"
        return z_prime, report
    report.grad_norm = float(np.linalg.norm(grad))
    if report.grad_norm == 0.0 or alpha == 0.0:
        return z_prime, report
    report.stepped = True
    return Latent(z_prime.data.astype(np.float64) - alpha * grad, z_prime.timestep), report


def blend_latent(z_dd: Latent, z_src: Latent, m_hat) -> Latent:
    """Keep ``z_dd`` inside the mask and the source latent outside it."""
    if z_dd.timestep != z_src.timestep:
        raise ValueError(f"cannot blend latents at timesteps {z_dd.timestep} and {z_src.timestep}")
    if z_dd.shape != z_src.shape:
        raise ValueError("cannot blend latents of different shapes")
    bits = m_hat.bits if isinstance(m_hat, AdaptiveMask) else np.asarray(m_hat)
    if bits.shape != z_dd.shape[1:]:
        raise ValueError(f"mask shape {bits.shape} does not match latent spatial shape {z_dd.shape[1:]}")
    return Latent(np.where(bits[None, :, :] > 0, z_dd.data, z_src.data), z_dd.timestep)


def target_masks(z: Latent, spec: EditSpec, cfg: EditConfig, backend: DenoiserBackend, text: TextEmbedding):
    if not spec.target_tokens:
        return {}
    rec = backend.attention(z, z.timestep, text)
    return {tok: dynamic_mask(rec, text.index(tok), cfg.tau, cfg.beta) for tok in spec.target_tokens}


def flexedit_block(z_in: Latent, z_src_t: Latent, spec: EditSpec, cfg: EditConfig, backend: DenoiserBackend,
                   source_masks: Sequence[SourceMask], step_index: int, text: Optional[TextEmbedding] = None,
                   existing: Sequence[np.ndarray] = ()):
    """Optimize-then-blend, iterated at checkpoint steps.

    Returns ``(latent, records, snapshot)``; one diagnostics record is emitted
    per inner iteration.
    """
    if text is None:
        text = backend.encode_text(spec.target_prompt)
    idx = cfg.checkpoint_index(step_index)
    is_checkpoint = idx is not None and spec.kind != REMOVE
    max_iters = cfg.max_inner_iters if is_checkpoint else 1
    shape = z_in.shape[1:]
    alpha = alpha_schedule(z_in.timestep, cfg)

    z = z_in
    records = []
    snapshot = None
    for it in range(1, max_iters + 1):
        z_opt, report = optimize_latent(z, spec, cfg, backend, text, existing, alpha=alpha,
                                        checkpoint=idx if is_checkpoint else None)
        dyn = target_masks(z_opt, spec, cfg, backend, text)
        m_hat = adaptive_mask(source_masks, list(dyn.values()), cfg.dilation_radius, shape, z_in.timestep)
        z = blend_latent(z_opt, z_src_t, m_hat)
        records.append({
            "step_index": step_index,
            "timestep": z_in.timestep,
            "iteration": it,
            "checkpoint": is_checkpoint,
            "threshold": _threshold(spec.kind, cfg, idx) if is_checkpoint else None,
            "alpha": alpha,
            "l_pos": report.losses.l_pos,
            "l_size": report.losses.l_size,
            "l_sep": report.losses.l_sep,
            "l_optim": report.losses.l_optim,
            "converged": report.converged,
            "optimizer_steps": int(report.stepped),
            "grad_norm": report.grad_norm,
            "adaptive_mask_area": int(m_hat.bits.sum()),
            "dynamic_mask_area": {tok: int(d.bits.sum()) for tok, d in dyn.items()},
            "error": report.error,
        })
        snapshot = StepSnapshot(z_in.timestep, step_index, z, m_hat, {tok: d.bits for tok, d in dyn.items()})
        if not is_checkpoint or report.converged:
            break
    return z, records, snapshot


def _threshold(kind: str, cfg: EditConfig, idx: int) -> Optional[float]:
    if kind == REPLACE:
        return cfg.geom_thresholds[idx]
    if kind == ADD:
        return cfg.sep_thresholds[idx]
    return None


def collect_source_masks(labels: Sequence[str], source_image, provider, image_id, shape) -> List[SourceMask]:
    masks = []
    for label in labels:
        bits = provider.segment(source_image, label, image_id) if provider is not None else None
        if bits is None:
            bits = np.zeros(shape, dtype=np.uint8)
        masks.append(SourceMask(resize_mask(bits, shape), label))
    return masks


def edit(source: Union[np.ndarray, Latent, LatentTrajectory], spec: EditSpec, cfg: EditConfig,
         backend: DenoiserBackend, codec=None, seg_provider=None, image_id: Optional[str] = None,
         source_masks: Optional[Sequence[SourceMask]] = None) -> EditResult:
    """Invert (or replay) the source, then denoise from a clone of ``z_T`` through FlexEdit blocks.

    ``source`` is an RGB image (needs ``codec``), a clean latent, or a
    recorded trajectory of a synthetic image.
    """
    diagnostics: List[dict] = []
    sched = cfg.schedule()
    try:
        src_text = backend.encode_text(spec.source_prompt)
        tgt_text = backend.encode_text(spec.target_prompt)
        uncond = backend.encode_text("")
        for tok in spec.target_tokens:
            tgt_text.index(tok)
    except KeyError as exc:
        raise EditStageError("spec", str(exc)) from exc

    try:
        if isinstance(source, np.ndarray):
            if codec is None:
                raise ValueError("a codec is required to edit an image")
            source_image = source
            source = codec.encode(source)
        else:
            source_image = None
        traj = forward_stage(source, backend, sched, src_text)
        if source_image is None and codec is not None:
            source_image = codec.decode(traj[0])
    except Exception as exc:
        raise EditStageError("forward", str(exc)) from exc

    shape = traj.shape[1:]
    try:
        if source_masks is None:
            source_masks = collect_source_masks(spec.source_tokens, source_image, seg_provider, image_id, shape)
        existing_masks = collect_source_masks(spec.existing_tokens, source_image, seg_provider, image_id, shape)
        existing = [m.bits for m in existing_masks if m.bits.any()]
    except Exception as exc:
        raise EditStageError("segmentation", str(exc)) from exc
    if spec.kind == ADD and not existing:
        raise EditStageError("spec", "object addition needs at least one existing-object mask")

    z = traj[sched.T].copy()
    steps: List[StepSnapshot] = []
    try:
        for t in range(sched.T, 0, -1):
            step_index = sched.T - t + 1
            eps, _ = backend.guided_noise(z, t, tgt_text, uncond, cfg.guidance)
            z_prime = ddim_denoise_step(z, eps, sched, t)
            z, records, snap = flexedit_block(z_prime, traj[t - 1], spec, cfg, backend, source_masks, step_index,
                                              tgt_text, existing)
            diagnostics.extend(records)
            steps.append(snap)
    except Exception as exc:
        raise EditStageError("edit", str(exc), diagnostics) from exc

    image = codec.decode(z) if codec is not None else None
    return EditResult(image, z, diagnostics, steps, traj, list(source_masks))


def write_diagnostics(path, diagnostics: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in diagnostics:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_manifest(path, spec: EditSpec, cfg: EditConfig, seed: int, inputs: Dict[str, str],
                   image_path: str, diagnostics_path: str, extra: Optional[dict] = None) -> dict:
    manifest = {
        "spec": spec.to_dict(),
        "config": cfg.to_dict(),
        "seed": seed,
        "inputs": inputs,
        "output_image": os.path.basename(image_path),
        "diagnostics": os.path.basename(diagnostics_path),
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
