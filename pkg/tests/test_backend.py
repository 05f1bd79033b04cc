import json
import types

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexedit.attention import AttentionGrad, average_maps
from flexedit.backend import (
    DenoiserBackend, Latent, LatentTrajectory, NoiseSchedule, ScheduleRangeError, TrajectoryError,
    ddim_denoise_step, ddim_invert_step, denoise_with_noises, finite_difference_gradient, forward_stage,
)
from flexedit.toy import ToyBackend, toy_backend

from conftest import relative_error


def raw_schedule(*alpha_bar):
    # bypasses NoiseSchedule validation for degenerate schedules
    return types.SimpleNamespace(T=len(alpha_bar) - 1, alpha_bar=np.array(alpha_bar, dtype=np.float64))


def scalar(v, t):
    return Latent(np.full((1, 1, 1), v), t)


def test_invert_degenerate_schedule_is_fixed_point():
    z = Latent(np.random.default_rng(0).normal(size=(2, 4, 4)), 0)
    out = ddim_invert_step(z, np.zeros(z.shape), raw_schedule(1.0, 0.6, 0.6), 1)
    assert np.array_equal(out.data, z.data)
    assert out.timestep == 2


def test_invert_closed_form():
    out = ddim_invert_step(scalar(1.0, 0), np.zeros((1, 1, 1)), raw_schedule(1.0, 0.5), 0)
    assert out.data.item() == pytest.approx(np.sqrt(0.5), abs=1e-7)


def test_denoise_closed_form():
    out = ddim_denoise_step(scalar(np.sqrt(0.5), 1), np.zeros((1, 1, 1)), raw_schedule(1.0, 0.5), 1)
    assert out.data.item() == pytest.approx(1.0, abs=1e-6)
    assert out.timestep == 0


def test_denoise_degenerate_schedule_is_identity():
    z = Latent(np.random.default_rng(1).normal(size=(2, 4, 4)), 2)
    out = ddim_denoise_step(z, np.zeros(z.shape), raw_schedule(1.0, 0.7, 0.7), 2)
    assert np.array_equal(out.data, z.data)


def test_step_round_trip_random():
    rng = np.random.default_rng(2)
    sched = NoiseSchedule.linear(50)
    for t in (0, 10, 25, 49):
        z = Latent(rng.normal(size=(4, 8, 8)), t)
        eps = rng.normal(size=(4, 8, 8)).astype(np.float32)
        back = ddim_denoise_step(ddim_invert_step(z, eps, sched, t), eps, sched, t + 1)
        assert np.abs(back.data - z.data).max() <= 1e-5
        assert back.timestep == t


@settings(max_examples=60, deadline=None)
@given(a_hi=st.floats(1e-3, 1.0), frac=st.floats(1e-3, 0.999), seed=st.integers(0, 2 ** 16))
def test_round_trip_any_schedule(a_hi, frac, seed):
    a_lo = max(1e-3, a_hi * frac)
    if a_lo >= a_hi:
        return
    sched = raw_schedule(a_hi, a_lo)
    rng = np.random.default_rng(seed)
    z = Latent(np.clip(rng.normal(size=(4, 8, 8)), -3, 3), 0)
    eps = np.clip(rng.normal(size=(4, 8, 8)), -3, 3).astype(np.float32)
    back = ddim_denoise_step(ddim_invert_step(z, eps, sched, 0), eps, sched, 1)
    assert np.abs(back.data - z.data).max() <= 1e-5


def test_step_errors():
    sched = NoiseSchedule.linear(5)
    z = Latent(np.zeros((1, 4, 4)), 5)
    with pytest.raises(ValueError):
        ddim_invert_step(Latent(np.zeros((1, 4, 4)), 0), np.zeros((1, 4, 8)), sched, 0)
    with pytest.raises(ScheduleRangeError):
        ddim_invert_step(z, np.zeros(z.shape), sched, 5)
    with pytest.raises(ScheduleRangeError):
        ddim_denoise_step(Latent(np.zeros((1, 4, 4)), 0), np.zeros((1, 4, 4)), sched, 0)


def test_schedule_contract():
    s = NoiseSchedule.linear(50)
    assert s.alpha_bar.shape == (51,)
    assert s.alpha_bar[0] == pytest.approx(1.0, abs=1e-6)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.guidance_scale == 7.5
    with pytest.raises(ValueError):
        NoiseSchedule(2, np.array([1.0, 0.5, 0.5]))
    with pytest.raises(ValueError):
        NoiseSchedule(2, np.array([0.9, 0.5, 0.2]))


def test_latent_rejects_non_finite():
    with pytest.raises(ValueError):
        Latent(np.array([[[np.nan]]]), 0)


def test_forward_stage_passes_recording_through(backend):
    sched = NoiseSchedule.linear(4)
    rec = LatentTrajectory([Latent(np.full((4, 8, 8), t, dtype=np.float32), t) for t in range(5)])
    out = forward_stage(rec, backend, sched, backend.encode_text("a car"))
    assert out is rec


def test_forward_stage_rejects_incomplete_recording(backend):
    sched = NoiseSchedule.linear(4)
    rec = LatentTrajectory([Latent(np.zeros((4, 8, 8)), t) for t in (0, 1, 3)])
    with pytest.raises(TrajectoryError, match=r"\[2, 4\]"):
        forward_stage(rec, backend, sched, backend.encode_text("a car"))


def test_forward_stage_length_and_order(backend, codec, image):
    sched = NoiseSchedule.linear(10)
    traj = forward_stage(codec.encode(image), backend, sched, backend.encode_text("a photo of car"))
    assert len(traj) == 11
    assert [z.timestep for z in traj.latents] == list(range(11))


def test_forward_stage_same_noise_round_trip(backend, codec, image):
    sched = NoiseSchedule.linear(10)
    z0 = codec.encode(image)
    traj = forward_stage(z0, backend, sched, backend.encode_text("a photo of car"))
    back = denoise_with_noises(traj[10], traj.noises, sched)
    assert np.abs(back.data - z0.data).max() <= 1e-4


def test_forward_stage_deterministic(codec, image):
    sched = NoiseSchedule.linear(10)
    runs = []
    for _ in range(2):
        b = ToyBackend(seed=3)
        runs.append(forward_stage(codec.encode(image), b, sched, b.encode_text("a photo of car")))
    for a, b in zip(*[r.latents for r in runs]):
        assert np.array_equal(a.data, b.data)


def test_toy_determinism():
    z = Latent(np.random.default_rng(4).normal(size=(4, 8, 8)), 3)
    outs = []
    for _ in range(2):
        b = toy_backend(7, (4, 8, 8), ["car"])
        eps, rec = b.predict_noise(z, 3, b.encode_text("a car on street"))
        outs.append((eps, rec))
    assert outs[0][0].tobytes() == outs[1][0].tobytes()
    assert np.array_equal(outs[0][1].self_attn[0], outs[1][1].self_attn[0])


def test_toy_attention_row_stochastic(backend):
    z = Latent(np.random.default_rng(5).normal(size=(4, 8, 8)), 3)
    text = backend.encode_text("a photo of car on street")
    _, rec = backend.predict_noise(z, 3, text)
    for s in rec.self_attn:
        assert s.shape == (64, 64)
        assert np.allclose(s.sum(axis=1), 1.0, atol=1e-4)
    per_layer = np.stack([np.stack([rec.cross[j][l] for j in rec.cross]) for l in range(2)])
    assert per_layer.shape == (2, len(text.tokens), 4, 4)
    assert np.allclose(per_layer.sum(axis=1), 1.0, atol=1e-4)
    assert per_layer.min() >= 0 and per_layer.max() <= 1


def test_toy_requires_divisible_by_four():
    with pytest.raises(ValueError):
        ToyBackend(latent_shape=(4, 6, 8))


def test_finite_difference_gradient_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = finite_difference_gradient(lambda v: float(np.sum(v ** 3)), x, 1e-3)
    assert np.allclose(g, 3 * x ** 2, atol=1e-5)


def _linear_probe_loss(rng, n_tokens):
    wc = {j: rng.normal(size=(4, 4)) for j in range(n_tokens)}
    ws = rng.normal(size=(64, 64))

    def loss(rec):
        avg_cross, avg_self = average_maps(rec)
        value = sum(float((wc[j] * avg_cross[j]).sum()) for j in avg_cross) + float((ws * avg_self).sum())
        return value, AttentionGrad(cross=wc, self_attn=ws)

    return loss


def test_toy_gradient_oracle_matches_finite_differences(backend):
    rng = np.random.default_rng(6)
    text = backend.encode_text("a photo of car on street")
    for _ in range(16):
        z = Latent(rng.normal(size=(4, 8, 8)), int(rng.integers(0, 50)))
        loss = _linear_probe_loss(rng, len(text.tokens))
        value, grad = backend.gradient_oracle(loss, z, text)
        fd_value, fd_grad = DenoiserBackend.gradient_oracle(backend, loss, z, text)
        assert value == pytest.approx(fd_value, rel=1e-12)
        assert relative_error(grad, fd_grad) <= 1e-3


def test_gradient_oracle_falls_back_without_attention_grad(backend):
    rng = np.random.default_rng(8)
    text = backend.encode_text("a car")
    z = Latent(rng.normal(size=(4, 8, 8)), 1)
    loss = _linear_probe_loss(rng, len(text.tokens))
    _, grad = backend.gradient_oracle(lambda rec: loss(rec)[0], z, text)
    _, analytic = backend.gradient_oracle(loss, z, text)
    assert relative_error(grad, analytic) <= 1e-3


def test_trajectory_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    traj = LatentTrajectory([Latent(rng.normal(size=(4, 8, 8)), t) for t in range(4)], seed=11)
    traj.save(tmp_path / "traj")
    meta = json.loads((tmp_path / "traj" / "meta.json").read_text())
    assert meta == {"T": 3, "shape": [4, 8, 8], "dtype": "f32", "byte_order": "little-endian", "seed": 11}
    raw = np.fromfile(tmp_path / "traj" / "z_2.bin", dtype="<f4").reshape(4, 8, 8)
    assert np.array_equal(raw, traj[2].data)
    back = LatentTrajectory.load(tmp_path / "traj")
    assert back.seed == 11
    for a, b in zip(traj.latents, back.latents):
        assert np.array_equal(a.data, b.data) and a.timestep == b.timestep


def test_trajectory_load_reports_missing_steps(tmp_path):
    traj = LatentTrajectory([Latent(np.zeros((4, 8, 8)), t) for t in range(4)])
    traj.save(tmp_path / "traj")
    (tmp_path / "traj" / "z_1.bin").unlink()
    with pytest.raises(TrajectoryError, match=r"\[1\]"):
        LatentTrajectory.load(tmp_path / "traj")


def test_toy_codec_is_invertible(codec, image):
    z = codec.encode(image)
    assert z.shape == (4, 8, 8) and z.timestep == 0
    assert np.abs(codec.decode(z) - image).max() <= codec.tolerance
