import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from ctsynth.codec import LatentVolume
from ctsynth.conditioning import ConditioningTensor, null_conditioning
from ctsynth.config import DenoiserConfig, DiffusionConfig
from ctsynth.diffusion import (
    CfgParams,
    cfg_combine,
    draw_initial_latent,
    drop_conditioning,
    evaluate_flow_loss,
    flow_matching_loss,
    forward_interpolate,
    load_diffusion_checkpoint,
    make_schedule,
    sample_latent,
    save_diffusion_checkpoint,
    train_latent_diffusion,
    training_step,
    velocity_target,
)
from ctsynth.errors import ContractError, TrainingDivergedError, ValidationError
from ctsynth.unet import ConditionalUNet3D, timestep_embedding

TINY_DENOISER = DenoiserConfig(channel_widths=(8, 16), num_heads=8, time_embed_dim=8)


def tiny_cfg(**overrides) -> DiffusionConfig:
    params = dict(denoiser=TINY_DENOISER, lr=1e-3, batch_size=2, total_steps=5, seed=0)
    params.update(overrides)
    return DiffusionConfig(**params)


def rand_latents(n=2, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(n, 4, 4, 4, 2, generator=gen)


def rand_contexts(n=2, seed=1):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, 2560, generator=gen)


class TestSchedule:
    def test_grid_excludes_zero_includes_one(self):
        s = make_schedule(1000)
        assert s.timesteps.shape == (1000,)
        assert float(s.timesteps[0]) == pytest.approx(1e-3)
        assert float(s.timesteps[-1]) == 1.0
        assert float(s.timesteps.min()) > 0.0

    def test_grid_matches_oracle(self):
        s = make_schedule(16)
        expected = np.arange(1, 17) / 16.0
        np.testing.assert_allclose(s.timesteps.numpy(), expected, rtol=1e-7)

    def test_sampled_t_lies_on_grid(self):
        s = make_schedule(10)
        t = s.sample_t(256, torch.Generator().manual_seed(0))
        assert set(t.tolist()) <= set(s.timesteps.tolist())

    def test_sample_t_seeded(self):
        s = make_schedule(1000)
        a = s.sample_t(32, torch.Generator().manual_seed(5))
        b = s.sample_t(32, torch.Generator().manual_seed(5))
        assert torch.equal(a, b)

    def test_rejects_bad_count(self):
        with pytest.raises(ValidationError):
            make_schedule(0)


class TestCfgParams:
    def test_defaults(self):
        p = CfgParams()
        assert p.scale == 1.0
        assert p.drop_probability == 0.15

    def test_rejects_negative_scale(self):
        with pytest.raises(ValidationError, match="scale"):
            CfgParams(scale=-0.5)

    def test_rejects_nonfinite_scale(self):
        with pytest.raises(ValidationError, match="scale"):
            CfgParams(scale=float("nan"))

    def test_rejects_bad_drop_probability(self):
        with pytest.raises(ValidationError, match="drop_probability"):
            CfgParams(drop_probability=-0.1)


class TestForwardInterpolate:
    def test_t_zero_is_bitwise_x0(self):
        x0, noise = rand_latents(1), rand_latents(1, seed=9)
        assert forward_interpolate(x0, noise, 0.0) is x0

    def test_t_one_is_bitwise_noise(self):
        x0, noise = rand_latents(1), rand_latents(1, seed=9)
        assert forward_interpolate(x0, noise, 1.0) is noise

    def test_midpoint(self):
        x0 = torch.zeros(2, 3)
        noise = torch.full((2, 3), 4.0)
        assert torch.equal(forward_interpolate(x0, noise, 0.5), torch.full((2, 3), 2.0))

    def test_batched_t_matches_per_sample_oracle(self):
        x0, noise = rand_latents(3), rand_latents(3, seed=9)
        t = torch.tensor([0.25, 0.5, 0.75])
        batched = forward_interpolate(x0, noise, t)
        for i in range(3):
            single = (1 - t[i]) * x0[i] + t[i] * noise[i]
            assert torch.allclose(batched[i], single)

    def test_rejects_t_outside_unit_interval(self):
        x0, noise = rand_latents(1), rand_latents(1, seed=9)
        with pytest.raises(ValidationError, match="t must lie"):
            forward_interpolate(x0, noise, 1.5)
        with pytest.raises(ValidationError, match="t must lie"):
            forward_interpolate(x0, noise, torch.tensor([-0.1]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError, match="shape mismatch"):
            forward_interpolate(torch.zeros(2, 3), torch.zeros(2, 4), 0.5)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(min_value=0.0, max_value=1.0))
    def test_matches_numpy_oracle(self, tv):
        x0, noise = rand_latents(2), rand_latents(2, seed=9)
        out = forward_interpolate(x0, noise, tv).numpy()
        # Same float32 arithmetic as the implementation, so the match is exact.
        t32 = np.float32(tv)
        expected = (np.float32(1.0) - t32) * x0.numpy() + t32 * noise.numpy()
        np.testing.assert_array_equal(out, expected)


class TestVelocityTarget:
    def test_hand_value(self):
        x0 = torch.tensor([1.0, 2.0])
        noise = torch.tensor([3.0, 1.0])
        assert torch.equal(velocity_target(x0, noise), torch.tensor([2.0, -1.0]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError):
            velocity_target(torch.zeros(2), torch.zeros(3))


class TestCfgCombine:
    def test_scale_one_returns_conditional_object(self):
        u, c = torch.randn(3), torch.randn(3)
        assert cfg_combine(u, c, 1.0) is c

    def test_scale_zero_returns_unconditional_object(self):
        u, c = torch.randn(3), torch.randn(3)
        assert cfg_combine(u, c, 0.0) is u

    def test_linear_extrapolation_hand_value(self):
        u = torch.tensor([1.0])
        c = torch.tensor([2.0])
        assert cfg_combine(u, c, 3.0).item() == pytest.approx(4.0)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError):
            cfg_combine(torch.zeros(2), torch.zeros(3), 2.0)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(min_value=0.0, max_value=10.0, allow_nan=False))
    def test_matches_affine_oracle(self, s):
        gen = torch.Generator().manual_seed(0)
        u = torch.randn(4, generator=gen)
        c = torch.randn(4, generator=gen)
        expected = u.numpy() + s * (c.numpy() - u.numpy())
        np.testing.assert_allclose(cfg_combine(u, c, s).numpy(), expected, rtol=1e-6)


class TestDropConditioning:
    def make_cond(self):
        ctx = np.random.default_rng(0).standard_normal((3, 2560)).astype(np.float32)
        return ConditioningTensor(ctx, is_null=False)

    def test_p_zero_never_drops(self):
        cond = self.make_cond()
        rng = np.random.default_rng(0)
        assert all(drop_conditioning(cond, 0.0, rng) is cond for _ in range(100))

    def test_p_one_always_drops(self):
        cond = self.make_cond()
        rng = np.random.default_rng(0)
        for _ in range(100):
            out = drop_conditioning(cond, 1.0, rng)
            assert out.is_null
            assert not out.context.any()

    def test_frequency_tracks_p(self):
        cond = self.make_cond()
        rng = np.random.default_rng(123)
        drops = sum(drop_conditioning(cond, 0.15, rng).is_null for _ in range(2000))
        assert 0.15 == pytest.approx(drops / 2000, abs=0.03)

    def test_rejects_bad_p(self):
        with pytest.raises(ValidationError):
            drop_conditioning(self.make_cond(), 1.2, np.random.default_rng(0))


class _ConstantVelocity:
    """Callable stub standing in for the denoiser; also logs branch usage."""

    def __init__(self, value=1.0):
        self.value = value
        self.contexts = []

    def __call__(self, x, t, context):
        self.contexts.append(context.detach().clone())
        return torch.full_like(x, self.value)


class TestFlowLoss:
    def test_zero_model_loss_is_target_power(self):
        x0, noise = rand_latents(2), rand_latents(2, seed=9)
        model = _ConstantVelocity(0.0)
        t = torch.tensor([0.5, 0.5])
        loss = flow_matching_loss(model, x0, noise, t, torch.zeros(2, 3, 2560))
        expected = ((noise - x0) ** 2).mean()
        assert loss.item() == pytest.approx(expected.item(), rel=1e-6)

    def test_perfect_model_has_zero_loss(self):
        x0, noise = rand_latents(2), rand_latents(2, seed=9)

        def oracle(x, t, context):
            return noise - x0

        t = torch.tensor([0.25, 0.75])
        loss = flow_matching_loss(oracle, x0, noise, t, torch.zeros(2, 3, 2560))
        assert loss.item() == 0.0

    def test_probe_is_deterministic_and_restores_mode(self):
        model = ConditionalUNet3D(TINY_DENOISER)
        latents, contexts = rand_latents(), rand_contexts()
        model.train()
        a = evaluate_flow_loss(model, latents, contexts, num_t=4)
        b = evaluate_flow_loss(model, latents, contexts, num_t=4)
        assert a == b
        assert model.training

    def test_probe_averages_fixed_t_grid(self):
        # A zero model reduces the probe to mean((noise - x0)^2), one fixed
        # noise draw shared by every t on the grid.
        latents = rand_latents()
        model = _ConstantVelocity(0.0)
        probe = evaluate_flow_loss(model, latents, torch.zeros(2, 3, 2560), num_t=4)
        gen = torch.Generator().manual_seed(777)
        noise = torch.randn(latents.shape, generator=gen)
        expected = ((noise - latents) ** 2).mean().item()
        assert probe == pytest.approx(expected, rel=1e-6)


class TestTrainingStep:
    def test_updates_parameters_deterministically(self):
        latents, contexts = rand_latents(), rand_contexts()
        schedule = make_schedule(1000)
        outs = []
        for _ in range(2):
            torch.manual_seed(0)
            model = ConditionalUNet3D(TINY_DENOISER)
            opt = torch.optim.Adam(model.parameters(), lr=1e-3)
            gen = torch.Generator().manual_seed(7)
            before = {k: v.clone() for k, v in model.state_dict().items()}
            loss = training_step(model, opt, latents, contexts, schedule, 0.15, gen)
            outs.append((loss, model.state_dict()))
            assert any(
                not torch.equal(before[k], v) for k, v in model.state_dict().items()
            )
        assert outs[0][0] == outs[1][0]
        for k, v in outs[0][1].items():
            assert torch.equal(v, outs[1][1][k]), k

    def test_nonfinite_loss_raises(self):
        class Exploding(nn.Module):
            def __init__(self):
                super().__init__()
                self.p = nn.Parameter(torch.ones(1))

            def forward(self, x, t, context):
                return x * self.p * float("inf")

        model = Exploding()
        opt = torch.optim.SGD(model.parameters(), lr=1.0)
        with pytest.raises(TrainingDivergedError, match="non-finite"):
            training_step(
                model, opt, rand_latents(), rand_contexts(), make_schedule(10), 0.0,
                torch.Generator().manual_seed(0),
            )

    def test_grad_clip_changes_update(self):
        latents, contexts = rand_latents(), rand_contexts()
        schedule = make_schedule(1000)
        states = []
        for clip in (None, 1e-4):
            torch.manual_seed(0)
            model = ConditionalUNet3D(TINY_DENOISER)
            opt = torch.optim.SGD(model.parameters(), lr=1.0)
            training_step(
                model, opt, latents, contexts, schedule, 0.0,
                torch.Generator().manual_seed(7), max_grad_norm=clip,
            )
            states.append(model.state_dict())
        assert any(
            not torch.equal(states[0][k], states[1][k]) for k in states[0]
        )


class TestSampler:
    def cond(self):
        ctx = np.random.default_rng(3).standard_normal((3, 2560)).astype(np.float32)
        return ConditioningTensor(ctx, is_null=False)

    def test_constant_velocity_oracle(self):
        # dx/dt = 1 integrated from t=1 to 0 subtracts exactly 1 overall.
        model = _ConstantVelocity(1.0)
        z = sample_latent(model, self.cond(), CfgParams(scale=1.0),
                          num_inference_steps=30, rng_seed=4, latent_shape=(4, 4, 4, 2))
        start = draw_initial_latent((1, 4, 4, 4, 2), 4)[0].numpy()
        np.testing.assert_allclose(z.data, start - 1.0, rtol=0, atol=1e-5)

    def test_step_count_invariance_for_constant_field(self):
        a = sample_latent(_ConstantVelocity(0.5), self.cond(), CfgParams(scale=1.0),
                          num_inference_steps=5, rng_seed=0, latent_shape=(4, 4, 4, 2))
        b = sample_latent(_ConstantVelocity(0.5), self.cond(), CfgParams(scale=1.0),
                          num_inference_steps=60, rng_seed=0, latent_shape=(4, 4, 4, 2))
        np.testing.assert_allclose(a.data, b.data, atol=1e-5)

    def test_scale_one_queries_conditional_branch_only(self):
        model = _ConstantVelocity()
        sample_latent(model, self.cond(), CfgParams(scale=1.0),
                      num_inference_steps=8, latent_shape=(4, 4, 4, 2))
        assert len(model.contexts) == 8
        assert all(ctx.abs().sum() > 0 for ctx in model.contexts)

    def test_scale_zero_queries_null_branch_only(self):
        model = _ConstantVelocity()
        sample_latent(model, self.cond(), CfgParams(scale=0.0),
                      num_inference_steps=8, latent_shape=(4, 4, 4, 2))
        assert len(model.contexts) == 8
        assert all(not ctx.abs().sum() for ctx in model.contexts)

    def test_guided_scale_queries_both_branches(self):
        model = _ConstantVelocity()
        sample_latent(model, self.cond(), CfgParams(scale=3.0),
                      num_inference_steps=8, latent_shape=(4, 4, 4, 2))
        assert len(model.contexts) == 16

    def test_seeded_reproducibility(self):
        a = sample_latent(_ConstantVelocity(), self.cond(), CfgParams(),
                          num_inference_steps=4, rng_seed=11, latent_shape=(4, 4, 4, 2))
        b = sample_latent(_ConstantVelocity(), self.cond(), CfgParams(),
                          num_inference_steps=4, rng_seed=11, latent_shape=(4, 4, 4, 2))
        c = sample_latent(_ConstantVelocity(), self.cond(), CfgParams(),
                          num_inference_steps=4, rng_seed=12, latent_shape=(4, 4, 4, 2))
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)

    def test_output_is_scaled_latent_with_metadata(self):
        z = sample_latent(_ConstantVelocity(), self.cond(), CfgParams(),
                          num_inference_steps=2, latent_shape=(4, 4, 4, 2),
                          scale_factor=0.5, volume_spacing_mm=(1.0, 1.0, 2.0))
        assert isinstance(z, LatentVolume)
        assert z.scaled is True
        assert z.scale_factor == 0.5
        assert z.volume_spacing_mm == (1.0, 1.0, 2.0)
        assert z.data.dtype == np.float64

    def test_rejects_zero_steps(self):
        with pytest.raises(ValidationError, match="num_inference_steps"):
            sample_latent(_ConstantVelocity(), self.cond(), CfgParams(),
                          num_inference_steps=0)

    def test_restores_module_training_mode(self):
        model = ConditionalUNet3D(TINY_DENOISER)
        model.train()
        sample_latent(model, self.cond(), CfgParams(scale=0.0),
                      num_inference_steps=1, latent_shape=(4, 4, 4, 2))
        assert model.training


class TestDrawInitialLatent:
    def test_seeded(self):
        a = draw_initial_latent((1, 4, 2, 2, 2), 3)
        b = draw_initial_latent((1, 4, 2, 2, 2), 3)
        assert torch.equal(a, b)

    def test_is_standard_normal_draw(self):
        x = draw_initial_latent((1, 4, 16, 16, 8), 0)
        assert abs(x.mean().item()) < 0.1
        assert abs(x.std().item() - 1.0) < 0.1


class TestTrainDriver:
    def test_history_and_lr_decay(self):
        res = train_latent_diffusion(rand_latents(), rand_contexts(), tiny_cfg(), 1.0)
        assert len(res.history) == 5
        assert res.history[0]["lr"] > res.history[-1]["lr"]
        assert res.history[-1]["lr"] == pytest.approx(0.0)
        assert math.isfinite(res.probe_final)
        assert not res.model.training

    def test_deterministic(self):
        r1 = train_latent_diffusion(rand_latents(), rand_contexts(), tiny_cfg(), 1.0)
        r2 = train_latent_diffusion(rand_latents(), rand_contexts(), tiny_cfg(), 1.0)
        assert r1.probe_final == r2.probe_final
        for k, v in r1.model.state_dict().items():
            assert torch.equal(v, r2.model.state_dict()[k]), k

    def test_resume_matches_uninterrupted_run(self):
        latents, contexts = rand_latents(), rand_contexts()
        cfg = tiny_cfg(total_steps=6)
        full = train_latent_diffusion(latents, contexts, cfg, 1.0)
        half = train_latent_diffusion(latents, contexts, cfg, 1.0, num_steps=3)
        resumed = train_latent_diffusion(
            latents, contexts, cfg, 1.0, start_state=half._resume_state
        )
        assert len(resumed.history) == 6
        assert [h["loss"] for h in resumed.history] == [h["loss"] for h in full.history]
        for k, v in full.model.state_dict().items():
            assert torch.equal(v, resumed.model.state_dict()[k]), k

    def test_rejects_mismatched_pairing(self):
        with pytest.raises(ValidationError, match="1:1"):
            train_latent_diffusion(rand_latents(2), rand_contexts(3), tiny_cfg(), 1.0)

    def test_warmup_ramps_recorded_lr(self):
        cfg = tiny_cfg(total_steps=10, warmup_steps=4, lr=1e-3)
        res = train_latent_diffusion(rand_latents(), rand_contexts(), cfg, 1.0, num_steps=4)
        lrs = [h["lr"] for h in res.history]
        # Recorded lr is the post-step value: ramp then decay onset.
        assert lrs[0] == pytest.approx(1e-3 * 2 / 4)
        assert lrs[2] == pytest.approx(1e-3)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        res = train_latent_diffusion(rand_latents(), rand_contexts(), cfg, 1.0)
        path = save_diffusion_checkpoint(
            res, tmp_path / "ldm.pt", cfg, scale_factor=0.7,
            codec_checkpoint="codec.pt", run_config={"x": 1},
        )
        model, payload = load_diffusion_checkpoint(path)
        assert payload["kind"] == "ldm"
        assert payload["scale_factor"] == 0.7
        assert payload["codec_checkpoint"] == "codec.pt"
        assert payload["probe"]["final"] == res.probe_final
        assert not model.training
        for k, v in res.model.state_dict().items():
            assert torch.equal(v, model.state_dict()[k]), k

    def test_resume_state_travels_in_checkpoint(self, tmp_path):
        latents, contexts = rand_latents(), rand_contexts()
        cfg = tiny_cfg(total_steps=6)
        half = train_latent_diffusion(latents, contexts, cfg, 1.0, num_steps=3)
        save_diffusion_checkpoint(half, tmp_path / "ldm.pt", cfg, 1.0)
        _, payload = load_diffusion_checkpoint(tmp_path / "ldm.pt")
        resumed = train_latent_diffusion(
            latents, contexts, cfg, 1.0, start_state=payload["resume"]
        )
        full = train_latent_diffusion(latents, contexts, cfg, 1.0)
        for k, v in full.model.state_dict().items():
            assert torch.equal(v, resumed.model.state_dict()[k]), k

    def test_wrong_kind_rejected(self, tmp_path):
        torch.save({"kind": "codec"}, tmp_path / "c.pt")
        with pytest.raises(ContractError, match="not a diffusion checkpoint"):
            load_diffusion_checkpoint(tmp_path / "c.pt")

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ContractError, match="not found"):
            load_diffusion_checkpoint(tmp_path / "nope.pt")


class TestDenoiserNetwork:
    def test_timestep_embedding_shape_and_t0(self):
        emb = timestep_embedding(torch.tensor([0.0, 0.5]), 8)
        assert emb.shape == (2, 8)
        np.testing.assert_allclose(emb[0, :4].numpy(), np.ones(4), rtol=1e-6)
        np.testing.assert_allclose(emb[0, 4:].numpy(), np.zeros(4), atol=1e-7)

    def test_forward_preserves_shape(self):
        model = ConditionalUNet3D(TINY_DENOISER)
        x = torch.randn(2, 4, 8, 8, 4)
        out = model(x, torch.tensor([0.3, 0.9]), torch.randn(2, 3, 2560))
        assert out.shape == x.shape

    def test_zero_initialized_head(self):
        model = ConditionalUNet3D(TINY_DENOISER)
        x = torch.randn(1, 4, 4, 4, 2)
        out = model(x, torch.tensor([0.5]), torch.randn(1, 3, 2560))
        assert torch.equal(out, torch.zeros_like(out))

    def test_odd_depth_extent_round_trips(self):
        # Four levels on a z extent of 4 forces the snap-back interpolation.
        cfg = DenoiserConfig(channel_widths=(8, 16, 32, 64), num_heads=8, time_embed_dim=8)
        model = ConditionalUNet3D(cfg)
        x = torch.randn(1, 4, 16, 16, 4)
        out = model(x, torch.tensor([0.5]), torch.randn(1, 3, 2560))
        assert out.shape == x.shape

    def test_context_steers_output_after_training_signal(self):
        # Untrained but non-zero head: perturb the head, then check the
        # conditional pathway actually feeds the output.
        torch.manual_seed(0)
        model = ConditionalUNet3D(TINY_DENOISER)
        nn.init.normal_(model.out_conv.weight, std=0.1)
        x = torch.randn(1, 4, 4, 4, 2)
        t = torch.tensor([0.5])
        a = model(x, t, torch.zeros(1, 3, 2560))
        b = model(x, t, torch.randn(1, 3, 2560))
        assert not torch.equal(a, b)
