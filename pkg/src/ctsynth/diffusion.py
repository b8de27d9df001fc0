"""Rectified-flow core: schedule, training objective, CFG, Euler sampler.

The forward process is the straight path x_t = (1-t) x0 + t eps with the
constant-velocity target v = eps - x0; the network regresses v. Training
draws t uniformly from the 1000-point grid t_k = k/1000 (t=0 excluded; t=1 is
pure noise), drops the conditioning tensor to zeros with probability 0.15 per
sample, and minimizes mean squared error.

Sampling integrates dx/dt = v backwards from t=1 with plain Euler steps. With
guidance scale s the velocity is u + s (c - u) from the unconditional and
conditional branches; s=1 short-circuits to the conditional branch alone and
s=0 to the unconditional one, exactly, so those identities hold bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .conditioning import ConditioningTensor, null_conditioning
from .config import DenoiserConfig, DiffusionConfig
from .errors import ContractError, TrainingDivergedError, ValidationError
from .codec import LatentVolume
from .unet import ConditionalUNet3D

CHECKPOINT_SCHEMA = 1


@dataclass
class RFlowSchedule:
    """Uniform grid t_k = k/N over (0, 1]."""

    num_train_steps: int
    timesteps: torch.Tensor

    def sample_t(self, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
        idx = torch.randint(0, self.num_train_steps, (batch,), generator=generator)
        return self.timesteps[idx]


def make_schedule(num_train_steps: int = 1000) -> RFlowSchedule:
    if num_train_steps < 1:
        raise ValidationError(f"num_train_steps must be >= 1, got {num_train_steps}")
    t = torch.arange(1, num_train_steps + 1, dtype=torch.float32) / num_train_steps
    return RFlowSchedule(num_train_steps, t)


@dataclass
class CfgParams:
    scale: float = 1.0
    drop_probability: float = 0.15

    def __post_init__(self):
        if self.scale < 0 or not math.isfinite(self.scale):
            raise ValidationError(f"cfg scale must be >= 0, got {self.scale}")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValidationError(
                f"drop_probability must be in [0, 1], got {self.drop_probability}"
            )


def forward_interpolate(x0: torch.Tensor, noise: torch.Tensor, t) -> torch.Tensor:
    """x_t on the straight path. Scalar endpoints t=0 and t=1 return the
    inputs themselves so the endpoint identities are bitwise."""
    if x0.shape != noise.shape:
        raise ValidationError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(noise.shape)}")
    if isinstance(t, (int, float)):
        t = torch.tensor(float(t))
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise ValidationError("t must lie in [0, 1]")
    if t.ndim == 0:
        tv = float(t)
        if tv == 0.0:
            return x0
        if tv == 1.0:
            return noise
    t = t.reshape((-1,) + (1,) * (x0.ndim - 1)) if t.ndim else t
    return (1.0 - t) * x0 + t * noise


def velocity_target(x0: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    if x0.shape != noise.shape:
        raise ValidationError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(noise.shape)}")
    return noise - x0


def cfg_combine(pred_uncond: torch.Tensor, pred_cond: torch.Tensor, s: float) -> torch.Tensor:
    """pred_uncond + s (pred_cond - pred_uncond), with s=0 and s=1 exact."""
    if pred_uncond.shape != pred_cond.shape:
        raise ValidationError("prediction shapes differ")
    if s == 1.0:
        return pred_cond
    if s == 0.0:
        return pred_uncond
    return pred_uncond + s * (pred_cond - pred_uncond)


def drop_conditioning(
    cond: ConditioningTensor, p: float, rng: np.random.Generator
) -> ConditioningTensor:
    """Return null conditioning with probability p, otherwise cond unchanged."""
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"drop probability must be in [0, 1], got {p}")
    if p > 0.0 and rng.random() < p:
        return null_conditioning()
    return cond


def flow_matching_loss(
    model, x0: torch.Tensor, noise: torch.Tensor, t: torch.Tensor, context: torch.Tensor
) -> torch.Tensor:
    """MSE between the model's velocity prediction and eps - x0.

    Pure in its inputs (no RNG), which is what makes both the finite
    difference gradient check and the deterministic convergence probe cheap.
    """
    x_t = forward_interpolate(x0, noise, t)
    pred = model(x_t, t, context)
    return torch.mean((pred - velocity_target(x0, noise)) ** 2)


@torch.no_grad()
def evaluate_flow_loss(
    model,
    latents: torch.Tensor,
    context: torch.Tensor,
    num_t: int = 16,
    noise_seed: int = 777,
) -> float:
    """Deterministic probe of the training objective.

    Fixed noise and a fixed t grid over (0, 1], conditioning always on. A
    single minibatch loss bounces around with the luck of the (t, dropout)
    draw; this probe is the same quantity with the dice removed, so before
    and after values are comparable.
    """
    is_module = isinstance(model, torch.nn.Module)
    was_training = is_module and model.training
    if is_module:
        model.eval()
    gen = torch.Generator().manual_seed(noise_seed)
    noise = torch.randn(latents.shape, generator=gen)
    total = 0.0
    for k in range(1, num_t + 1):
        t = torch.full((latents.shape[0],), k / num_t)
        total += flow_matching_loss(model, latents, noise, t, context).item()
    if was_training:
        model.train()
    return total / num_t


def training_step(
    model,
    optimizer,
    latents: torch.Tensor,
    context: torch.Tensor,
    schedule: RFlowSchedule,
    drop_probability: float,
    generator: torch.Generator,
    lr_scheduler=None,
    max_grad_norm: float | None = None,
) -> float:
    """One optimizer update on a batch of scaled latents.

    Draw order (t indices, noise, keep mask) is fixed so a seeded generator
    reproduces a run exactly. Dropped samples have their whole context zeroed,
    which is precisely the null-conditioning tensor the sampler uses.
    """
    batch = latents.shape[0]
    t = schedule.sample_t(batch, generator)
    noise = torch.randn(latents.shape, generator=generator)
    keep = (torch.rand(batch, generator=generator) >= drop_probability).to(latents.dtype)
    ctx = context * keep[:, None, None]

    optimizer.zero_grad()
    loss = flow_matching_loss(model, latents, noise, t, ctx)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"diffusion loss became non-finite (t draw: {t.tolist()})"
        )
    loss.backward()
    if max_grad_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), max_grad_norm)
    optimizer.step()
    if lr_scheduler is not None:
        lr_scheduler.step()
    return loss.item()


def draw_initial_latent(shape: tuple[int, ...], seed: int) -> torch.Tensor:
    """The seeded standard-normal latent that sampling starts from at t=1."""
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen)


@torch.no_grad()
def sample_latent(
    model,
    cond: ConditioningTensor,
    cfg: CfgParams,
    num_inference_steps: int = 30,
    rng_seed: int = 0,
    latent_shape: tuple[int, int, int, int] = (4, 16, 16, 8),
    scale_factor: float = 1.0,
    volume_spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> LatentVolume:
    """Euler-integrate the learned velocity field from t=1 down to t=0.

    Evaluates the denoiser twice per step (conditional and null context) and
    combines with cfg_combine, except at scale 1 (conditional branch only)
    and scale 0 (unconditional only). Returns a *scaled* latent; divide by
    the scale factor before decoding.
    """
    if num_inference_steps < 1:
        raise ValidationError(f"num_inference_steps must be >= 1, got {num_inference_steps}")
    is_module = isinstance(model, torch.nn.Module)
    if is_module:
        was_training = model.training
        model.eval()

    x = draw_initial_latent((1,) + tuple(latent_shape), rng_seed)
    ctx_cond = torch.from_numpy(cond.context)[None]
    ctx_null = torch.from_numpy(null_conditioning().context)[None]
    dt = 1.0 / num_inference_steps
    for i in range(num_inference_steps):
        t = torch.full((1,), 1.0 - i * dt)
        if cfg.scale == 1.0:
            v = model(x, t, ctx_cond)
        elif cfg.scale == 0.0:
            v = model(x, t, ctx_null)
        else:
            v = cfg_combine(model(x, t, ctx_null), model(x, t, ctx_cond), cfg.scale)
        x = x - v * dt

    if is_module and was_training:
        model.train()
    return LatentVolume(
        x[0].numpy().astype(np.float64),
        scaled=True,
        scale_factor=scale_factor,
        volume_spacing_mm=volume_spacing_mm,
    )


# ---------------------------------------------------------------------------
# Training driver and checkpoints
# ---------------------------------------------------------------------------


@dataclass
class DiffusionTrainResult:
    model: ConditionalUNet3D
    history: list[dict]
    probe_initial: float
    probe_final: float


def train_latent_diffusion(
    latents: torch.Tensor,
    contexts: torch.Tensor,
    cfg: DiffusionConfig,
    scale_factor: float,
    start_state: dict | None = None,
    num_steps: int | None = None,
    log_every: int = 100,
    log_fn=None,
) -> DiffusionTrainResult:
    """Train the denoiser on pre-encoded, pre-scaled latents.

    latents: (N, 4, x, y, z) float32, already multiplied by scale_factor.
    contexts: (N, 3, 2560) float32 rows aligned with latents.
    The polynomial lr decay runs linearly to zero over cfg.total_steps;
    num_steps (default total_steps) is how many steps to run now, so a
    shorter run is a prefix of the full schedule and resume continues it.
    """
    if latents.shape[0] != contexts.shape[0]:
        raise ValidationError("latents and contexts must pair 1:1")
    torch.manual_seed(cfg.seed)
    model = ConditionalUNet3D(cfg.denoiser)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, cfg.adam_beta2))

    def lr_lambda(step: int) -> float:
        if cfg.warmup_steps and step < cfg.warmup_steps:
            return (step + 1) / cfg.warmup_steps
        return max(0.0, 1.0 - step / cfg.total_steps)

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_lambda)
    generator = torch.Generator().manual_seed(cfg.seed + 1)
    schedule = make_schedule(cfg.num_train_steps)
    start_step = 0
    history: list[dict] = []
    if start_state is not None:
        model.load_state_dict(start_state["model"])
        optimizer.load_state_dict(start_state["optimizer"])
        scheduler.load_state_dict(start_state["lr_scheduler"])
        generator.set_state(start_state["generator"])
        start_step = start_state["step"]
        history = list(start_state.get("history", []))

    stop_step = min(num_steps if num_steps is not None else cfg.total_steps, cfg.total_steps)
    n = latents.shape[0]
    probe_initial = evaluate_flow_loss(model, latents, contexts)
    model.train()
    for step in range(start_step, stop_step):
        if cfg.batch_size >= n:
            batch_idx = torch.arange(n)
        else:
            batch_idx = torch.randint(0, n, (cfg.batch_size,), generator=generator)
        loss = training_step(
            model,
            optimizer,
            latents[batch_idx],
            contexts[batch_idx],
            schedule,
            cfg.drop_probability,
            generator,
            scheduler,
            max_grad_norm=cfg.max_grad_norm,
        )
        record = {"step": step, "loss": loss, "lr": scheduler.get_last_lr()[0]}
        history.append(record)
        if log_fn and (step % log_every == 0 or step == stop_step - 1):
            log_fn(record)
    model.eval()
    probe_final = evaluate_flow_loss(model, latents, contexts)

    result = DiffusionTrainResult(model, history, probe_initial, probe_final)
    result._resume_state = {  # type: ignore[attr-defined]
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "lr_scheduler": scheduler.state_dict(),
        "generator": generator.get_state(),
        "step": stop_step,
        "history": history,
    }
    return result


def save_diffusion_checkpoint(
    result: DiffusionTrainResult,
    path: str | Path,
    cfg: DiffusionConfig,
    scale_factor: float,
    codec_checkpoint: str | None = None,
    run_config: dict | None = None,
) -> Path:
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "kind": "ldm",
        "state_dict": result.model.state_dict(),
        "denoiser": cfg.denoiser.__dict__,
        "num_train_steps": cfg.num_train_steps,
        "scale_factor": scale_factor,
        "codec_checkpoint": codec_checkpoint,
        "run_config": run_config,
        "resume": getattr(result, "_resume_state", None),
        "probe": {"initial": result.probe_initial, "final": result.probe_final},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_diffusion_checkpoint(path: str | Path) -> tuple[ConditionalUNet3D, dict]:
    path = Path(path)
    if not path.exists():
        raise ContractError(f"diffusion checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "ldm":
        raise ContractError(f"{path} is not a diffusion checkpoint")
    model = ConditionalUNet3D(DenoiserConfig(**payload["denoiser"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
