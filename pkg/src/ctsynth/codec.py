"""KL autoencoder over CT volumes and the latent scale-factor machinery.

The codec maps a UNIT-domain volume (X, Y, Z) to a 4-channel latent grid at
exactly a quarter of each spatial extent, via two stride-2 stages. The
architecture is a small residual conv encoder/decoder; at full scale the same
compression contract would be served by a pretrained volumetric autoencoder
loaded behind this interface, which is why only the shape contract and the
posterior semantics are fixed here.

Latent scaling: diffusion wants roughly unit-variance inputs, so a scale
factor calibrated as 1/std over the training latents multiplies latents on
the way in and divides on the way out. LatentVolume carries float64 data
while the factor is quantized to float32; the product of a float32-valued
payload with a float32 factor is exact in float64, which makes
unscale(scale(z)) == z bitwise rather than approximately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import CodecConfig
from .dataset import DatasetManifest
from .errors import (
    ContractError,
    DomainError,
    ManifestError,
    ShapeError,
    TrainingDivergedError,
)
from .volumes import CtVolume, Domain, load_volume

SPATIAL_FACTOR = 4
LATENT_CHANNELS = 4

CHECKPOINT_SCHEMA = 1


@dataclass
class LatentVolume:
    """4-channel latent grid, 1/4 of the source volume along each axis."""

    data: np.ndarray
    scaled: bool = False
    scale_factor: float = 1.0
    volume_spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[0] != LATENT_CHANNELS:
            raise ShapeError(
                f"latent must be ({LATENT_CHANNELS}, x, y, z), got {self.data.shape}"
            )
        self.scale_factor = float(self.scale_factor)
        if not math.isfinite(self.scale_factor) or self.scale_factor <= 0:
            raise ContractError(f"scale_factor must be positive, got {self.scale_factor}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass
class PosteriorParams:
    """Diagonal-Gaussian posterior over the latent grid."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ShapeError("posterior mean and log_variance shapes differ")
        if not torch.isfinite(self.log_variance).all():
            raise ContractError("posterior log_variance must be finite")

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + torch.exp(0.5 * self.log_variance) * eps

    def kl(self) -> torch.Tensor:
        """Closed-form KL(N(mean, var) || N(0, I)), averaged per element."""
        return 0.5 * torch.mean(
            self.mean.pow(2) + self.log_variance.exp() - 1.0 - self.log_variance
        )


def scale_latents(z: LatentVolume) -> LatentVolume:
    if z.scaled:
        raise ContractError("latent is already scaled")
    return replace(z, data=z.data * z.scale_factor, scaled=True)


def unscale_latents(z: LatentVolume) -> LatentVolume:
    if not z.scaled:
        raise ContractError("latent is not scaled")
    return replace(z, data=z.data / z.scale_factor, scaled=False)


def _group_norm(ch: int) -> nn.GroupNorm:
    groups = min(8, ch)
    while ch % groups:
        groups -= 1
    return nn.GroupNorm(groups, ch)


class ResidualBlock3d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm1 = _group_norm(channels)
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.norm2 = _group_norm(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class VolumeCodec(nn.Module):
    """Encoder/decoder pair implementing the 4x-per-axis compression contract."""

    def __init__(self, widths: tuple[int, int] = (32, 64), latent_channels: int = LATENT_CHANNELS):
        super().__init__()
        w0, w1 = widths
        self.widths = tuple(widths)
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            nn.Conv3d(1, w0, 3, stride=2, padding=1),
            ResidualBlock3d(w0),
            nn.Conv3d(w0, w1, 3, stride=2, padding=1),
            ResidualBlock3d(w1),
            _group_norm(w1),
            nn.SiLU(),
            nn.Conv3d(w1, 2 * latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv3d(latent_channels, w1, 3, padding=1),
            ResidualBlock3d(w1),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv3d(w1, w0, 3, padding=1),
            ResidualBlock3d(w0),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _group_norm(w0),
            nn.SiLU(),
            nn.Conv3d(w0, 1, 3, padding=1),
        )

    def latent_shape(self, volume_shape: tuple[int, int, int]) -> tuple[int, int, int, int]:
        """Latent grid for a given input grid; validates /4 divisibility."""
        for ax, n in enumerate(volume_shape):
            if n % SPATIAL_FACTOR:
                raise ShapeError(
                    f"axis {ax} extent {n} is not divisible by {SPATIAL_FACTOR}"
                )
        return (self.latent_channels,) + tuple(n // SPATIAL_FACTOR for n in volume_shape)

    def posterior(self, batch: torch.Tensor) -> PosteriorParams:
        mean, log_var = self.encoder(batch).chunk(2, dim=1)
        # The KL term keeps log_var near 0; the clamp only guards early steps.
        return PosteriorParams(mean, log_var.clamp(-30.0, 20.0))

    def reconstruct(self, batch: torch.Tensor) -> tuple[torch.Tensor, PosteriorParams]:
        posterior = self.posterior(batch)
        return torch.sigmoid(self.decoder(posterior.mean)), posterior

    @torch.no_grad()
    def encode(
        self,
        v: CtVolume,
        sample: bool = False,
        rng_seed: int | None = None,
        scale_factor: float = 1.0,
    ) -> tuple[LatentVolume, PosteriorParams]:
        """Encode one volume. Returns the (unscaled) latent and the posterior.

        sample=False takes the posterior mean; sample=True reparameterizes
        with a generator seeded by rng_seed.
        """
        if v.domain is not Domain.UNIT:
            raise DomainError(f"encode expects a UNIT volume, got {v.domain.value}")
        self.latent_shape(v.shape)
        batch = torch.from_numpy(np.ascontiguousarray(v.data, dtype=np.float32))[None, None]
        posterior = self.posterior(batch)
        if sample:
            gen = None
            if rng_seed is not None:
                gen = torch.Generator().manual_seed(int(rng_seed))
            z = posterior.sample(gen)
        else:
            z = posterior.mean
        latent = LatentVolume(
            z[0].numpy().astype(np.float64),
            scaled=False,
            scale_factor=scale_factor,
            volume_spacing_mm=v.spacing_mm,
        )
        return latent, posterior

    @torch.no_grad()
    def decode(self, z: LatentVolume) -> CtVolume:
        """Decode an unscaled latent back to a UNIT volume (4x each axis)."""
        if z.scaled:
            raise ContractError("decode expects an unscaled latent; call unscale_latents first")
        batch = torch.from_numpy(z.data.astype(np.float32))[None]
        out = torch.sigmoid(self.decoder(batch))
        return CtVolume(out[0, 0].numpy(), z.volume_spacing_mm, Domain.UNIT)


def vae_loss(
    v: torch.Tensor,
    reconstruction: torch.Tensor,
    posterior: PosteriorParams,
    kl_weight: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, reconstruction MSE, per-element KL)."""
    if v.shape != reconstruction.shape:
        raise ShapeError(f"shapes differ: {tuple(v.shape)} vs {tuple(reconstruction.shape)}")
    recon = F.mse_loss(reconstruction, v)
    kl = posterior.kl()
    return recon + kl_weight * kl, recon, kl


def scale_factor_from_latents(latents: list[LatentVolume] | list[np.ndarray]) -> float:
    """1 / std over every latent component, quantized to float32.

    The biased (population) std is used: the latent pool is the normalization
    target itself, not a sample from something larger.
    """
    arrays = [z.data if isinstance(z, LatentVolume) else np.asarray(z) for z in latents]
    if not arrays:
        raise ManifestError("no latents to calibrate on")
    flat = np.concatenate([a.ravel() for a in arrays]).astype(np.float64)
    std = float(flat.std(ddof=0))
    if std == 0.0 or not math.isfinite(std):
        raise DomainError("latent components have zero variance; cannot calibrate")
    return float(np.float32(1.0 / std))


def calibrate_scale_factor(manifest: DatasetManifest, codec: VolumeCodec) -> float:
    entries = manifest.split("train") or manifest.entries
    if not entries:
        raise ManifestError("manifest has no calibration volumes")
    latents = []
    for entry in entries:
        volume = load_volume(manifest.volume_file(entry))
        latents.append(codec.encode(volume)[0])
    return scale_factor_from_latents(latents)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class CodecTrainResult:
    codec: VolumeCodec
    scale_factor: float
    history: list[dict]
    final_mse: float


def _load_training_batch(manifest: DatasetManifest) -> torch.Tensor:
    entries = manifest.split("train")
    if not entries:
        raise ManifestError("manifest has no train entries")
    volumes = []
    for entry in entries:
        v = load_volume(manifest.volume_file(entry))
        if v.domain is not Domain.UNIT:
            raise DomainError(
                f"{entry.volume_path}: codec training expects UNIT volumes; run preprocess"
            )
        volumes.append(torch.from_numpy(np.ascontiguousarray(v.data, dtype=np.float32)))
    return torch.stack(volumes)[:, None]


def train_autoencoder(
    manifest: DatasetManifest,
    cfg: CodecConfig,
    start_state: dict | None = None,
    log_every: int = 10,
    log_fn=None,
) -> CodecTrainResult:
    """Fit the codec on the manifest's train split.

    Deterministic: reconstruction uses the posterior mean, so no sampling
    noise enters the loss and a fixed seed fixes the whole trajectory.
    Returns the trained codec, the calibrated scale factor and an epoch-wise
    loss history. ``start_state`` resumes from a checkpoint dict.
    """
    data = _load_training_batch(manifest)
    torch.manual_seed(cfg.seed)
    codec = VolumeCodec(tuple(cfg.widths), cfg.latent_channels)
    optimizer = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    start_epoch = 0
    history: list[dict] = []
    shuffler = torch.Generator().manual_seed(cfg.seed + 1)
    if start_state is not None:
        codec.load_state_dict(start_state["model"])
        optimizer.load_state_dict(start_state["optimizer"])
        start_epoch = start_state["epoch"]
        history = list(start_state.get("history", []))
        if "shuffler" in start_state:
            shuffler.set_state(start_state["shuffler"])
    n = data.shape[0]
    final_mse = math.inf
    codec.train()
    for epoch in range(start_epoch, cfg.epochs):
        order = torch.randperm(n, generator=shuffler) if cfg.batch_size < n else torch.arange(n)
        epoch_total = epoch_recon = epoch_kl = 0.0
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            batch = data[order[lo : lo + cfg.batch_size]]
            optimizer.zero_grad()
            recon, posterior = codec.reconstruct(batch)
            total, recon_term, kl_term = vae_loss(batch, recon, posterior, cfg.kl_weight)
            if not torch.isfinite(total):
                raise TrainingDivergedError(
                    f"codec loss became non-finite at epoch {epoch}"
                )
            total.backward()
            optimizer.step()
            epoch_total += total.item()
            epoch_recon += recon_term.item()
            epoch_kl += kl_term.item()
            batches += 1
        record = {
            "epoch": epoch,
            "loss": epoch_total / batches,
            "recon_mse": epoch_recon / batches,
            "kl": epoch_kl / batches,
            "lr": cfg.lr,
        }
        history.append(record)
        final_mse = record["recon_mse"]
        if log_fn and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
            log_fn(record)
    codec.eval()

    with torch.no_grad():
        latents = codec.posterior(data).mean.numpy().astype(np.float64)
    scale = scale_factor_from_latents(list(latents))
    result = CodecTrainResult(codec, scale, history, final_mse)
    result._resume_state = {  # type: ignore[attr-defined]
        "model": codec.state_dict(),
        "optimizer": optimizer.state_dict(),
        "shuffler": shuffler.get_state(),
        "epoch": cfg.epochs,
        "history": history,
    }
    return result


def save_codec_checkpoint(
    result_or_codec,
    path: str | Path,
    scale_factor: float | None = None,
    cfg: CodecConfig | None = None,
    extra: dict | None = None,
) -> Path:
    if isinstance(result_or_codec, CodecTrainResult):
        codec = result_or_codec.codec
        scale_factor = result_or_codec.scale_factor
    else:
        codec = result_or_codec
        if scale_factor is None:
            raise ContractError("scale_factor required when saving a bare codec")
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "kind": "codec",
        "widths": codec.widths,
        "latent_channels": codec.latent_channels,
        "state_dict": codec.state_dict(),
        "scale_factor": scale_factor,
        "config": None if cfg is None else cfg.__dict__,
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_codec_checkpoint(path: str | Path) -> tuple[VolumeCodec, float, dict]:
    path = Path(path)
    if not path.exists():
        raise ContractError(f"codec checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "codec":
        raise ContractError(f"{path} is not a codec checkpoint")
    codec = VolumeCodec(tuple(payload["widths"]), payload["latent_channels"])
    codec.load_state_dict(payload["state_dict"])
    codec.eval()
    return codec, float(payload["scale_factor"]), payload
