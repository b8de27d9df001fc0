"""Command line front end for the full pipeline.

Subcommands cover the whole loop: phantom-gen and preprocess prepare a
corpus, train fits the codec (stage vae) and then the denoiser on cached
latents (stage ldm), sample materializes the cases x scales x seeds
cross-product, evaluate emits one metrics block per CFG scale, and montage
renders central orthogonal slices for eyeballing.

Conventions: the config file is YAML-free JSON with defaults for every field
(flags win over config values); training holds a lock file in the workdir;
result artifacts are written to a temp name and renamed on success; loss logs
are append-only JSONL. Errors derived from CtSynthError exit with status 2
and a one-line message on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import zlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import codec as codec_mod
from . import diffusion as diff_mod
from . import metrics as metrics_mod
from .conditioning import RadiologyReport, build_conditioning
from .config import RunConfig, load_config
from .dataset import (
    DatasetManifest,
    ManifestEntry,
    default_phantom_specs,
    generate_phantom,
    load_manifest,
    save_manifest,
)
from .errors import ContractError, CtSynthError, ValidationError
from .volumes import (
    CtVolume,
    Domain,
    Plane,
    clip_and_normalize,
    denormalize_to_hu,
    extract_plane_slices,
    load_volume,
    resample_to_grid,
    save_volume,
    write_npz_deterministic,
)

_METRIC_KEYS = (
    "fid_xy",
    "fid_yz",
    "fid_zx",
    "fid_mean",
    "clip_t2i_mean",
    "clip_i2i_mean",
    "alignment_accuracy",
    "n_cases",
    "extractor_id",
    "embedder_id",
)


def _parse_triple(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValidationError(f"expected 3 comma-separated integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(","))


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _write_json_atomic(obj, path: Path) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def _append_jsonl(path: Path, record: dict):
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        raise ContractError(f"missing file: {path}")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


class _TrainLock:
    """Exclusive lock guarding one checkpoint directory against concurrent
    training runs. A stale lock must be removed by hand; the file names the
    owning pid to make that call easy."""

    def __init__(self, workdir: Path):
        self.path = workdir / "train.lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ContractError(
                f"another training run holds {self.path} (remove it if stale)"
            ) from None
        os.write(fd, f"pid {os.getpid()}\n".encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _load_run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    cfg.validate()
    return cfg


def _resolve_manifest(args, cfg: RunConfig) -> DatasetManifest:
    path = getattr(args, "manifest", None) or cfg.data.manifest
    if not path:
        raise ValidationError("no manifest given (flag --manifest or config data.manifest)")
    return load_manifest(path)


# ---------------------------------------------------------------------------
# phantom-gen / preprocess
# ---------------------------------------------------------------------------


def cmd_phantom_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = _parse_triple(args.grid) if args.grid else (64, 64, 32)
    specs = default_phantom_specs(count=args.count, seed=args.seed, grid_shape=grid)
    entries = []
    for i, spec in enumerate(specs):
        vol, report = generate_phantom(spec)
        name = f"phantom_{i:03d}.nii.gz"
        save_volume(vol, out / name)
        entries.append(
            ManifestEntry(
                volume_path=name,
                findings=report.findings,
                impression=report.impression,
                spacing_mm=spec.spacing_mm,
                split="train",
            )
        )
    manifest_path = save_manifest(DatasetManifest(entries, root=out), out / "manifest.jsonl")
    print(f"wrote {len(entries)} phantoms and {manifest_path}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_run_config(args)
    manifest = _resolve_manifest(args, cfg)
    grid = _parse_triple(args.grid) if args.grid else cfg.data.grid_shape
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in manifest:
        vol = load_volume(manifest.volume_file(entry))
        if vol.domain is Domain.HU:
            vol = clip_and_normalize(vol)
        if vol.shape != tuple(grid):
            vol = resample_to_grid(vol, grid)
        name = Path(entry.volume_path).name
        save_volume(vol, out / name)
        entries.append(
            ManifestEntry(
                volume_path=name,
                findings=entry.findings,
                impression=entry.impression,
                spacing_mm=vol.spacing_mm,
                split=entry.split,
            )
        )
    manifest_path = save_manifest(DatasetManifest(entries, root=out), out / "manifest.jsonl")
    print(f"preprocessed {len(entries)} volumes to grid {tuple(grid)}; {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# train / cache-latents
# ---------------------------------------------------------------------------


def _build_latent_cache(cfg: RunConfig, manifest: DatasetManifest, codec, scale_factor):
    """Encode every train case (posterior mean), scale, and pair with its
    conditioning context."""
    train = manifest.split("train")
    if not train:
        raise ContractError("manifest has no train split")
    case_ids, lats, ctxs = [], [], []
    for entry in train:
        vol = load_volume(manifest.volume_file(entry))
        if vol.domain is Domain.HU:
            vol = clip_and_normalize(vol)
        if vol.shape != tuple(cfg.data.grid_shape):
            vol = resample_to_grid(vol, cfg.data.grid_shape)
        latent, _ = codec.encode(vol, sample=False, scale_factor=scale_factor)
        lats.append(codec_mod.scale_latents(latent).data.astype(np.float32))
        ctxs.append(build_conditioning(entry.report()).context)
        case_ids.append(entry.case_id)
    return case_ids, torch.from_numpy(np.stack(lats)), torch.from_numpy(np.stack(ctxs))


def cmd_cache_latents(args) -> int:
    cfg = _load_run_config(args)
    workdir = Path(args.workdir)
    codec, scale_factor, _ = codec_mod.load_codec_checkpoint(
        args.codec or workdir / "codec.pt"
    )
    manifest = _resolve_manifest(args, cfg)
    case_ids, latents, contexts = _build_latent_cache(cfg, manifest, codec, scale_factor)
    path = workdir / "latents.pt"
    tmp = path.with_name(path.name + ".tmp")
    torch.save(
        {
            "case_ids": case_ids,
            "latents": latents,
            "contexts": contexts,
            "scale_factor": scale_factor,
            "run_config": cfg.to_dict(),
        },
        tmp,
    )
    tmp.replace(path)
    print(f"cached {latents.shape[0]} latents of shape {tuple(latents.shape[1:])} to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    with _TrainLock(workdir):
        if args.stage == "vae":
            return _train_vae(args, cfg, workdir)
        return _train_ldm(args, cfg, workdir)


def _train_vae(args, cfg: RunConfig, workdir: Path) -> int:
    manifest = _resolve_manifest(args, cfg)
    log_path = workdir / "vae_log.jsonl"
    start_state = None
    if args.resume:
        _, _, payload = codec_mod.load_codec_checkpoint(workdir / "codec.pt")
        start_state = payload.get("resume")
    result = codec_mod.train_autoencoder(
        manifest,
        cfg.codec,
        start_state=start_state,
        log_fn=lambda rec: _append_jsonl(log_path, rec),
    )
    path = codec_mod.save_codec_checkpoint(
        result,
        workdir / "codec.pt",
        cfg=cfg.codec,
        extra={
            "resume": result._resume_state,
            "run_config": cfg.to_dict(),
        },
    )
    print(f"final recon mse {result.final_mse:.6f}, scale factor {result.scale_factor:.6f}")
    print(f"checkpoint: {path}")
    return 0


def _train_ldm(args, cfg: RunConfig, workdir: Path) -> int:
    codec_path = Path(args.codec) if args.codec else workdir / "codec.pt"
    if not codec_path.exists():
        raise ContractError(
            f"stage ldm needs a codec checkpoint ({codec_path} not found; run --stage vae first)"
        )
    cache_path = workdir / "latents.pt"
    if cache_path.exists():
        cache = torch.load(cache_path, map_location="cpu", weights_only=False)
        latents, contexts = cache["latents"], cache["contexts"]
        scale_factor = cache["scale_factor"]
    else:
        codec, scale_factor, _ = codec_mod.load_codec_checkpoint(codec_path)
        manifest = _resolve_manifest(args, cfg)
        _, latents, contexts = _build_latent_cache(cfg, manifest, codec, scale_factor)

    start_state = None
    if args.resume:
        _, payload = diff_mod.load_diffusion_checkpoint(workdir / "ldm.pt")
        start_state = payload.get("resume")
    log_path = workdir / "ldm_log.jsonl"
    result = diff_mod.train_latent_diffusion(
        latents,
        contexts,
        cfg.diffusion,
        scale_factor,
        start_state=start_state,
        num_steps=args.steps,
        log_fn=lambda rec: _append_jsonl(log_path, rec),
    )
    path = diff_mod.save_diffusion_checkpoint(
        result,
        workdir / "ldm.pt",
        cfg.diffusion,
        scale_factor,
        codec_checkpoint=str(codec_path),
        run_config=cfg.to_dict(),
    )
    print(
        f"probe loss {result.probe_initial:.4f} -> {result.probe_final:.4f} "
        f"over {len(result.history)} steps"
    )
    print(f"checkpoint: {path}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def _sample_rng_seed(case_id: str, seed: int) -> int:
    """Stable per-(case, seed) noise seed, shared across CFG scales so scale
    sweeps start from the same initial latent."""
    return (zlib.crc32(case_id.encode()) * 1000 + seed) % (2**31)


def cmd_sample(args) -> int:
    cfg = _load_run_config(args)
    workdir = Path(args.workdir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, payload = diff_mod.load_diffusion_checkpoint(workdir / "ldm.pt")
    scale_factor = float(payload["scale_factor"])
    codec_path = args.codec or payload.get("codec_checkpoint") or workdir / "codec.pt"
    codec, _, _ = codec_mod.load_codec_checkpoint(codec_path)
    manifest = _resolve_manifest(args, cfg)

    entries = {e.case_id: e for e in manifest.split("train")}
    if args.cases:
        wanted = args.cases.split(",")
        missing = [c for c in wanted if c not in entries]
        if missing:
            raise ContractError(f"unknown case ids: {', '.join(missing)}")
        entries = {c: entries[c] for c in wanted}
    scales = _parse_floats(args.scales) if args.scales else cfg.sampling.cfg_scales
    seeds = _parse_ints(args.seeds) if args.seeds else cfg.sampling.seeds
    steps = args.steps or cfg.sampling.num_inference_steps
    latent_shape = codec.latent_shape(cfg.data.grid_shape)

    records = []
    for case_id, entry in entries.items():
        cond = build_conditioning(entry.report())
        for scale in scales:
            for seed in seeds:
                lat = diff_mod.sample_latent(
                    model,
                    cond,
                    diff_mod.CfgParams(scale, cfg.diffusion.drop_probability),
                    num_inference_steps=steps,
                    rng_seed=_sample_rng_seed(case_id, seed),
                    latent_shape=latent_shape,
                    scale_factor=scale_factor,
                    volume_spacing_mm=entry.spacing_mm,
                )
                stem = f"{case_id}_cfg{scale:g}_seed{seed}"
                lat_path = write_npz_deterministic(
                    out / f"{stem}_latent.npz",
                    data=lat.data,
                    scale_factor=lat.scale_factor,
                    scaled=lat.scaled,
                )
                vol = denormalize_to_hu(codec.decode(codec_mod.unscale_latents(lat)))
                vol_path = out / f"{stem}.nii.gz"
                save_volume(vol, vol_path)
                records.append(
                    {
                        "case_id": case_id,
                        "findings": entry.findings,
                        "impression": entry.impression,
                        "spacing_mm": list(entry.spacing_mm),
                        "cfg_scale": scale,
                        "seed": seed,
                        "latent_path": lat_path.name,
                        "volume_path": vol_path.name,
                        "montage_paths": None,
                    }
                )
    tmp = out / "samples.jsonl.tmp"
    with open(tmp, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    tmp.replace(out / "samples.jsonl")
    _write_json_atomic(cfg.to_dict(), out / "run_config.json")
    print(f"wrote {len(records)} samples ({len(entries)} cases x {len(scales)} scales x {len(seeds)} seeds) to {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    samples_dir = Path(args.samples)
    records = _read_jsonl(samples_dir / "samples.jsonl")
    if not records:
        raise ContractError(f"no sample records in {samples_dir}")
    manifest = _resolve_manifest(args, cfg)
    real = {}
    for entry in manifest.split("train"):
        vol = load_volume(manifest.volume_file(entry))
        real[entry.case_id] = clip_and_normalize(vol) if vol.domain is Domain.HU else vol
    if not real:
        raise ContractError("real set is empty")

    extractor = metrics_mod.FeatureExtractorSpec(
        backend=cfg.eval.extractor_backend,
        feature_dim=cfg.eval.extractor_feature_dim,
        seed=cfg.eval.extractor_seed,
    )
    embedder = metrics_mod.JointEmbedderSpec(backend=cfg.eval.embedder_backend)

    per_scale = []
    for scale in sorted({rec["cfg_scale"] for rec in records}):
        scale_records = [r for r in records if r["cfg_scale"] == scale]
        synth, prompts, refs, texts = [], [], [], []
        for rec in scale_records:
            vol = load_volume(samples_dir / rec["volume_path"])
            synth.append(vol)
            prompts.append(
                RadiologyReport(rec["findings"], rec["impression"], tuple(rec["spacing_mm"]))
            )
            if rec["case_id"] not in real:
                raise ContractError(f"sample case {rec['case_id']} missing from real manifest")
            refs.append(real[rec["case_id"]])
            texts.append(rec["findings"])
        fid = metrics_mod.fid_score(list(real.values()), synth, extractor)
        t2i, i2i = [], []
        for rec, vol, prompt, ref in zip(scale_records, synth, prompts, refs):
            a, b = metrics_mod.clip_scores(vol, prompt, ref, embedder, case_id=rec["case_id"])
            t2i.append(a)
            i2i.append(b)
        block = {
            "cfg_scale": scale,
            "fid_xy": fid.fid_xy,
            "fid_yz": fid.fid_yz,
            "fid_zx": fid.fid_zx,
            "fid_mean": fid.fid_mean,
            "clip_t2i_mean": float(np.mean(t2i)),
            "clip_i2i_mean": float(np.mean(i2i)),
            "alignment_accuracy": metrics_mod.alignment_accuracy(synth, texts),
            "n_cases": len(scale_records),
            "extractor_id": extractor.extractor_id,
            "embedder_id": embedder.embedder_id,
        }
        assert set(_METRIC_KEYS) <= set(block)
        per_scale.append(block)

    report = {"per_scale": per_scale, "run_config": cfg.to_dict()}
    out = Path(args.out) if args.out else samples_dir / "metrics.json"
    _write_json_atomic(report, out)
    for block in per_scale:
        print(
            f"cfg {block['cfg_scale']:g}: fid_mean {block['fid_mean']:.4f} "
            f"t2i {block['clip_t2i_mean']:.4f} i2i {block['clip_i2i_mean']:.4f} "
            f"alignment {block['alignment_accuracy']:.3f} (n={block['n_cases']})"
        )
    print(f"metrics: {out}")
    return 0


# ---------------------------------------------------------------------------
# montage
# ---------------------------------------------------------------------------


def _window_u8(slice2d: np.ndarray, domain: Domain) -> np.ndarray:
    """HU window [-1000, 1000] to 8-bit grayscale; UNIT maps through the same
    window after denormalization."""
    if domain is Domain.UNIT:
        hu = slice2d.astype(np.float64) * 2000.0 - 1000.0
    else:
        hu = slice2d.astype(np.float64)
    hu = np.clip(hu, -1000.0, 1000.0)
    return np.round((hu + 1000.0) / 2000.0 * 255.0).astype(np.uint8)


def _case_stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii", ".npz"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def cmd_montage(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [Path(p) for p in args.volumes or []]
    records = None
    samples_dir = None
    if args.samples:
        samples_dir = Path(args.samples)
        records = _read_jsonl(samples_dir / "samples.jsonl")
        paths += [samples_dir / rec["volume_path"] for rec in records]
    if not paths:
        raise ValidationError("nothing to render (give volume paths or --samples)")

    written = {}
    for path in paths:
        vol = load_volume(path)
        stem = _case_stem(path)
        outputs = []
        for plane, tag in ((Plane.XY, "xy"), (Plane.YZ, "yz"), (Plane.ZX, "zx")):
            slices = extract_plane_slices(vol, plane)
            mid = _window_u8(slices[len(slices) // 2], vol.domain)
            img_path = out / f"{stem}_{tag}.png"
            tmp = img_path.with_name(img_path.name + ".tmp.png")
            Image.fromarray(mid, mode="L").save(tmp, format="PNG")
            tmp.replace(img_path)
            outputs.append(img_path.name)
        written[path.name] = outputs
    if records is not None:
        for rec in records:
            rec["montage_paths"] = written.get(rec["volume_path"])
        tmp = samples_dir / "samples.jsonl.tmp"
        with open(tmp, "w") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
        tmp.replace(samples_dir / "samples.jsonl")
    print(f"wrote {3 * len(paths)} montage images to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctsynth",
        description="Report-conditional 3D CT synthesis: phantoms, codec and "
        "diffusion training, CFG-swept sampling, FID/CLIP-style evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument(
            "--config",
            default=None,
            help="JSON run config (default: $CTSYNTH_CONFIG if set, else built-in defaults)",
        )

    p = sub.add_parser("phantom-gen", help="generate the procedural phantom corpus")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", default=None, help="X,Y,Z volume shape (default 64,64,32)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("preprocess", help="clip/normalize and resample a manifest of volumes")
    add_config(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--grid", default=None, help="X,Y,Z target shape (default from config)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the codec (vae) or the denoiser (ldm)")
    add_config(p)
    p.add_argument("--stage", choices=("vae", "ldm"), required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--workdir", required=True, help="checkpoint directory")
    p.add_argument("--codec", default=None, help="codec checkpoint (default workdir/codec.pt)")
    p.add_argument("--steps", type=int, default=None, help="ldm: stop after this many steps")
    p.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cache-latents", help="encode the train split into a latent cache")
    add_config(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--workdir", required=True)
    p.add_argument("--codec", default=None)
    p.set_defaults(func=cmd_cache_latents)

    p = sub.add_parser("sample", help="sample volumes over the scales x seeds cross-product")
    add_config(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--workdir", required=True)
    p.add_argument("--codec", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--cases", default=None, help="comma-separated case ids (default: all train)")
    p.add_argument("--scales", default=None, help="comma-separated CFG scales (default from config)")
    p.add_argument("--seeds", default=None, help="comma-separated sampling seeds")
    p.add_argument("--steps", type=int, default=None, help="inference steps (default from config)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="score samples against the real set, one block per scale")
    add_config(p)
    p.add_argument("--manifest", default=None, help="real-set manifest")
    p.add_argument("--samples", required=True, help="directory written by sample")
    p.add_argument("--out", default=None, help="metrics JSON path (default samples/metrics.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("montage", help="render central-slice PNGs per orthogonal plane")
    p.add_argument("--volumes", nargs="*", default=None, help="volume files to render")
    p.add_argument("--samples", default=None, help="render every volume in a sample directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_montage)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CtSynthError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
