"""Evaluation: 2.5D plane-wise FID, CLIP-style cosine scores, alignment oracle.

FID works slice-wise: every volume is cut along the three orthogonal planes,
each single-channel slice is replicated to three channels, standardized, and
pushed through a fixed 2D feature extractor; the pooled per-plane feature sets
are Gaussian-fit and compared with the Fréchet distance, and the three
plane scores are averaged.

The default extractor is a seeded random strided conv stack. Random features
are a legitimate basis for distribution comparison and keep the desk setup
free of pretrained weights; a pretrained 2D backbone can be dropped in behind
the same FeatureExtractorSpec. Likewise the CLIP-style scores run on an
oracle-free joint embedder that maps a phantom volume and its templated
report into one small shared space, so text/volume cosine scores exercise the
full metric plumbing without a contrastive model.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage
import torch

from .conditioning import RadiologyReport
from .dataset import QUADRANTS
from .errors import ContractError, InsufficientSamplesError, ValidationError
from .volumes import CtVolume, Domain, Plane, clip_and_normalize, extract_plane_slices, resample_to_grid

EMBED_DIM = 6


# ---------------------------------------------------------------------------
# Gaussian fits and the Fréchet distance
# ---------------------------------------------------------------------------


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.covariance.shape != (d, d):
            raise ValidationError(
                f"mean/covariance shapes inconsistent: {self.mean.shape} vs {self.covariance.shape}"
            )
        if self.sample_count < 2:
            raise ValidationError("GaussianStats needs sample_count >= 2")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8):
            raise ValidationError("covariance must be symmetric")


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased (n-1) covariance of row-vector features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValidationError(f"expected (n, d) feature array, got shape {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 feature vectors, got {n}")
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False, ddof=1)
    if cov.ndim == 0:  # single feature dimension
        cov = cov.reshape(1, 1)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mean, cov, n)


def _trace_sqrt_product(c1: np.ndarray, c2: np.ndarray) -> float:
    """Tr((c1 c2)^{1/2}) via the symmetric form c1^{1/2} c2 c1^{1/2}."""
    w1, v1 = np.linalg.eigh(c1)
    root1 = (v1 * np.sqrt(np.clip(w1, 0.0, None))) @ v1.T
    inner = root1 @ c2 @ root1
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None))))


def frechet_distance(g1: GaussianStats, g2: GaussianStats) -> float:
    """||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), clamped to be >= 0.

    Negative eigenvalues of the product (numerical noise for near-singular
    fits) are clamped to zero; if the eigendecomposition itself fails, a
    1e-6 ridge is added to both covariances and the computation retried.
    """
    if g1.mean.shape != g2.mean.shape:
        raise ValidationError(
            f"dimension mismatch: {g1.mean.shape[0]} vs {g2.mean.shape[0]}"
        )
    for g in (g1, g2):
        if not (np.isfinite(g.mean).all() and np.isfinite(g.covariance).all()):
            raise ValidationError("non-finite Gaussian statistics")
    diff = float(np.sum((g1.mean - g2.mean) ** 2))
    try:
        tr_sqrt = _trace_sqrt_product(g1.covariance, g2.covariance)
    except np.linalg.LinAlgError:
        ridge = 1e-6 * np.eye(g1.mean.shape[0])
        tr_sqrt = _trace_sqrt_product(g1.covariance + ridge, g2.covariance + ridge)
    d = diff + float(np.trace(g1.covariance) + np.trace(g2.covariance)) - 2.0 * tr_sqrt
    return max(d, 0.0)


# ---------------------------------------------------------------------------
# 2.5D feature extraction and FID
# ---------------------------------------------------------------------------


@dataclass
class FeatureExtractorSpec:
    """2D slice feature extractor. The seeded-random-conv backend is built-in;
    external pretrained backbones plug in through ``adapter`` (a callable
    mapping a (n, 3, h, w) float tensor to (n, feature_dim) features)."""

    backend: str = "seeded-random-conv"
    feature_dim: int = 64
    input_channels: int = 3
    seed: int = 0
    adapter: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.backend not in ("seeded-random-conv", "external-pretrained"):
            raise ValidationError(f"unknown extractor backend: {self.backend!r}")
        if self.feature_dim < 2:
            raise ValidationError("feature_dim must be >= 2")
        if self.input_channels != 3:
            raise ValidationError("extractor input is 3-channel")
        if self.backend == "external-pretrained" and self.adapter is None:
            raise ValidationError("external-pretrained backend requires an adapter")

    @property
    def extractor_id(self) -> str:
        if self.backend == "seeded-random-conv":
            return f"seeded-random-conv-d{self.feature_dim}-s{self.seed}"
        return f"external-pretrained-d{self.feature_dim}"


_CONV_STACKS: dict[tuple[int, int], torch.nn.Module] = {}


def _random_conv_stack(spec: FeatureExtractorSpec) -> torch.nn.Module:
    key = (spec.seed, spec.feature_dim)
    net = _CONV_STACKS.get(key)
    if net is None:
        gen = torch.Generator().manual_seed(spec.seed)
        layers = []
        cin = 3
        for cout in (16, 32, spec.feature_dim):
            conv = torch.nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / math.sqrt(fan_in)
                )
                conv.bias.zero_()
            layers += [conv, torch.nn.SiLU()]
            cin = cout
        net = torch.nn.Sequential(*layers[:-1]).eval()
        for p in net.parameters():
            p.requires_grad_(False)
        _CONV_STACKS[key] = net
    return net


def extract_features_2p5d(
    volume: CtVolume, plane: Plane, spec: FeatureExtractorSpec
) -> np.ndarray:
    """One pooled feature vector per slice of ``volume`` along ``plane``.

    Each slice is replicated to three channels, standardized per channel
    (constant slices map to zeros), run through the 2D extractor, and the
    feature map is spatially averaged. Returns (n_slices, feature_dim).
    """
    slices = np.ascontiguousarray(extract_plane_slices(volume, plane), dtype=np.float32)
    x = torch.from_numpy(slices)[:, None].repeat(1, 3, 1, 1)
    mean = x.mean(dim=(2, 3), keepdim=True)
    std = x.std(dim=(2, 3), keepdim=True, unbiased=False)
    x = (x - mean) / torch.clamp(std, min=1e-8)
    if spec.backend == "external-pretrained":
        feats = spec.adapter(x)
        feats = torch.as_tensor(feats)
    else:
        with torch.no_grad():
            feats = _random_conv_stack(spec)(x).mean(dim=(2, 3))
    if feats.ndim != 2 or feats.shape != (slices.shape[0], spec.feature_dim):
        raise ContractError(
            f"extractor emitted shape {tuple(feats.shape)}, "
            f"declared ({slices.shape[0]}, {spec.feature_dim})"
        )
    return feats.numpy().astype(np.float64)


@dataclass
class FidResult:
    fid_xy: float
    fid_yz: float
    fid_zx: float
    fid_mean: float
    slice_counts: dict[str, tuple[int, int]]


def _harmonize(volumes: list[CtVolume], target_shape: tuple[int, int, int]) -> list[CtVolume]:
    out = []
    for v in volumes:
        if v.domain is Domain.HU:
            v = clip_and_normalize(v)
        if v.data.shape != target_shape:
            v = resample_to_grid(v, target_shape)
        out.append(v)
    return out


def _canonical_rows(features: np.ndarray) -> np.ndarray:
    """Sort feature rows lexicographically so pooled statistics cannot depend
    on case or slice order even at the bit level (float accumulation is not
    commutative)."""
    return features[np.lexsort(features.T[::-1])]


def _plane_features(
    volumes: list[CtVolume], plane: Plane, spec: FeatureExtractorSpec, side: str
) -> np.ndarray:
    feats = np.concatenate([extract_features_2p5d(v, plane, spec) for v in volumes])
    if feats.shape[0] < spec.feature_dim:
        raise InsufficientSamplesError(
            f"plane {plane.value}: {side} set pooled {feats.shape[0]} slice features, "
            f"need >= feature_dim ({spec.feature_dim}) for a stable covariance"
        )
    return _canonical_rows(feats)


def fid_score(
    real_volumes: list[CtVolume],
    synth_volumes: list[CtVolume],
    spec: FeatureExtractorSpec | None = None,
) -> FidResult:
    """Plane-wise 2.5D FID and its mean over XY / YZ / ZX.

    HU-domain inputs are clipped and normalized first; if shapes differ
    across the pooled sets, everything is resampled to the modal shape.
    """
    if not real_volumes or not synth_volumes:
        raise ValidationError("both volume sets must be non-empty")
    spec = spec or FeatureExtractorSpec()
    shapes = Counter(v.data.shape for v in real_volumes + synth_volumes)
    target = shapes.most_common(1)[0][0]
    real = _harmonize(list(real_volumes), target)
    synth = _harmonize(list(synth_volumes), target)

    scores = {}
    counts = {}
    for plane in (Plane.XY, Plane.YZ, Plane.ZX):
        fr = _plane_features(real, plane, spec, "real")
        fs = _plane_features(synth, plane, spec, "synth")
        scores[plane] = frechet_distance(fit_gaussian(fr), fit_gaussian(fs))
        counts[plane.value] = (fr.shape[0], fs.shape[0])
    return FidResult(
        fid_xy=scores[Plane.XY],
        fid_yz=scores[Plane.YZ],
        fid_zx=scores[Plane.ZX],
        fid_mean=(scores[Plane.XY] + scores[Plane.YZ] + scores[Plane.ZX]) / 3.0,
        slice_counts=counts,
    )


# ---------------------------------------------------------------------------
# CLIP-style cosine scores
# ---------------------------------------------------------------------------


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValidationError(f"vector length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


@dataclass
class JointEmbedderSpec:
    """Shared text/volume embedding space. ``oracle-free`` derives a small
    geometric embedding from the phantom templates and blob detection;
    external contrastive models plug in via the two adapter callables."""

    backend: str = "oracle-free"
    embed_dim: int = EMBED_DIM
    volume_adapter: object = field(default=None, repr=False, compare=False)
    text_adapter: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.backend not in ("oracle-free", "external-pretrained"):
            raise ValidationError(f"unknown embedder backend: {self.backend!r}")
        if self.backend == "external-pretrained" and (
            self.volume_adapter is None or self.text_adapter is None
        ):
            raise ValidationError("external-pretrained backend requires both adapters")

    @property
    def embedder_id(self) -> str:
        if self.backend == "oracle-free":
            return f"oracle-free-d{self.embed_dim}"
        return f"external-pretrained-d{self.embed_dim}"


_FINDINGS_RE = re.compile(
    r"(?P<primitive>[a-z]+) of radius (?P<radius>\d+) voxels in the "
    r"(?P<quadrant>lower-left|lower-right|upper-left|upper-right) region"
)


def _parse_findings(text: str) -> dict:
    m = _FINDINGS_RE.search(text.lower())
    if m is None:
        raise ValidationError(f"findings text does not match the phantom template: {text!r}")
    return {
        "primitive": m.group("primitive"),
        "radius": int(m.group("radius")),
        "quadrant": m.group("quadrant"),
    }


def _detect_blob(volume: CtVolume) -> tuple[str, float]:
    """Brightest connected component above the 99th percentile.

    Returns (quadrant, equivalent radius in voxels); a volume with no usable
    contrast comes back as ("none", 0.0).
    """
    if volume.domain is Domain.HU:
        volume = clip_and_normalize(volume)
    data = volume.data
    if float(data.max() - data.min()) < 1e-9:
        return "none", 0.0
    mask = data >= np.percentile(data, 99.0)
    labels, n = scipy.ndimage.label(mask)
    if n == 0:
        return "none", 0.0
    idx = np.arange(1, n + 1)
    means = scipy.ndimage.mean(data, labels, index=idx)
    best = int(np.argmax(means)) + 1
    cx, cy, _ = scipy.ndimage.center_of_mass(mask, labels, best)
    X, Y, _ = data.shape
    quadrant = ("upper-" if cy >= Y / 2 else "lower-") + (
        "right" if cx >= X / 2 else "left"
    )
    voxels = int(np.sum(labels == best))
    radius = (3.0 * voxels / (4.0 * math.pi)) ** (1.0 / 3.0)
    return quadrant, radius


def _geometry_embedding(quadrant: str, radius: float) -> np.ndarray:
    onehot = np.zeros(len(QUADRANTS))
    if quadrant in QUADRANTS:
        onehot[QUADRANTS.index(quadrant)] = 1.0
    e = np.concatenate([onehot, [radius / 64.0, 1.0]])
    return e / np.linalg.norm(e)


def embed_volume(volume: CtVolume, spec: JointEmbedderSpec) -> np.ndarray:
    if spec.backend == "external-pretrained":
        e = np.asarray(spec.volume_adapter(volume), dtype=np.float64).ravel()
    else:
        e = _geometry_embedding(*_detect_blob(volume))
    if e.shape[0] != spec.embed_dim:
        raise ContractError(f"volume embedding dim {e.shape[0]} != declared {spec.embed_dim}")
    return e / np.linalg.norm(e)


def embed_report(report: RadiologyReport, spec: JointEmbedderSpec) -> np.ndarray:
    if spec.backend == "external-pretrained":
        e = np.asarray(spec.text_adapter(report), dtype=np.float64).ravel()
    else:
        parsed = _parse_findings(report.findings)
        e = _geometry_embedding(parsed["quadrant"], float(parsed["radius"]))
    if e.shape[0] != spec.embed_dim:
        raise ContractError(f"text embedding dim {e.shape[0]} != declared {spec.embed_dim}")
    return e / np.linalg.norm(e)


def clip_scores(
    generated: CtVolume,
    prompt: RadiologyReport,
    reference: CtVolume,
    spec: JointEmbedderSpec | None = None,
    case_id: str = "",
) -> tuple[float, float]:
    """(t2i, i2i) cosine scores for one generated case, both in [-1, 1]."""
    spec = spec or JointEmbedderSpec()
    try:
        gen_e = embed_volume(generated, spec)
        t2i = cosine_similarity(gen_e, embed_report(prompt, spec))
        i2i = cosine_similarity(gen_e, embed_volume(reference, spec))
    except (ValidationError, ContractError) as e:
        raise type(e)(f"case {case_id or '<unnamed>'}: {e}") from e
    return t2i, i2i


# ---------------------------------------------------------------------------
# Phantom alignment oracle
# ---------------------------------------------------------------------------


@dataclass
class AlignmentResult:
    hit: bool
    detected_quadrant: str
    expected_quadrant: str


def phantom_alignment_score(generated: CtVolume, spec_text: str) -> AlignmentResult:
    """Does the generated volume's brightest blob sit in the quadrant the
    findings text asked for? Flat volumes detect as "none" and miss."""
    expected = _parse_findings(spec_text)["quadrant"]
    detected, _ = _detect_blob(generated)
    return AlignmentResult(detected == expected, detected, expected)


def alignment_accuracy(volumes: list[CtVolume], texts: list[str]) -> float:
    if len(volumes) != len(texts):
        raise ValidationError("volumes and texts must pair 1:1")
    if not volumes:
        raise InsufficientSamplesError("alignment accuracy over an empty set")
    hits = sum(phantom_alignment_score(v, t).hit for v, t in zip(volumes, texts))
    return hits / len(volumes)
