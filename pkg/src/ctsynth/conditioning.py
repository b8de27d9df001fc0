"""Report conditioning: three text encoders, pooling, spacing projection.

A report's findings and impression sections are each tokenized and embedded by
three independent encoders (hidden widths 768, 768 and 1024), mean-pooled
under the attention mask, and concatenated into one 2560-wide vector per
section. Together with a learned affine projection of the voxel spacing this
yields the conditioning tensor the denoiser cross-attends over: three rows of
width 2560, ordered (findings, impression, spacing). The unconditional branch
uses the same tensor with every row zeroed.

The default encoder backend is deterministic and dependency-free: a seeded
embedding-table lookup per (encoder, token id), no contextual mixing. Real
pretrained encoders plug in through the adapter slot on EncoderSpec and must
honor the (seq_len, hidden_dim) output contract. Encoding is read-only and
safe to call concurrently; the toy backend's embedding cache tolerates
racing writers because entries are pure functions of their key.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, ShapeError, ValidationError

CONTEXT_DIM = 2560
NUM_CONTEXT_TOKENS = 3
CONTEXT_ROW_ORDER = ("findings", "impression", "spacing")

BOS_ID = 0
EOS_ID = 1
_HASH_SLOTS = 30_000

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Per-encoder seeds for the toy embedding tables. Arbitrary but fixed: the
# whole toy backend must be a pure function of (encoder id, token id).
_ENCODER_SEEDS = {"A": 101, "B": 202, "C": 303}

DEFAULT_SPACING_SEED = 7


@dataclass
class RadiologyReport:
    """Findings and impression text plus the acquisition voxel spacing."""

    findings: str
    impression: str
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        if not isinstance(self.findings, str) or not isinstance(self.impression, str):
            raise ValidationError("findings and impression must be strings")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or any(
            not math.isfinite(s) or s <= 0 for s in self.spacing_mm
        ):
            raise ValidationError(f"spacing_mm must be 3 positive reals, got {self.spacing_mm}")


@dataclass
class EncoderSpec:
    id: str
    hidden_dim: int
    max_tokens: int = 512
    backend: str = "toy-deterministic"
    adapter: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.backend not in ("toy-deterministic", "external-pretrained"):
            raise ValidationError(f"unknown encoder backend: {self.backend!r}")
        if self.backend == "external-pretrained" and self.adapter is None:
            raise ValidationError(f"encoder {self.id}: external backend needs an adapter")
        if self.max_tokens < 2:
            raise ValidationError("max_tokens must fit the two sentinel tokens")


DEFAULT_ENCODERS = (
    EncoderSpec("A", 768),
    EncoderSpec("B", 768),
    EncoderSpec("C", 1024),
)
assert sum(e.hidden_dim for e in DEFAULT_ENCODERS) == CONTEXT_DIM


@dataclass
class ConditioningTensor:
    """3 x 2560 cross-attention context. Row order: findings, impression, spacing."""

    context: np.ndarray
    is_null: bool = False

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float32)
        if self.context.shape != (NUM_CONTEXT_TOKENS, CONTEXT_DIM):
            raise ShapeError(
                f"conditioning must be {NUM_CONTEXT_TOKENS}x{CONTEXT_DIM}, "
                f"got {self.context.shape}"
            )
        if self.is_null and np.any(self.context != 0.0):
            raise ContractError("is_null conditioning must be exactly zero")


def tokenize(text: str, spec: EncoderSpec) -> tuple[np.ndarray, np.ndarray]:
    """Lowercase word tokenizer hashing into a fixed vocabulary.

    Returns (token_ids, attention_mask), both length <= spec.max_tokens, with
    begin/end sentinels always present. The hash is crc32, not Python's
    builtin hash, so ids are stable across interpreter runs.
    """
    words = _TOKEN_RE.findall(text.lower())[: spec.max_tokens - 2]
    ids = [BOS_ID]
    ids.extend(zlib.crc32(w.encode("utf-8")) % _HASH_SLOTS + 2 for w in words)
    ids.append(EOS_ID)
    ids = np.asarray(ids, dtype=np.int64)
    return ids, np.ones_like(ids)


def _toy_embedding(encoder_id: str, token_id: int, dim: int, cache={}) -> np.ndarray:
    key = (encoder_id, token_id)
    hit = cache.get(key)
    if hit is None:
        rng = np.random.default_rng([_ENCODER_SEEDS[encoder_id], token_id])
        hit = cache[key] = rng.standard_normal(dim).astype(np.float32)
    return hit


def encoder_forward(
    token_ids: np.ndarray, attention_mask: np.ndarray, spec: EncoderSpec
) -> np.ndarray:
    """Per-token hidden states, shape (seq_len, spec.hidden_dim)."""
    token_ids = np.asarray(token_ids)
    attention_mask = np.asarray(attention_mask)
    if token_ids.shape != attention_mask.shape:
        raise ShapeError("token_ids and attention_mask must have equal length")
    if spec.backend == "external-pretrained":
        hidden = np.asarray(spec.adapter(token_ids, attention_mask))
        if hidden.ndim != 2 or hidden.shape != (len(token_ids), spec.hidden_dim):
            raise ContractError(
                f"encoder {spec.id} adapter returned shape {hidden.shape}, "
                f"expected ({len(token_ids)}, {spec.hidden_dim})"
            )
        return hidden
    return np.stack([_toy_embedding(spec.id, int(t), spec.hidden_dim) for t in token_ids])


def masked_mean_pool(hidden_states: np.ndarray, attention_mask: np.ndarray) -> np.ndarray:
    """Mean of token states weighted by the mask: sum_t m[t] h[t] / sum_t m[t].

    Accumulates in float64 regardless of the input dtype. Raises on an
    all-zero mask since the mean is undefined there.
    """
    h = np.asarray(hidden_states, dtype=np.float64)
    m = np.asarray(attention_mask, dtype=np.float64)
    if h.ndim != 2 or m.ndim != 1 or h.shape[0] != m.shape[0]:
        raise ShapeError(
            f"expected (seq, dim) states with matching (seq,) mask, "
            f"got {h.shape} and {m.shape}"
        )
    total = m.sum()
    if total == 0:
        raise ContractError("attention mask selects no tokens; pooled mean is undefined")
    return (h * m[:, None]).sum(axis=0) / total


def encode_section(text: str, encoders: tuple[EncoderSpec, ...] = DEFAULT_ENCODERS) -> np.ndarray:
    """Pooled embedding of one report section, encoders concatenated in order."""
    parts = []
    for spec in encoders:
        ids, mask = tokenize(text, spec)
        parts.append(masked_mean_pool(encoder_forward(ids, mask, spec), mask))
    return np.concatenate(parts).astype(np.float32)


class SpacingEmbedding:
    """Affine map from the 3 spacing components to a 2560-wide context row.

    In the full system this layer trains with the denoiser; the desk pipeline
    keeps it frozen at its seeded initialization so conditioning stays a pure
    function of the report.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float32)
        self.bias = np.asarray(bias, dtype=np.float32)
        if self.weight.shape != (CONTEXT_DIM, 3) or self.bias.shape != (CONTEXT_DIM,):
            raise ShapeError(
                f"spacing map must be ({CONTEXT_DIM}, 3) + ({CONTEXT_DIM},), "
                f"got {self.weight.shape} and {self.bias.shape}"
            )

    @classmethod
    def seeded(cls, seed: int = DEFAULT_SPACING_SEED) -> "SpacingEmbedding":
        rng = np.random.default_rng(seed)
        weight = rng.standard_normal((CONTEXT_DIM, 3)).astype(np.float32) / math.sqrt(3.0)
        return cls(weight, np.zeros(CONTEXT_DIM, dtype=np.float32))

    @classmethod
    def zeros(cls) -> "SpacingEmbedding":
        return cls(np.zeros((CONTEXT_DIM, 3), dtype=np.float32), np.zeros(CONTEXT_DIM, dtype=np.float32))

    def __call__(self, spacing_mm) -> np.ndarray:
        spacing = np.asarray(spacing_mm, dtype=np.float32)
        if spacing.shape != (3,):
            raise ShapeError(f"spacing must have 3 components, got shape {spacing.shape}")
        if np.any(~np.isfinite(spacing)) or np.any(spacing <= 0):
            raise ValidationError(f"spacing components must be positive, got {spacing_mm}")
        return self.weight @ spacing + self.bias


_default_spacing_table: SpacingEmbedding | None = None


def default_spacing_table() -> SpacingEmbedding:
    global _default_spacing_table
    if _default_spacing_table is None:
        _default_spacing_table = SpacingEmbedding.seeded()
    return _default_spacing_table


def spacing_embedding(spacing_mm, table: SpacingEmbedding | None = None) -> np.ndarray:
    return (table or default_spacing_table())(spacing_mm)


def build_conditioning(
    report: RadiologyReport,
    encoders: tuple[EncoderSpec, ...] = DEFAULT_ENCODERS,
    spacing_table: SpacingEmbedding | None = None,
) -> ConditioningTensor:
    """Assemble the 3 x 2560 context: findings, impression, spacing rows."""
    context = np.stack(
        [
            encode_section(report.findings, encoders),
            encode_section(report.impression, encoders),
            spacing_embedding(report.spacing_mm, spacing_table),
        ]
    )
    return ConditioningTensor(context, is_null=False)


def null_conditioning() -> ConditioningTensor:
    """The all-zero context used for the unconditional branch and CFG dropout."""
    context = np.zeros((NUM_CONTEXT_TOKENS, CONTEXT_DIM), dtype=np.float32)
    return ConditioningTensor(context, is_null=True)
