"""Dataset manifest (JSON Lines) and the procedural phantom corpus.

The manifest pairs each volume file with the two report sections and the
acquisition spacing. Phantoms are the desk-scale stand-in for real CT/report
pairs: a single bright primitive placed in one of the four axial quadrants of
a noisy background, with findings text templated from the geometry so that
text/volume alignment is mechanically checkable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .conditioning import RadiologyReport
from .errors import ManifestError, ShapeError, ValidationError
from .volumes import CtVolume, Domain

SPLITS = ("train", "val")

QUADRANTS = ("lower-left", "lower-right", "upper-left", "upper-right")
PRIMITIVES = ("sphere", "ellipsoid")

_ENTRY_FIELDS = ("volume_path", "findings", "impression", "spacing_mm", "split")


@dataclass
class ManifestEntry:
    volume_path: str
    findings: str
    impression: str
    spacing_mm: tuple[float, float, float]
    split: str

    @property
    def case_id(self) -> str:
        name = Path(self.volume_path).name
        for suffix in (".nii.gz", ".nii", ".npz"):
            if name.endswith(suffix):
                return name[: -len(suffix)]
        return name

    def report(self) -> RadiologyReport:
        return RadiologyReport(self.findings, self.impression, self.spacing_mm)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def volume_file(self, entry: ManifestEntry) -> Path:
        p = Path(entry.volume_path)
        return p if p.is_absolute() else self.root / p


def _parse_entry(record: dict, lineno: int) -> ManifestEntry:
    for name in _ENTRY_FIELDS:
        if name not in record:
            raise ManifestError(f'line {lineno}: missing field "{name}"')
    unknown = set(record) - set(_ENTRY_FIELDS)
    if unknown:
        raise ManifestError(f'line {lineno}: unknown field "{sorted(unknown)[0]}"')
    for name in ("volume_path", "findings", "impression", "split"):
        if not isinstance(record[name], str):
            raise ManifestError(f'line {lineno}: field "{name}" must be a string')
    if record["split"] not in SPLITS:
        raise ManifestError(
            f'line {lineno}: split must be one of {SPLITS}, got "{record["split"]}"'
        )
    spacing = record["spacing_mm"]
    if (
        not isinstance(spacing, (list, tuple))
        or len(spacing) != 3
        or not all(isinstance(s, (int, float)) for s in spacing)
    ):
        raise ManifestError(f"line {lineno}: spacing_mm must be a list of 3 numbers")
    if any(not math.isfinite(s) or s <= 0 for s in spacing):
        raise ManifestError(f"line {lineno}: spacing_mm must be positive, got {spacing}")
    return ManifestEntry(
        volume_path=record["volume_path"],
        findings=record["findings"],
        impression=record["impression"],
        spacing_mm=tuple(float(s) for s in spacing),
        split=record["split"],
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a JSONL manifest. Errors cite 1-based line numbers."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    seen = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(record, dict):
                raise ManifestError(f"line {lineno}: expected a JSON object")
            entry = _parse_entry(record, lineno)
            if entry.volume_path in seen:
                raise ManifestError(
                    f"line {lineno}: duplicate volume_path "
                    f'"{entry.volume_path}" (first seen on line {seen[entry.volume_path]})'
                )
            seen[entry.volume_path] = lineno
            entries.append(entry)
    return DatasetManifest(entries, root=path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        for e in manifest.entries:
            f.write(
                json.dumps(
                    {
                        "volume_path": e.volume_path,
                        "findings": e.findings,
                        "impression": e.impression,
                        "spacing_mm": list(e.spacing_mm),
                        "split": e.split,
                    }
                )
                + "\n"
            )
    return path


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    """Geometry of a single bright primitive inside one axial quadrant.

    ``radius_voxels`` is the semi-axis along x; ellipsoids shrink y and z by
    fixed ratios (0.75 and 0.5). The primitive must fit strictly inside its
    quadrant in x/y and inside the grid in z.
    """

    grid_shape: tuple[int, int, int] = (64, 64, 32)
    primitive: str = "sphere"
    center_quadrant: str = "upper-right"
    radius_voxels: int = 9
    intensity: float = 0.85
    seed: int = 0
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 2.0)

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValidationError(f"unknown primitive: {self.primitive!r}")
        if self.center_quadrant not in QUADRANTS:
            raise ValidationError(f"unknown quadrant: {self.center_quadrant!r}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValidationError(f"intensity must be in [0, 1], got {self.intensity}")
        if self.radius_voxels < 0:
            raise ValidationError("radius_voxels must be >= 0")
        if len(self.grid_shape) != 3 or any(g < 1 for g in self.grid_shape):
            raise ShapeError(f"bad grid shape {self.grid_shape}")
        X, Y, Z = self.grid_shape
        x0 = X // 2 if "right" in self.center_quadrant else 0
        y0 = Y // 2 if "upper" in self.center_quadrant else 0
        lows = (x0, y0, 0)
        highs = (x0 + X // 2 - 1, y0 + Y // 2 - 1, Z - 1)
        semis = (int(math.ceil(s)) for s in self.semi_axes())
        for ax, (c, a, lo, hi) in enumerate(zip(self.center(), semis, lows, highs)):
            if c - a < lo or c + a > hi:
                raise ShapeError(
                    f"{self.primitive} of radius {self.radius_voxels} does not fit "
                    f"inside the {self.center_quadrant} quadrant of grid "
                    f"{self.grid_shape} (axis {ax})"
                )

    def semi_axes(self) -> tuple[float, float, float]:
        r = float(self.radius_voxels)
        if self.primitive == "sphere":
            return (r, r, r)
        return (r, 0.75 * r, 0.5 * r)

    def center(self) -> tuple[int, int, int]:
        """Center voxel: the middle of the designated quadrant, mid-grid in z.

        Deliberately not randomized. Each quadrant label then maps to one
        spatial mode, which keeps the text-to-location task learnable from
        eight examples; a handful of cases cannot pin down a jittered
        placement distribution.
        """
        X, Y, Z = self.grid_shape
        x0 = X // 2 if "right" in self.center_quadrant else 0
        y0 = Y // 2 if "upper" in self.center_quadrant else 0
        return (x0 + X // 4, y0 + Y // 4, Z // 2)


def generate_phantom(spec: PhantomSpec) -> tuple[CtVolume, RadiologyReport]:
    """Render a phantom volume and its templated report.

    Pure function of the spec: the background noise (uniform amplitude 0.05)
    comes from a generator seeded with ``spec.seed``, the primitive sits at
    the quadrant's center voxel, and voxels inside it are set to
    ``spec.intensity`` exactly.
    """
    rng = np.random.default_rng(spec.seed)
    vol = rng.uniform(0.0, 0.05, size=spec.grid_shape).astype(np.float32)
    coords = [np.arange(n) - c for n, c in zip(spec.grid_shape, spec.center())]
    dx = coords[0][:, None, None]
    dy = coords[1][None, :, None]
    dz = coords[2][None, None, :]
    if spec.primitive == "sphere":
        # Integer arithmetic so the boundary shell d == r is included exactly.
        inside = dx * dx + dy * dy + dz * dz <= spec.radius_voxels**2
    else:
        a, b, c = (max(s, 0.5) for s in spec.semi_axes())
        inside = (dx / a) ** 2 + (dy / b) ** 2 + (dz / c) ** 2 <= 1.0
    vol[inside] = spec.intensity

    findings = (
        f"{spec.primitive} of radius {spec.radius_voxels} voxels "
        f"in the {spec.center_quadrant} region"
    )
    impression = f"single {spec.primitive}, {spec.center_quadrant} region"
    report = RadiologyReport(findings, impression, spec.spacing_mm)
    return CtVolume(vol, spec.spacing_mm, Domain.UNIT), report


# Two sphere sizes rather than sphere-plus-ellipsoid: same-quadrant cases
# then sit close together in latent space, so the conditional routing task a
# desk-scale denoiser faces is four well-separated clusters instead of eight
# modes of wildly different signal strength. Ellipsoids stay available
# through PhantomSpec for targeted tests.
_VARIANTS = (("sphere", 9, 0.85), ("sphere", 7, 0.85))


def default_phantom_specs(
    count: int = 8,
    seed: int = 0,
    grid_shape: tuple[int, int, int] = (64, 64, 32),
) -> list[PhantomSpec]:
    """The stock corpus: quadrants cycle fastest, primitive variants slowest."""
    specs = []
    for i in range(count):
        primitive, radius, intensity = _VARIANTS[(i // 4) % len(_VARIANTS)]
        specs.append(
            PhantomSpec(
                grid_shape=grid_shape,
                primitive=primitive,
                center_quadrant=QUADRANTS[i % 4],
                radius_voxels=radius,
                intensity=intensity,
                seed=seed * 100003 + i,
            )
        )
    return specs
