"""Paired restoration corpora: synthetic degradations, generation, manifest I/O.

A corpus is a directory of lossless 8-bit PNG pairs plus a line-delimited
manifest (one JSON object per line; the first line is a meta record with the
format version and generation seed). Entry order is stable and used for
tie-breaking downstream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import kernels
from .errors import ConfigurationError, ValidationError
from .imageops import from_uint8, quantize8, to_uint8
from .seeding import derive_seed

MANIFEST_VERSION = "resdistill-corpus-1"

DEGRADATION_PARAMS = {
    "none": (),
    "noise": ("sigma",),          # 8-bit units, divided by 255 internally
    "rain": ("density", "angle"),  # streaks per megapixel, degrees from vertical
    "blur": ("radius",),          # gaussian radius in pixels
}


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEGRADATION_PARAMS:
            raise ConfigurationError(f"unknown degradation kind {self.kind!r}")
        expected = DEGRADATION_PARAMS[self.kind]
        for name in self.params:
            if name not in expected:
                raise ConfigurationError(f"unknown parameter {name!r} for kind {self.kind!r}")
        for name in expected:
            value = float(self.params.get(name, 0.0))
            if value < 0.0:
                raise ValidationError(f"parameter {name!r} must be non-negative, got {value}")

    def param(self, name: str) -> float:
        return float(self.params.get(name, 0.0))

    def is_identity(self) -> bool:
        if self.kind == "none":
            return True
        if self.kind == "noise":
            return self.param("sigma") == 0.0
        if self.kind == "rain":
            return self.param("density") == 0.0
        return self.param("radius") == 0.0

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": {k: float(v) for k, v in sorted(self.params.items())}}

    @classmethod
    def from_json(cls, obj: dict) -> "DegradationSpec":
        return cls(kind=obj["kind"], params=dict(obj.get("params", {})))


@dataclass
class ImagePair:
    """One clean/degraded sample; lq and hq are H x W x 3 float64 arrays in [0, 1]."""

    id: str
    lq: np.ndarray
    hq: np.ndarray
    degradation: DegradationSpec
    seed: int

    def validate(self):
        if self.lq.shape != self.hq.shape:
            raise ValidationError(f"{self.id}: lq/hq shape mismatch")
        for name, img in (("lq", self.lq), ("hq", self.hq)):
            if img.min() < 0.0 or img.max() > 1.0:
                raise ValidationError(f"{self.id}: {name} values outside [0, 1]")
        if self.degradation.kind == "none" and not np.array_equal(self.lq, self.hq):
            raise ValidationError(f"{self.id}: degradation 'none' but lq != hq")


def rain_streak_field(shape: tuple[int, int], density: float, angle_deg: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Additive streak field: bright line segments at a fixed angle, random length/position."""
    h, w = shape
    n = int(round(density * h * w / 1e6))
    out = np.zeros((h, w), dtype=np.float64)
    if n == 0:
        return out
    base = math.sqrt(h * w)
    theta = math.radians(angle_deg)
    dx, dy = math.sin(theta), math.cos(theta)
    cx = rng.uniform(-0.12 * base, w + 0.12 * base, n)
    cy = rng.uniform(-0.12 * base, h + 0.12 * base, n)
    length = rng.uniform(0.08, 0.22, n) * base
    amp = rng.uniform(0.12, 0.40, n)
    half = 0.5 * length
    kernels.add_line_segments(out, cx - half * dx, cy - half * dy,
                              cx + half * dx, cy + half * dy, amp)
    return out


def degrade(img: np.ndarray, spec: DegradationSpec, seed: int) -> np.ndarray:
    """Apply a degradation; deterministic given (img, spec, seed), output clamped to [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValidationError("input image values outside [0, 1]")
    if spec.is_identity():
        return a.copy()
    rng = np.random.default_rng(seed)
    if spec.kind == "noise":
        noisy = a + rng.normal(0.0, spec.param("sigma") / 255.0, a.shape)
        return np.clip(noisy, 0.0, 1.0)
    if spec.kind == "rain":
        streaks = rain_streak_field(a.shape[:2], spec.param("density"), spec.param("angle"), rng)
        if a.ndim == 3:
            streaks = streaks[:, :, None]
        return np.clip(a + streaks, 0.0, 1.0)
    # blur
    radius = spec.param("radius")
    sigma = (radius, radius, 0.0) if a.ndim == 3 else (radius, radius)
    return np.clip(gaussian_filter(a, sigma=sigma, mode="reflect"), 0.0, 1.0)


def make_clean_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Procedural clean scene with a per-image complexity level.

    Low complexity gives smooth gradients; high complexity stacks blobs,
    oriented waves and fine speckle, so corpus entropies spread widely.
    """
    complexity = rng.uniform(0.0, 1.0)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")

    c0 = rng.uniform(0.15, 0.85, 3)
    c1 = rng.uniform(0.15, 0.85, 3)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    ramp = math.cos(theta) * xx + math.sin(theta) * yy
    span = ramp.max() - ramp.min()
    if span > 0:
        ramp = (ramp - ramp.min()) / span
    img = c0[None, None, :] + ramp[:, :, None] * (c1 - c0)[None, None, :]

    n_blobs = int(round(complexity * 14.0))
    for _ in range(n_blobs):
        by, bx = rng.uniform(0.0, 1.0, 2)
        radius = rng.uniform(0.03, 0.22)
        color = rng.uniform(-0.6, 0.6, 3)
        blob = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2.0 * radius * radius))
        img += blob[:, :, None] * color[None, None, :]

    n_waves = int(round(complexity * 3.0))
    for _ in range(n_waves):
        freq = rng.uniform(2.0, 22.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        orient = rng.uniform(0.0, math.pi)
        amp = rng.uniform(0.02, 0.12)
        wave = np.sin(2.0 * math.pi * freq * (math.cos(orient) * xx + math.sin(orient) * yy) + phase)
        img += (amp * wave)[:, :, None] * rng.uniform(0.3, 1.0, 3)[None, None, :]

    speckle_amp = complexity * rng.uniform(0.0, 0.22)
    if speckle_amp > 0:
        speckle = gaussian_filter(rng.normal(0.0, 1.0, (h, w)), sigma=rng.uniform(0.6, 1.8))
        img += (speckle_amp * speckle)[:, :, None]

    return np.clip(img, 0.0, 1.0)


@dataclass
class ManifestEntry:
    id: str
    lq_path: str
    hq_path: str
    degradation: DegradationSpec
    width: int
    height: int
    seed: int
    score: float | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "lq_path": self.lq_path,
            "hq_path": self.hq_path,
            "degradation": {**self.degradation.to_json(), "seed": self.seed},
            "width": self.width,
            "height": self.height,
            "score": self.score,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ManifestEntry":
        deg = obj["degradation"]
        return cls(
            id=obj["id"],
            lq_path=obj["lq_path"],
            hq_path=obj["hq_path"],
            degradation=DegradationSpec.from_json(deg),
            width=int(obj["width"]),
            height=int(obj["height"]),
            seed=int(deg["seed"]),
            score=None if obj.get("score") is None else float(obj["score"]),
        )


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    seed: int
    version: str = MANIFEST_VERSION
    root: Path | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.entries)

    def validate_ids(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate manifest ids: {dupes}")

    def resolve(self, rel: str) -> Path:
        if self.root is None:
            raise ValidationError("manifest has no root directory; load it from disk first")
        return self.root / rel


def save_image(img: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_manifest(manifest: CorpusManifest, path: Path):
    manifest.validate_ids()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"version": manifest.version, "seed": manifest.seed})]
    lines += [json.dumps(e.to_json()) for e in manifest.entries]
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path: Path, check_paths: bool = True) -> CorpusManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty manifest")
    meta = json.loads(lines[0])
    entries = [ManifestEntry.from_json(json.loads(line)) for line in lines[1:] if line.strip()]
    manifest = CorpusManifest(
        entries=entries, seed=int(meta["seed"]), version=str(meta["version"]), root=path.parent
    )
    manifest.validate_ids()
    if check_paths:
        for e in entries:
            for rel in (e.lq_path, e.hq_path):
                if not (path.parent / rel).exists():
                    raise ValidationError(f"{e.id}: referenced image missing: {rel}")
    return manifest


def load_pair(manifest: CorpusManifest, entry: ManifestEntry) -> ImagePair:
    return ImagePair(
        id=entry.id,
        lq=load_image(manifest.resolve(entry.lq_path)),
        hq=load_image(manifest.resolve(entry.hq_path)),
        degradation=entry.degradation,
        seed=entry.seed,
    )


def largest_remainder_counts(fractions, total: int) -> list[int]:
    """Integer counts per fraction, exact for simple fractions, summing to total."""
    fr = [float(f) for f in fractions]
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must sum to 1, got {sum(fr)}")
    raw = [f * total for f in fr]
    counts = [int(math.floor(r)) for r in raw]
    remainders = sorted(range(len(fr)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(total - sum(counts)):
        counts[remainders[i % len(fr)]] += 1
    return counts


def synth_corpus(spec_mix, count: int, size: tuple[int, int], seed: int,
                 out_dir: Path, prefix: str = "img") -> CorpusManifest:
    """Generate a paired corpus on disk; byte-identical on rerun with the same seed.

    spec_mix is a sequence of (DegradationSpec, fraction). Per-kind counts use
    largest-remainder rounding; kind assignment order is shuffled from the seed.
    Each pair's randomness is keyed only by (seed, entry index).
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    h, w = int(size[0]), int(size[1])
    out_dir = Path(out_dir)
    specs = [s for s, _ in spec_mix]
    counts = largest_remainder_counts([f for _, f in spec_mix], count)
    kind_index = np.repeat(np.arange(len(specs)), counts)
    np.random.default_rng(derive_seed(seed, "mix")).shuffle(kind_index)

    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc

    entries = []
    for i in range(count):
        spec = specs[int(kind_index[i])]
        pair_id = f"{prefix}{i:05d}"
        clean_rng = np.random.default_rng(derive_seed(seed, "clean", i))
        hq = quantize8(make_clean_image(clean_rng, h, w))
        pair_seed = derive_seed(seed, "degrade", i)
        lq = quantize8(degrade(hq, spec, pair_seed))
        lq_rel = f"images/{pair_id}_lq.png"
        hq_rel = f"images/{pair_id}_hq.png"
        save_image(lq, out_dir / lq_rel)
        save_image(hq, out_dir / hq_rel)
        entries.append(ManifestEntry(
            id=pair_id, lq_path=lq_rel, hq_path=hq_rel, degradation=spec,
            width=w, height=h, seed=pair_seed,
        ))

    manifest = CorpusManifest(entries=entries, seed=seed, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
