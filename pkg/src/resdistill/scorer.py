"""Image complexity scoring and top-p subset selection.

Two scoring modes share one interface: an entropy oracle (histogram entropy of
the downsampled clean image) and a learned patch-attention regressor trained to
predict those entropies. Scores are keyed by manifest id; selection takes the
top p fraction with ties broken by manifest order.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import CorpusManifest, load_image
from .errors import TrainingError, ValidationError
from .imageops import bilinear_downsample, min_max_normalize, shannon_entropy
from .seeding import derive_seed, rng_for

ENTROPY_MAX_BITS = 8.0


@dataclass(frozen=True)
class ComplexityScore:
    id: str
    raw_entropy: float  # bits (oracle) or bits mapped back from the regressor's label space
    normalized: float  # min-max over the scoring run, in [0, 1]
    source: str  # "oracle" | "learned"


@dataclass(frozen=True)
class SubsetSelection:
    selected_ids: tuple[str, ...]  # descending score, ties in manifest order
    p: float
    scores_used: str  # content tag of the scoring run


class _Block(nn.Module):
    """Pre-norm attention block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class EntropyRegressor(nn.Module):
    """Patch-attention complexity regressor with a sigmoid head.

    Patchify by strided convolution, add a learned positional grid (bilinearly
    resampled to the token grid so any input resolution works), run `depth`
    attention blocks, mean-pool and squash to (0, 1). `label_min`/`label_max`
    record the entropy range (bits) seen at training time so predictions can be
    mapped back to bits.
    """

    def __init__(self, patch: int = 16, dim: int = 48, depth: int = 2, heads: int = 4,
                 pos_grid: int = 8):
        super().__init__()
        if patch < 1 or dim < heads or depth < 0:
            raise ValidationError("invalid regressor config")
        self.patch = patch
        self.embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(1, dim, pos_grid, pos_grid))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, 1)
        self.register_buffer("label_min", torch.tensor(0.0))
        self.register_buffer("label_max", torch.tensor(ENTROPY_MAX_BITS))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] < self.patch or x.shape[-1] < self.patch:
            raise ValidationError(f"input smaller than patch size {self.patch}")
        z = self.embed(x)
        pos = F.interpolate(self.pos, size=z.shape[2:], mode="bilinear", align_corners=False)
        z = (z + pos).flatten(2).transpose(1, 2)
        for block in self.blocks:
            z = block(z)
        z = self.norm(z).mean(dim=1)
        return torch.sigmoid(self.head(z)).squeeze(-1)


def _to_tensor(img: np.ndarray) -> torch.Tensor:
    a = np.asarray(img, dtype=np.float32)
    if a.ndim == 2:
        a = np.repeat(a[:, :, None], 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]


def _load_hq(manifest: CorpusManifest, entry, images) -> np.ndarray:
    if images is not None and entry.id in images:
        return images[entry.id]
    try:
        return load_image(manifest.resolve(entry.hq_path))
    except OSError as exc:
        raise OSError(f"cannot read image for id {entry.id!r}: {exc}") from exc


def _resized(img: np.ndarray, resolution) -> np.ndarray:
    if resolution is None:
        return img
    return bilinear_downsample(img, resolution)


def scores_tag(scores) -> str:
    digest = hashlib.sha256()
    for s in scores:
        digest.update(f"{s.id}:{s.raw_entropy!r}:{s.source}\n".encode())
    return f"{scores[0].source if scores else 'empty'}:{digest.hexdigest()[:12]}"


def score_corpus(manifest: CorpusManifest, resolution=(128, 128), mode: str = "oracle",
                 scorer: EntropyRegressor | None = None, images=None) -> list[ComplexityScore]:
    """Score every entry's clean image at `resolution` (None = native size).

    `images` optionally maps id -> preloaded HxWx3 array, bypassing disk reads.
    Normalization is min-max over this run, so scores are comparable within a
    run but not across runs.
    """
    if mode not in ("oracle", "learned"):
        raise ValidationError(f"unknown scoring mode {mode!r}")
    if mode == "learned" and scorer is None:
        raise ValidationError("mode='learned' requires a scorer")
    if not manifest.entries:
        raise ValidationError("empty manifest")

    raw = np.empty(len(manifest.entries), dtype=np.float64)
    if mode == "oracle":
        for i, entry in enumerate(manifest.entries):
            raw[i] = shannon_entropy(_resized(_load_hq(manifest, entry, images), resolution))
    else:
        scorer.eval()
        lo = float(scorer.label_min)
        span = float(scorer.label_max) - lo
        with torch.no_grad():
            for i, entry in enumerate(manifest.entries):
                img = _resized(_load_hq(manifest, entry, images), resolution)
                pred = float(scorer(_to_tensor(img))[0])
                raw[i] = lo + span * pred
    normalized = min_max_normalize(raw)
    return [
        ComplexityScore(id=e.id, raw_entropy=float(r), normalized=float(n), source=mode)
        for e, r, n in zip(manifest.entries, raw, normalized)
    ]


def train_learned_scorer(manifest: CorpusManifest, epochs: int, lr: float, seed: int,
                         resolution=(128, 128), holdout_fraction: float = 0.2,
                         batch_size: int = 32, images=None,
                         patch: int = 16, dim: int = 48, depth: int = 2,
                         heads: int = 4) -> EntropyRegressor:
    """Fit the regressor to this corpus's own normalized oracle entropies.

    Labels are min-max normalized histogram entropies of the clean images at
    `resolution`; a held-out split tracks generalization. The returned scorer
    carries `train_history` with initial/final held-out loss.
    """
    if epochs < 0 or lr <= 0:
        raise ValidationError("epochs must be >= 0 and lr > 0")
    n = len(manifest.entries)
    if n < 2:
        raise ValidationError("need at least 2 images to train a scorer")

    arrays = [_resized(_load_hq(manifest, e, images), resolution) for e in manifest.entries]
    entropies = np.array([shannon_entropy(a) for a in arrays])
    if entropies.max() - entropies.min() <= 0.0:
        raise TrainingError("degenerate labels: all images have equal entropy")
    labels = min_max_normalize(entropies)

    order = rng_for(seed, "scorer", "split").permutation(n)
    n_hold = max(1, int(round(holdout_fraction * n))) if n > 2 else 1
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    if len(train_idx) == 0:
        train_idx = order

    torch.manual_seed(derive_seed(seed, "scorer", "init") % (2**31))
    model = EntropyRegressor(patch=patch, dim=dim, depth=depth, heads=heads)
    model.label_min.fill_(float(entropies.min()))
    model.label_max.fill_(float(entropies.max()))

    x_all = torch.cat([_to_tensor(a) for a in arrays]).float()
    y_all = torch.from_numpy(labels).float()

    def holdout_loss() -> float:
        model.eval()
        with torch.no_grad():
            pred = model(x_all[hold_idx])
            return float(F.mse_loss(pred, y_all[hold_idx]))

    history = {
        "holdout_initial": holdout_loss(),
        "holdout_final": None,
        "epoch_loss": [],
        "holdout_ids": [manifest.entries[i].id for i in hold_idx],
    }
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    shuffle_rng = rng_for(seed, "scorer", "shuffle")
    for _ in range(epochs):
        model.train()
        epoch_order = shuffle_rng.permutation(train_idx)
        losses = []
        for start in range(0, len(epoch_order), batch_size):
            idx = epoch_order[start:start + batch_size]
            opt.zero_grad()
            loss = F.mse_loss(model(x_all[idx]), y_all[idx])
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history["epoch_loss"].append(float(np.mean(losses)))
    history["holdout_final"] = holdout_loss()
    model.train_history = history
    model.eval()
    return model


def select_top_p(scores, p: float, tie_break: str = "by-manifest-index") -> SubsetSelection:
    """Top max(1, ceil(p*N)) ids by raw score, ties resolved by input position.

    The ranking key is the raw score, so the result is invariant under any
    strictly monotone rescaling (normalization included).
    """
    if tie_break != "by-manifest-index":
        raise ValidationError(f"unknown tie_break {tie_break!r}")
    scores = list(scores)
    if not scores:
        raise ValidationError("empty scores")
    if not 0.0 < p <= 1.0:
        raise ValidationError(f"p must be in (0, 1], got {p}")
    k = max(1, math.ceil(p * len(scores)))
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i].raw_entropy, i))
    return SubsetSelection(
        selected_ids=tuple(scores[i].id for i in ranked[:k]),
        p=float(p),
        scores_used=scores_tag(scores),
    )


def subset_manifest(manifest: CorpusManifest, selection: SubsetSelection) -> CorpusManifest:
    """Manifest restricted to the selection, preserving manifest order."""
    chosen = set(selection.selected_ids)
    missing = chosen - {e.id for e in manifest.entries}
    if missing:
        raise ValidationError(f"selection ids not in manifest: {sorted(missing)}")
    entries = [replace(e) for e in manifest.entries if e.id in chosen]
    return CorpusManifest(entries=entries, seed=manifest.seed,
                          version=manifest.version, root=manifest.root)


def apply_scores(manifest: CorpusManifest, scores) -> CorpusManifest:
    """Write normalized scores back into the manifest's score field, by id."""
    by_id = {s.id: s for s in scores}
    if set(by_id) != {e.id for e in manifest.entries}:
        raise ValidationError("score ids do not match manifest ids one-to-one")
    for entry in manifest.entries:
        entry.score = by_id[entry.id].normalized
    return manifest


def save_scores(scores, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "raw_entropy", "normalized", "source"])
        for s in scores:
            writer.writerow([s.id, repr(s.raw_entropy), repr(s.normalized), s.source])


def load_scores(path: Path) -> list[ComplexityScore]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            ComplexityScore(id=row["id"], raw_entropy=float(row["raw_entropy"]),
                            normalized=float(row["normalized"]), source=row["source"])
            for row in reader
        ]


def random_selection(manifest: CorpusManifest, p: float, seed: int) -> SubsetSelection:
    """Seeded uniform selection of max(1, ceil(p*N)) ids -- the comparison baseline."""
    n = len(manifest.entries)
    if n == 0:
        raise ValidationError("empty manifest")
    if not 0.0 < p <= 1.0:
        raise ValidationError(f"p must be in (0, 1], got {p}")
    k = max(1, math.ceil(p * n))
    idx = rng_for(seed, "random-selection").choice(n, size=k, replace=False)
    ids = tuple(manifest.entries[i].id for i in sorted(idx))
    return SubsetSelection(selected_ids=ids, p=float(p), scores_used=f"random:{seed}")
