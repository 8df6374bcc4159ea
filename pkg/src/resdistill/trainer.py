"""Restoration model, training loop with gradient accumulation, and evaluation.

The model is a compact 3-scale encoder-decoder with skip connections, a global
residual path, and no batch-dependent normalization, so gradients averaged over
micro-batches equal the full-batch gradient and accumulation is exactly
equivalent. Training pairs random crops with a cosine-annealed AdamW schedule.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import CorpusManifest, load_image
from .errors import ConfigurationError, DivergenceError, ValidationError
from .imageops import psnr, quantize8, ssim
from .seeding import derive_seed, rng_for

CHECKPOINT_VERSION = "resdistill-checkpoint-1"


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
    )


class RestorationNet(nn.Module):
    """Encoder-decoder restorer: 3 scales, skip connections, global residual."""

    def __init__(self, width: int = 16):
        super().__init__()
        if width < 1:
            raise ValidationError(f"width must be >= 1, got {width}")
        w = width
        self.width = width
        self.enc1 = _conv_block(3, w)
        self.down1 = nn.Conv2d(w, 2 * w, 2, stride=2)
        self.enc2 = _conv_block(2 * w, 2 * w)
        self.down2 = nn.Conv2d(2 * w, 4 * w, 2, stride=2)
        self.mid = _conv_block(4 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _conv_block(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _conv_block(2 * w, w)
        self.out = nn.Conv2d(w, 3, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValidationError("input height and width must be divisible by 4")
        e1 = self.enc1(x)
        e2 = self.enc2(self.down1(e1))
        m = self.mid(self.down2(e2))
        d2 = self.dec2(torch.cat([self.up2(m), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return x + self.out(d1)


def make_restoration_model(seed: int, width: int = 16) -> RestorationNet:
    """Seeded construction so independently created models are identical."""
    torch.manual_seed(derive_seed(seed, "restoration", "init") % (2**31))
    return RestorationNet(width=width)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch: int = 16
    patch: int = 64
    lr0: float = 3e-4
    accum_steps: int = 1
    weight_decay: float = 0.0
    seed: int = 0
    steps_per_epoch: int | None = None  # None: one shuffled pass over the pool

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch < 1 or self.accum_steps < 1:
            raise ConfigurationError("batch and accum_steps must be >= 1")
        if self.batch % self.accum_steps:
            raise ConfigurationError(
                f"batch ({self.batch}) must be divisible by accum_steps ({self.accum_steps})")
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if self.patch < 4 or self.patch % 4:
            raise ConfigurationError(f"patch must be a positive multiple of 4, got {self.patch}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigurationError("steps_per_epoch must be >= 1 when set")

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs, "batch": self.batch, "patch": self.patch,
            "lr0": self.lr0, "accum_steps": self.accum_steps,
            "weight_decay": self.weight_decay, "seed": self.seed,
            "steps_per_epoch": self.steps_per_epoch,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)  # {step, lr, loss}
    epochs: list[dict] = field(default_factory=list)  # {epoch, mean_loss, val_psnr, val_ssim}


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 at step 0 to 0 at step == total_steps."""
    if total_steps < 1:
        raise ValidationError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def _pair_arrays(manifest: CorpusManifest, images=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Preload (lq, hq) float32 CHW arrays for every entry."""
    out = []
    for entry in manifest.entries:
        if images is not None and entry.id in images:
            lq, hq = images[entry.id]
        else:
            lq = load_image(manifest.resolve(entry.lq_path))
            hq = load_image(manifest.resolve(entry.hq_path))
        out.append((
            np.ascontiguousarray(np.asarray(lq, dtype=np.float32).transpose(2, 0, 1)),
            np.ascontiguousarray(np.asarray(hq, dtype=np.float32).transpose(2, 0, 1)),
        ))
    return out


def _epoch_sample_indices(n_pool: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Concatenated fresh permutations of the pool, truncated to n_samples."""
    reps = math.ceil(n_samples / n_pool)
    idx = np.concatenate([rng.permutation(n_pool) for _ in range(reps)])
    return idx[:n_samples]


def _crop(pair, patch: int, rng: np.random.Generator):
    lq, hq = pair
    _, h, w = lq.shape
    if h < patch or w < patch:
        raise ValidationError(f"image {h}x{w} smaller than training patch {patch}")
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    return lq[:, y:y + patch, x:x + patch], hq[:, y:y + patch, x:x + patch]


def train_restoration(model: RestorationNet, manifest: CorpusManifest, config: TrainConfig,
                      val_manifest: CorpusManifest | None = None, images=None,
                      val_images=None) -> tuple[RestorationNet, TrainHistory]:
    """MSE training with cosine annealing and micro-batch gradient accumulation.

    Each optimizer step averages gradients over `accum_steps` equal micro-batches
    of `batch / accum_steps` crops. The epoch pool order is reshuffled every
    epoch; `steps_per_epoch` decouples compute from pool size when set.
    Deterministic given config.seed.
    """
    if not manifest.entries:
        raise ValidationError("empty training manifest")
    pairs = _pair_arrays(manifest, images)
    n_pool = len(pairs)
    steps_per_epoch = config.steps_per_epoch
    if steps_per_epoch is None:
        steps_per_epoch = max(1, n_pool // config.batch)
    total_steps = max(1, config.epochs * steps_per_epoch)

    opt = torch.optim.AdamW(model.parameters(), lr=config.lr0,
                            weight_decay=config.weight_decay)
    sample_rng = rng_for(config.seed, "train", "order")
    crop_rng = rng_for(config.seed, "train", "crop")
    history = TrainHistory()
    micro = config.batch // config.accum_steps
    global_step = 0

    for epoch in range(config.epochs):
        idx = _epoch_sample_indices(n_pool, steps_per_epoch * config.batch, sample_rng)
        epoch_losses = []
        for s in range(steps_per_epoch):
            lr = cosine_lr(global_step, total_steps, config.lr0)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad()
            batch_idx = idx[s * config.batch:(s + 1) * config.batch]
            step_loss = 0.0
            for m in range(config.accum_steps):
                crops = [_crop(pairs[i], config.patch, crop_rng)
                         for i in batch_idx[m * micro:(m + 1) * micro]]
                lq = torch.from_numpy(np.stack([c[0] for c in crops]))
                hq = torch.from_numpy(np.stack([c[1] for c in crops]))
                loss = F.mse_loss(model(lq), hq)
                (loss / config.accum_steps).backward()
                step_loss += float(loss.detach()) / config.accum_steps
            if not math.isfinite(step_loss):
                raise DivergenceError(f"non-finite loss at step {global_step}", step=global_step)
            opt.step()
            history.steps.append({"step": global_step, "lr": lr, "loss": step_loss})
            epoch_losses.append(step_loss)
            global_step += 1

        record = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)),
                  "val_psnr": None, "val_ssim": None}
        if val_manifest is not None:
            table = evaluate(model, val_manifest, images=val_images)
            record["val_psnr"], record["val_ssim"] = table.mean_psnr, table.mean_ssim
        history.epochs.append(record)

    return model, history


@dataclass
class EvalTable:
    rows: list[dict]  # per-image {id, psnr, ssim} then a final {"id": "mean", ...} row

    @property
    def mean_psnr(self) -> float:
        return self.rows[-1]["psnr"]

    @property
    def mean_ssim(self) -> float:
        return self.rows[-1]["ssim"]


def restore_image(model: RestorationNet, lq: np.ndarray) -> np.ndarray:
    """Full-image inference, output clamped to [0, 1], HxWx3 float64."""
    x = torch.from_numpy(
        np.ascontiguousarray(np.asarray(lq, dtype=np.float32).transpose(2, 0, 1))
    )[None]
    model.eval()
    with torch.no_grad():
        y = model(x).clamp(0.0, 1.0)
    return y[0].numpy().astype(np.float64).transpose(1, 2, 0)


def evaluate(model: RestorationNet, manifest: CorpusManifest, images=None) -> EvalTable:
    """Full-image PSNR/SSIM per entry plus a trailing mean row.

    Restored outputs are rounded to the 8-bit grid before the metrics, matching
    how saved restorations would be measured.
    """
    if not manifest.entries:
        raise ValidationError("empty test manifest")
    rows = []
    for entry in manifest.entries:
        if images is not None and entry.id in images:
            lq, hq = images[entry.id]
        else:
            lq = load_image(manifest.resolve(entry.lq_path))
            hq = load_image(manifest.resolve(entry.hq_path))
        out = quantize8(restore_image(model, lq))
        rows.append({"id": entry.id, "psnr": psnr(out, hq), "ssim": ssim(out, hq)})
    rows.append({
        "id": "mean",
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
    })
    return EvalTable(rows=rows)


def _float_str(x) -> str:
    if x is None:
        return ""
    if math.isinf(x):
        return "inf"
    return repr(float(x))


def save_eval_table(table: EvalTable, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "psnr", "ssim"])
        for row in table.rows:
            writer.writerow([row["id"], _float_str(row["psnr"]), _float_str(row["ssim"])])


def save_history(history: TrainHistory, csv_path: Path, jsonl_path: Path):
    csv_path, jsonl_path = Path(csv_path), Path(jsonl_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for rec in history.steps:
            writer.writerow([rec["step"], _float_str(rec["lr"]), _float_str(rec["loss"])])
    jsonl_path.parent.mkdir(parents=True, exist_ok=True)
    with jsonl_path.open("w") as fh:
        for rec in history.epochs:
            fh.write(json.dumps(rec) + "\n")


def save_checkpoint(module: nn.Module, path: Path, config: dict | None = None):
    """Versioned parameter blob: one array per state entry plus a JSON meta echo."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = module.state_dict()
    meta = {
        "version": CHECKPOINT_VERSION,
        "class": type(module).__name__,
        "config": config or {},
        "keys": list(state.keys()),
    }
    arrays = {f"param_{i}": state[k].detach().numpy() for i, k in enumerate(state)}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: Path, module: nn.Module) -> dict:
    """Load parameters saved by save_checkpoint into `module`; returns the meta dict."""
    path = Path(path)
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValidationError(f"unsupported checkpoint version in {path}")
            state = {k: torch.from_numpy(np.array(data[f"param_{i}"]))
                     for i, k in enumerate(meta["keys"])}
    except (OSError, zipfile.BadZipFile, KeyError, ValueError, EOFError) as exc:
        raise ValidationError(f"unreadable checkpoint {path}: {exc}") from exc
    module.load_state_dict(state)
    return meta
