"""Distribution alignment for selected subsets.

Two mechanisms, composable:

* An adjuster CNN (stride-1 3x3 convolutions, residual output, identity at
  initialization) is fine-tuned so the adjusted subset matches the full corpus:
  a pixel L2 pull toward paired reference images, a divergence penalty between
  pooled feature distributions, and the restoration task loss on the adjusted
  pairs, all minimized jointly while the restoration model co-trains.
* Optional latent synthesis: latent codes of a small trained autoencoder are
  optimized so restoration-loss gradients on decoded synthetic samples match
  those on the selected real samples, anchored to the real samples' latents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corpus import (CorpusManifest, DegradationSpec, ImagePair, degrade, load_pair,
                     rain_streak_field)
from .errors import DivergenceError, UndefinedCosineError, ValidationError
from .imageops import quantize8
from .scorer import SubsetSelection
from .seeding import derive_seed, rng_for

_EPS = 1e-12


class AdjusterCNN(nn.Module):
    """Stack of `depth` 3x3 stride-1 convolutions with a residual output head.

    The final convolution is zero-initialized, so a fresh adjuster is exactly
    the identity map. `features()` exposes the ReLU output of convolution
    `feature_layer` (1-indexed, default mid-depth), shape (width, H, W).
    """

    def __init__(self, depth: int = 8, width: int = 16, feature_layer: int | None = None):
        super().__init__()
        if depth < 1 or width < 1:
            raise ValidationError("depth and width must be >= 1")
        self.depth = depth
        self.width = width
        self.feature_layer = max(1, depth // 2) if feature_layer is None else feature_layer
        if not 1 <= self.feature_layer <= depth:
            raise ValidationError(f"feature_layer must be in [1, {depth}]")
        convs = []
        for i in range(depth):
            cin = 3 if i == 0 else width
            cout = 3 if i == depth - 1 else width
            convs.append(nn.Conv2d(cin, cout, 3, stride=1, padding=1))
        self.convs = nn.ModuleList(convs)
        nn.init.zeros_(self.convs[-1].weight)
        nn.init.zeros_(self.convs[-1].bias)

    def _run(self, x: torch.Tensor, upto: int) -> torch.Tensor:
        for i in range(upto):
            x = self.convs[i](x)
            if i < self.depth - 1:
                x = F.relu(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self._run(x, self.depth)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        z = self._run(x, self.feature_layer)
        if self.feature_layer == self.depth:
            z = F.relu(z)
        return z


def make_adjuster(seed: int, depth: int = 8, width: int = 16) -> AdjusterCNN:
    torch.manual_seed(derive_seed(seed, "adjuster", "init") % (2**31))
    return AdjusterCNN(depth=depth, width=width)


def _img_to_tensor(img: np.ndarray) -> torch.Tensor:
    a = np.asarray(img, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValidationError(f"expected HxWx3 image, got shape {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))


def _tensor_to_img(t: torch.Tensor) -> np.ndarray:
    return t.detach().numpy().astype(np.float64).transpose(1, 2, 0)


def extract_features(adjuster: AdjusterCNN, img: np.ndarray) -> np.ndarray:
    """Feature map (width, H, W) of one image from the designated layer."""
    x = _img_to_tensor(img)[None]
    adjuster.eval()
    with torch.no_grad():
        return adjuster.features(x)[0].numpy().astype(np.float64)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


def _maybe_float(x: torch.Tensor):
    return x if x.requires_grad else float(x)


def gradient_match_loss(grads_S, grads_T):
    """1 - cosine similarity of two flattened gradient vectors, in [0, 2].

    Differentiable when given tensors that carry grad; returns a plain float
    otherwise. With exactly one zero vector the cosine is taken as 0 (loss 1);
    with both zero it is undefined.
    """
    s, t = _as_tensor(grads_S).flatten(), _as_tensor(grads_T).flatten()
    if s.shape != t.shape:
        raise ValidationError(f"gradient dimensions differ: {tuple(s.shape)} vs {tuple(t.shape)}")
    ns, nt = torch.linalg.vector_norm(s), torch.linalg.vector_norm(t)
    if float(ns.detach()) == 0.0 and float(nt.detach()) == 0.0:
        raise UndefinedCosineError("cosine of two zero gradient vectors is undefined")
    cos = torch.dot(s, t) / torch.clamp(ns * nt, min=_EPS)
    return _maybe_float(1.0 - cos)


def pooled_logits(features) -> torch.Tensor:
    """Channel-first features pooled to one logit per channel (mean over the rest)."""
    f = _as_tensor(features)
    if f.ndim == 0:
        raise ValidationError("features must have at least one dimension")
    return f if f.ndim == 1 else f.flatten(1).mean(dim=1)


def distribution_discrepancy(F_a, F_b, mode: str = "kl"):
    """Divergence between two feature maps.

    kl: KL(softmax(pool(F_a)) || softmax(pool(F_b))) in nats, >= 0, 0 iff the
    pooled softmax distributions coincide. cosine: 1 - cosine of the flattened
    maps. Channel is the leading axis; 1-D input is treated as already pooled.
    """
    a, b = _as_tensor(F_a), _as_tensor(F_b)
    if a.shape != b.shape:
        raise ValidationError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if not (torch.isfinite(a.detach()).all() and torch.isfinite(b.detach()).all()):
        raise ValidationError("non-finite feature values")
    if mode == "kl":
        log_p = F.log_softmax(pooled_logits(a), dim=0)
        log_q = F.log_softmax(pooled_logits(b), dim=0)
        return _maybe_float(torch.sum(torch.exp(log_p) * (log_p - log_q)))
    if mode == "cosine":
        af, bf = a.flatten(), b.flatten()
        na, nb = torch.linalg.vector_norm(af), torch.linalg.vector_norm(bf)
        if float(na) == 0.0 and float(nb) == 0.0:
            return _maybe_float(torch.zeros(()))  # identical zero maps
        cos = torch.dot(af, bf) / torch.clamp(na * nb, min=_EPS)
        return _maybe_float(1.0 - cos)
    raise ValidationError(f"unknown discrepancy mode {mode!r}")


def pixel_feature_loss(img_a, img_b, F_a, F_b, mode: str = "kl"):
    """Image-space L2 norm plus feature distribution discrepancy."""
    a, b = _as_tensor(img_a), _as_tensor(img_b)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    pixel = torch.linalg.vector_norm(a.flatten() - b.flatten())
    total = pixel + distribution_discrepancy(F_a, F_b, mode)
    return _maybe_float(total) if isinstance(total, torch.Tensor) else total


@dataclass
class DistilledSet:
    real_subset: SubsetSelection
    adjusted_pairs: list[ImagePair]
    synthetic_pairs: list[ImagePair] = field(default_factory=list)
    adjuster: AdjusterCNN | None = None
    provenance: dict = field(default_factory=dict)
    curve: list[dict] = field(default_factory=list)  # {step, l2, divergence, task}


def sample_reference_pairs(manifest: CorpusManifest, selection: SubsetSelection, seed: int,
                           factor: int = 4, images=None) -> list[ImagePair]:
    """Fixed seeded sample of the full corpus, factor x subset size, as alignment targets."""
    n = len(manifest.entries)
    k = min(n, max(1, factor * len(selection.selected_ids)))
    idx = sorted(rng_for(seed, "reference-sample").choice(n, size=k, replace=False))
    out = []
    for i in idx:
        entry = manifest.entries[i]
        if images is not None and entry.id in images:
            lq, hq = images[entry.id]
            out.append(ImagePair(id=entry.id, lq=lq, hq=hq,
                                 degradation=entry.degradation, seed=entry.seed))
        else:
            out.append(load_pair(manifest, entry))
    return out


def finetune_distribution(adjuster: AdjusterCNN, subset_pairs, reference_pairs,
                          restoration_model, steps: int, lr: float, seed: int,
                          mode: str = "kl", batch: int = 8) -> DistilledSet:
    """Jointly fine-tune the adjuster (and co-train the restoration model).

    Each step draws a subset batch, adjusts its HQ/LQ images, and minimizes
    pixel_feature_loss(adjusted HQ, paired reference HQ, pooled features of
    each) plus the restoration MSE on the adjusted pair. Reference pairing is
    a fixed seeded assignment; a batch covering the whole subset is held fixed
    across steps. Adjusted outputs are clamped and rounded to the 8-bit grid
    like every corpus image. steps=0 returns the subset unchanged (identity
    initialization).
    """
    subset_pairs = list(subset_pairs)
    reference_pairs = list(reference_pairs)
    if not subset_pairs:
        raise ValidationError("empty subset")
    if not reference_pairs:
        raise ValidationError("empty reference sample")
    if steps < 0:
        raise ValidationError(f"steps must be >= 0, got {steps}")

    s_hq = torch.stack([_img_to_tensor(p.hq) for p in subset_pairs])
    s_lq = torch.stack([_img_to_tensor(p.lq) for p in subset_pairs])
    r_hq = torch.stack([_img_to_tensor(p.hq) for p in reference_pairs])

    rng = rng_for(seed, "finetune")
    pair_of = rng.integers(0, len(reference_pairs), size=len(subset_pairs))
    batch = min(batch, len(subset_pairs))
    curve = []

    if steps > 0:
        params = list(adjuster.parameters()) + list(restoration_model.parameters())
        opt = torch.optim.AdamW(params, lr=lr)
        adjuster.train()
        restoration_model.train()
        full_batch = batch >= len(subset_pairs)
        for step in range(steps):
            idx = np.arange(len(subset_pairs)) if full_batch \
                else rng.integers(0, len(subset_pairs), size=batch)
            bs_hq, bs_lq = s_hq[idx], s_lq[idx]
            br_hq = r_hq[pair_of[idx]]

            a_hq = adjuster(bs_hq)
            a_lq = adjuster(bs_lq)
            f_a = pooled_logits(adjuster.features(a_hq).mean(dim=0))
            f_b = pooled_logits(adjuster.features(br_hq).mean(dim=0))

            pixel = torch.linalg.vector_norm(a_hq.flatten() - br_hq.flatten())
            divergence = distribution_discrepancy(f_a, f_b, mode)
            task = F.mse_loss(restoration_model(a_lq), a_hq)
            total = pixel + divergence + task
            if not torch.isfinite(total.detach()):
                raise DivergenceError(f"non-finite fine-tuning loss at step {step}", step=step)

            opt.zero_grad()
            total.backward()
            opt.step()
            curve.append({"step": step, "l2": float(pixel.detach()),
                          "divergence": float(divergence.detach()),
                          "task": float(task.detach())})

    adjuster.eval()
    adjusted = []
    with torch.no_grad():
        for i, pair in enumerate(subset_pairs):
            a_hq = adjuster(s_hq[i:i + 1]).clamp(0.0, 1.0)[0]
            a_lq = adjuster(s_lq[i:i + 1]).clamp(0.0, 1.0)[0]
            adjusted.append(ImagePair(id=pair.id, lq=quantize8(_tensor_to_img(a_lq)),
                                      hq=quantize8(_tensor_to_img(a_hq)),
                                      degradation=pair.degradation, seed=pair.seed))

    selection = SubsetSelection(selected_ids=tuple(p.id for p in subset_pairs), p=float("nan"),
                                scores_used="caller")
    return DistilledSet(real_subset=selection, adjusted_pairs=adjusted, adjuster=adjuster,
                        provenance={"steps": steps, "lr": lr, "seed": seed, "mode": mode},
                        curve=curve)


class ConvAutoencoder(nn.Module):
    """Small convolutional autoencoder with a flat latent of dimension D.

    Fixed input size (h, w), both divisible by 8. decode() clamps to [0, 1];
    decode_raw() is the unclamped path used for training and optimization.
    """

    def __init__(self, image_size=(64, 64), latent_dim: int = 64, width: int = 16):
        super().__init__()
        h, w = image_size
        if h % 8 or w % 8:
            raise ValidationError("autoencoder image size must be divisible by 8")
        if latent_dim < 1:
            raise ValidationError("latent_dim must be >= 1")
        self.image_size = (h, w)
        self.latent_dim = latent_dim
        self.width = width
        self.flat = 4 * width * (h // 8) * (w // 8)
        self.encoder = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 4 * width, 4, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.to_latent = nn.Linear(self.flat, latent_dim)
        self.from_latent = nn.Linear(latent_dim, self.flat)
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * width, 2 * width, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def _check(self, x: torch.Tensor):
        if tuple(x.shape[-2:]) != self.image_size:
            raise ValidationError(
                f"expected input size {self.image_size}, got {tuple(x.shape[-2:])}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.to_latent(self.encoder(x).flatten(1))

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        h, w = self.image_size
        grid = self.from_latent(z).reshape(-1, 4 * self.width, h // 8, w // 8)
        return self.decoder(grid)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(0.0, 1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(self.encode(x))


def train_decoder(hq_images, epochs: int, lr: float, seed: int, latent_dim: int = 64,
                  width: int = 16, batch: int = 16) -> ConvAutoencoder:
    """Fit the autoencoder to clean images by reconstruction MSE.

    Returns the model with `train_history` = {initial, final, epoch_loss};
    the final training reconstruction loss must come out below the initial one
    for any reasonable epochs/lr (asserted by tests, not here).
    """
    images = [np.asarray(im) for im in hq_images]
    if len(images) < 2:
        raise ValidationError("need at least 2 images to train a decoder")
    if epochs < 0 or lr <= 0:
        raise ValidationError("epochs must be >= 0 and lr > 0")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValidationError(f"images must share one shape, got {sorted(shapes)}")
    h, w, _ = images[0].shape

    torch.manual_seed(derive_seed(seed, "decoder", "init") % (2**31))
    model = ConvAutoencoder(image_size=(h, w), latent_dim=latent_dim, width=width)
    x_all = torch.stack([_img_to_tensor(im) for im in images])

    def recon_loss() -> float:
        model.eval()
        with torch.no_grad():
            return float(F.mse_loss(model(x_all), x_all))

    history = {"initial": recon_loss(), "final": None, "epoch_loss": []}
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    order_rng = rng_for(seed, "decoder", "order")
    for epoch in range(epochs):
        model.train()
        losses = []
        perm = order_rng.permutation(len(images))
        for start in range(0, len(images), batch):
            idx = perm[start:start + batch]
            opt.zero_grad()
            xb = x_all[idx]
            loss = F.mse_loss(model(xb), xb)
            if not torch.isfinite(loss.detach()):
                raise DivergenceError(f"non-finite reconstruction loss in epoch {epoch}",
                                      step=epoch)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history["epoch_loss"].append(float(np.mean(losses)))
    history["final"] = recon_loss()
    model.train_history = history
    model.eval()
    return model


def _gaussian_blur_kernel(radius: float) -> torch.Tensor:
    """1-D Gaussian matching the corpus blur (sigma = radius, truncate 4 sigma)."""
    half = int(4.0 * radius + 0.5)
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / radius) ** 2)
    return torch.from_numpy(k / k.sum()).float()


def _differentiable_degrade(hq: torch.Tensor, spec: DegradationSpec, seed: int) -> torch.Tensor:
    """Torch-side analogue of corpus.degrade with constant randomness from `seed`.

    Noise and rain add a fixed field drawn exactly as the corpus generator
    draws it; blur is a separable Gaussian convolution. No clamping, so
    gradients pass through unattenuated.
    """
    _, h, w = hq.shape
    rng = np.random.default_rng(seed)
    if spec.is_identity():
        return hq
    if spec.kind == "noise":
        noise = rng.normal(0.0, spec.param("sigma") / 255.0, (h, w, 3))
        return hq + torch.from_numpy(noise.transpose(2, 0, 1)).float()
    if spec.kind == "rain":
        streaks = rain_streak_field((h, w), spec.param("density"), spec.param("angle"), rng)
        return hq + torch.from_numpy(streaks).float()[None]
    k = _gaussian_blur_kernel(spec.param("radius"))
    pad = (len(k) - 1) // 2
    x = hq[None]
    x = F.pad(x, (0, 0, pad, pad), mode="reflect")
    x = F.conv2d(x, k.reshape(1, 1, -1, 1).repeat(3, 1, 1, 1), groups=3)
    x = F.pad(x, (pad, pad, 0, 0), mode="reflect")
    x = F.conv2d(x, k.reshape(1, 1, 1, -1).repeat(3, 1, 1, 1), groups=3)
    return x[0]


def _flat_grads(loss: torch.Tensor, params, create_graph: bool) -> torch.Tensor:
    grads = torch.autograd.grad(loss, params, create_graph=create_graph, allow_unused=False)
    return torch.cat([g.flatten() for g in grads])


def distill_latents(decoder: ConvAutoencoder, selected_pairs, restoration_model, m: int,
                    steps: int, lr: float, seed: int,
                    history: list | None = None) -> list[ImagePair]:
    """Optimize m latent codes so synthetic samples train like the real ones.

    Latents start at the encodings of the first m selected pairs. The objective
    is gradient_match_loss between the restoration-loss gradients on the
    synthetic batch and on the real batch, plus the mean squared latent
    distance to the initialization. The best latents seen (including the
    initialization) are decoded, so the final objective never exceeds the
    starting one. Synthetic LQ images re-apply each source's degradation.
    """
    selected_pairs = list(selected_pairs)
    if m < 1:
        raise ValidationError(f"m must be >= 1, got {m}")
    if m > len(selected_pairs):
        raise ValidationError(
            f"m={m} exceeds the {len(selected_pairs)} available real samples")
    sources = selected_pairs[:m]

    real_lq = torch.stack([_img_to_tensor(p.lq) for p in sources])
    real_hq = torch.stack([_img_to_tensor(p.hq) for p in sources])
    params = [p for p in restoration_model.parameters() if p.requires_grad]
    restoration_model.eval()

    with torch.no_grad():
        z0 = decoder.encode(real_hq).detach()

    g_real = _flat_grads(F.mse_loss(restoration_model(real_lq), real_hq), params,
                         create_graph=False).detach()

    def objective(z: torch.Tensor, graph: bool) -> torch.Tensor:
        hq_syn = decoder.decode_raw(z)
        lq_syn = torch.stack([
            _differentiable_degrade(hq_syn[i], src.degradation, src.seed)
            for i, src in enumerate(sources)
        ])
        g_syn = _flat_grads(F.mse_loss(restoration_model(lq_syn), hq_syn), params,
                            create_graph=graph)
        return gradient_match_loss(g_syn, g_real) + F.mse_loss(z, z0)

    torch.manual_seed(derive_seed(seed, "latents") % (2**31))
    z = z0.clone().requires_grad_(True)
    best_z, best_val = z0.clone(), float(objective(z0, graph=False))
    if history is not None:
        history.append({"step": -1, "objective": best_val})
    if steps > 0:
        opt = torch.optim.Adam([z], lr=lr)
        for step in range(steps):
            opt.zero_grad()
            val = objective(z, graph=True)
            if not torch.isfinite(val.detach()):
                raise DivergenceError(f"non-finite latent objective at step {step}", step=step)
            val.backward()
            opt.step()
            current = float(objective(z.detach(), graph=False))
            if history is not None:
                history.append({"step": step, "objective": current})
            if current < best_val:
                best_val, best_z = current, z.detach().clone()
    restoration_model.zero_grad(set_to_none=True)

    with torch.no_grad():
        hq_syn = decoder.decode(best_z).numpy().astype(np.float64)
    out = []
    for i, src in enumerate(sources):
        hq_img = quantize8(hq_syn[i].transpose(1, 2, 0))
        lq_img = quantize8(degrade(hq_img, src.degradation, src.seed))
        out.append(ImagePair(id=f"syn-{src.id}", lq=lq_img, hq=hq_img,
                             degradation=src.degradation, seed=src.seed))
    return out
