"""Go/no-go gate: ten checks covering selection, losses, metrics, trends,
throughput, diagnostics, and end-to-end determinism.

Each test prints exactly one verdict line to the terminal:

    [criterion NN] <name>: PASS|FAIL (<measured numbers>)

Criteria 6 and 7 share a 2,000-pair corpus and fifteen training runs through
module-scoped fixtures; the whole module takes roughly half an hour on one CPU
thread. Everything is seeded, so the measured numbers are stable run to run.
"""

import math
import time
from collections import Counter
from collections.abc import Mapping

import numpy as np
import pytest
import torch

from conftest import degraded_memory_corpus, memory_corpus
from resdistill.corpus import (CorpusManifest, DegradationSpec, ImagePair, ManifestEntry,
                               degrade, largest_remainder_counts, make_clean_image)
from resdistill.diagnostics import pairwise_distance_cdf, qq_points
from resdistill.distill import (distribution_discrepancy, finetune_distribution,
                                gradient_match_loss, make_adjuster, sample_reference_pairs)
from resdistill.imageops import psnr, quantize8, shannon_entropy, ssim, to_uint8
from resdistill.pipeline import PipelineConfig, run_pipeline
from resdistill.scorer import (ComplexityScore, score_corpus, select_top_p, subset_manifest,
                               train_learned_scorer)
from resdistill.seeding import derive_seed, rng_for
from resdistill.trainer import (TrainConfig, evaluate, make_restoration_model,
                                train_restoration)

SWEEP_SEEDS = (11, 12, 13)
P_GRID = (0.01, 0.02, 0.05, 0.10)
MIX = [(DegradationSpec("noise", {"sigma": 25.0}), 0.5),
       (DegradationSpec("rain", {"density": 2000.0, "angle": 15.0}), 0.5)]


@pytest.fixture
def verdict(request):
    """Print one verdict line straight to the terminal, then assert."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(num: int, name: str, ok: bool, detail: str = ""):
        tail = f" ({detail})" if detail else ""
        line = f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'}{tail}"
        if capman is not None:
            with capman.global_and_fixture_disabled():
                print("\n" + line, flush=True)
        else:
            print("\n" + line, flush=True)
        assert ok, line

    return emit


# ------------------------------------------------------------------ 1


def test_criterion_01_selection_matches_sort_oracle(verdict):
    rng = rng_for(101, "selection")
    values = np.round(rng.random(1000) * 8.0, 2)
    values[:30] = 7.77  # tie group straddling the p=2% cut (k=20)
    scores = [ComplexityScore(id=f"s{i:04d}", raw_entropy=float(v), normalized=0.0,
                              source="oracle") for i, v in enumerate(values)]

    t0 = time.perf_counter()
    selection = select_top_p(scores, 0.02)
    elapsed = time.perf_counter() - t0

    k = max(1, math.ceil(0.02 * len(scores)))
    order = sorted(range(len(scores)), key=lambda i: (-values[i], i))
    expected = tuple(f"s{i:04d}" for i in order[:k])

    ok = selection.selected_ids == expected and elapsed < 1.0
    verdict(1, "top-p selection equals full-sort oracle", ok,
            f"{k} ids equal incl. boundary ties, {elapsed * 1e3:.1f} ms < 1 s")


# ------------------------------------------------------------------ 2


def _entropy_oracle(img: np.ndarray) -> float:
    """Plain-python histogram entropy, written independently of the library path."""
    if img.ndim == 2:
        lum = [float(v) for v in img.ravel()]
    else:
        lum = [0.299 * float(r) + 0.587 * float(g) + 0.114 * float(b)
               for r, g, b in img.reshape(-1, 3)]
    counts = Counter(min(255, max(0, int(math.floor(v * 255.0 + 0.5)))) for v in lum)
    n = len(lum)
    return -sum((c / n) * math.log2(c / n) for c in counts.values())


def test_criterion_02_entropy_matches_independent_oracle(verdict):
    rng = rng_for(102, "entropy")
    worst = 0.0
    for i in range(100):
        h, w = int(rng.integers(8, 40)), int(rng.integers(8, 40))
        if i % 2 == 0:
            img = rng.random((h, w, 3))
        else:
            img = make_clean_image(rng_for(102, "structured", i), h, w)
        worst = max(worst, abs(shannon_entropy(img) - _entropy_oracle(img)))
    flat = shannon_entropy(np.full((16, 16, 3), 0.25))
    ok = worst <= 1e-12 and flat == 0.0
    verdict(2, "luminance entropy equals independent oracle", ok,
            f"max |diff| {worst:.2e} <= 1e-12 over 100 images, constant image -> {flat}")


# ------------------------------------------------------------------ 3


def test_criterion_03_loss_identities(verdict):
    g = rng_for(103, "grad").normal(size=64)
    e1, e2 = np.zeros(64), np.zeros(64)
    e1[0], e2[1] = 1.0, 1.0

    d_same = abs(gradient_match_loss(g, g.copy()) - 0.0)
    d_orth = abs(gradient_match_loss(e1, e2) - 1.0)
    d_neg = abs(gradient_match_loss(g, -g) - 2.0)

    feats = torch.tensor([0.3, -1.2, 0.7, 2.0], dtype=torch.float64)
    d_self = abs(float(distribution_discrepancy(feats, feats.clone(), "kl")))
    ln2 = math.log(2.0)
    two_point = float(distribution_discrepancy(
        torch.tensor([0.0, ln2], dtype=torch.float64),
        torch.tensor([ln2, 0.0], dtype=torch.float64), "kl"))
    d_kl = abs(two_point - ln2 / 3.0)  # softmax pair (1/3, 2/3) against (2/3, 1/3)

    ok = all(d <= 1e-9 for d in (d_same, d_orth, d_neg, d_self, d_kl))
    verdict(3, "gradient-match and KL closed forms", ok,
            f"0/1/2 offsets {d_same:.1e}/{d_orth:.1e}/{d_neg:.1e}, self-KL {d_self:.1e}, "
            f"two-point KL offset {d_kl:.1e}, all <= 1e-9")


# ------------------------------------------------------------------ 4


def _params_vector(model) -> np.ndarray:
    return torch.cat([p.detach().double().flatten() for p in model.parameters()]).numpy()


def test_criterion_04_gradient_accumulation_equivalence(verdict):
    manifest, _, cache = degraded_memory_corpus(16, 32, 32, seed=40, tag="acc")
    t0 = time.perf_counter()
    results = {}
    for accum in (1, 4, 8):
        model = make_restoration_model(77)
        config = TrainConfig(epochs=1, batch=16, patch=32, lr0=3e-4, accum_steps=accum,
                             seed=5, steps_per_epoch=1)
        model, _ = train_restoration(model, manifest, config, images=cache)
        results[accum] = _params_vector(model)
    elapsed = time.perf_counter() - t0

    base = results[1]
    rel = {a: float(np.linalg.norm(results[a] - base) / np.linalg.norm(base))
           for a in (4, 8)}
    ok = max(rel.values()) <= 1e-5 and elapsed < 60.0
    verdict(4, "micro-batch accumulation equals one big batch", ok,
            f"rel param diff accum4 {rel[4]:.2e}, accum8 {rel[8]:.2e}, "
            f"both <= 1e-5, {elapsed:.1f} s < 60 s")


# ------------------------------------------------------------------ 5


def test_criterion_05_metric_identities(verdict):
    img = rng_for(105, "metric").random((24, 24, 3))
    p_same = psnr(img, img)
    shifted = np.clip(img, 0.0, 0.5) + 0.5  # values in [0.5, 1.0]
    mse = float(np.mean((shifted - np.clip(img, 0.0, 0.5)) ** 2))  # exactly 0.25
    p_known = psnr(np.clip(img, 0.0, 0.5), shifted)
    p_closed = 10.0 * math.log10(1.0 / mse)
    s_same = ssim(img, img)

    ok = (math.isinf(p_same) and p_same > 0
          and abs(p_known - p_closed) <= 1e-9
          and abs(s_same - 1.0) <= 1e-9)
    verdict(5, "PSNR/SSIM identities", ok,
            f"psnr(x,x)={p_same}, |psnr-closed| {abs(p_known - p_closed):.1e} <= 1e-9, "
            f"ssim(x,x)-1 {s_same - 1.0:.1e} within 1e-9")


# ------------------------------------------------------------------ 6 & 7 shared fixtures


def _paired_corpus(n: int, h: int, w: int, seed: int, tag: str):
    """Mixed noise/rain corpus held in memory; images live on the 8-bit grid."""
    counts = largest_remainder_counts([f for _, f in MIX], n)
    kind_index = np.repeat(np.arange(len(MIX)), counts)
    np.random.default_rng(derive_seed(seed, tag, "mix")).shuffle(kind_index)
    entries, pair_cache, hq_cache = [], {}, {}
    for i in range(n):
        spec = MIX[int(kind_index[i])][0]
        eid = f"{tag}{i:05d}"
        hq = quantize8(make_clean_image(rng_for(seed, tag, "clean", i), h, w))
        dseed = derive_seed(seed, tag, "degrade", i)
        lq = quantize8(degrade(hq, spec, dseed))
        pair_cache[eid] = (lq, hq)
        hq_cache[eid] = hq
        entries.append(ManifestEntry(id=eid, lq_path="", hq_path="", degradation=spec,
                                     width=w, height=h, seed=dseed))
    return CorpusManifest(entries=entries, seed=seed), pair_cache, hq_cache


@pytest.fixture(scope="module")
def trend_corpus():
    train_man, train_pairs, train_hq = _paired_corpus(2000, 64, 64, 1234, "tr")
    test_man, test_pairs, _ = _paired_corpus(100, 64, 64, 9999, "te")
    scores = score_corpus(train_man, resolution=None, mode="oracle", images=train_hq)
    selections = {p: select_top_p(scores, p) for p in P_GRID}
    subsets = {p: subset_manifest(train_man, selections[p]) for p in P_GRID}
    return {"train_man": train_man, "train_pairs": train_pairs, "test_man": test_man,
            "test_pairs": test_pairs, "selections": selections, "subsets": subsets}


def _train_and_eval(tc, pool_manifest, seed, images=None) -> float:
    model = make_restoration_model(seed)
    config = TrainConfig(epochs=6, batch=16, patch=64, accum_steps=1, seed=seed,
                         steps_per_epoch=50)
    model, _ = train_restoration(model, pool_manifest, config,
                                 images=tc["train_pairs"] if images is None else images)
    return evaluate(model, tc["test_man"], images=tc["test_pairs"]).mean_psnr


@pytest.fixture(scope="module")
def sweep_runs(trend_corpus):
    """Full-set plus four subset sizes, three seeds each: fifteen short trainings."""
    tc = trend_corpus
    t0 = time.perf_counter()
    per_seed = {seed: {} for seed in SWEEP_SEEDS}
    for seed in SWEEP_SEEDS:
        per_seed[seed]["full"] = _train_and_eval(tc, tc["train_man"], seed)
        for p in P_GRID:
            per_seed[seed][p] = _train_and_eval(tc, tc["subsets"][p], seed)
    elapsed = time.perf_counter() - t0
    means = {key: float(np.mean([per_seed[s][key] for s in SWEEP_SEEDS]))
             for key in ("full", *P_GRID)}
    return {"per_seed": per_seed, "means": means, "elapsed": elapsed}


# ------------------------------------------------------------------ 6


def test_criterion_06_subset_trend_tracks_full_training(sweep_runs, verdict):
    means = sweep_runs["means"]
    steps = [means[b] - means[a] for a, b in zip(P_GRID, P_GRID[1:])]
    worst_step = min(steps)
    ratio = means[P_GRID[-1]] / means["full"]
    minutes = sweep_runs["elapsed"] / 60.0

    trend_ok = all(s >= -0.3 for s in steps)
    floor_ok = means[P_GRID[-1]] >= 0.90 * means["full"]
    time_ok = sweep_runs["elapsed"] < 30 * 60
    grid = ", ".join(f"p={p:.0%} {means[p]:.2f}" for p in P_GRID)
    verdict(6, "PSNR vs subset size trend on 2000-pair corpus",
            trend_ok and floor_ok and time_ok,
            f"full {means['full']:.2f} dB; {grid}; worst step {worst_step:+.3f} dB "
            f">= -0.3; p=10% at {ratio:.3f}x full >= 0.90; {minutes:.1f} min < 30")


# ------------------------------------------------------------------ 7


def test_criterion_07_adjuster_finetuning_direction(trend_corpus, sweep_runs, verdict):
    tc = trend_corpus
    selection = tc["selections"][0.02]
    sub_man = tc["subsets"][0.02]
    subset_pairs = [ImagePair(id=e.id, lq=tc["train_pairs"][e.id][0],
                              hq=tc["train_pairs"][e.id][1], degradation=e.degradation,
                              seed=e.seed) for e in sub_man.entries]

    deltas = []
    for seed in SWEEP_SEEDS:
        adjuster = make_adjuster(derive_seed(seed, "adj"))
        task_model = make_restoration_model(derive_seed(seed, "ft-task"))
        refs = sample_reference_pairs(tc["train_man"], selection,
                                      seed=derive_seed(seed, "ref"), factor=4,
                                      images=tc["train_pairs"])
        ds = finetune_distribution(adjuster, subset_pairs, refs, task_model,
                                   steps=50, lr=1e-3, seed=derive_seed(seed, "ft"))
        adjusted_cache = {p.id: (p.lq, p.hq) for p in ds.adjusted_pairs}
        psnr_adj = _train_and_eval(tc, sub_man, seed, images=adjusted_cache)
        deltas.append(psnr_adj - sweep_runs["per_seed"][seed][0.02])
    mean_delta = float(np.mean(deltas))

    # alignment objective on a fixed batch: the pixel+divergence loss must halve
    _, small_pairs, _ = degraded_memory_corpus(2, 32, 32, seed=60, tag="fb")
    _, small_refs, _ = degraded_memory_corpus(8, 32, 32, seed=61, tag="fbr")
    ds_small = finetune_distribution(make_adjuster(12), small_pairs, small_refs,
                                     make_restoration_model(12, width=8),
                                     steps=200, lr=5e-3, seed=13, batch=8)
    start = ds_small.curve[0]["l2"] + ds_small.curve[0]["divergence"]
    end = ds_small.curve[-1]["l2"] + ds_small.curve[-1]["divergence"]
    drop = 1.0 - end / start

    ok = mean_delta >= -0.1 and drop >= 0.5
    verdict(7, "adjuster fine-tuning does not hurt, objective halves", ok,
            f"mean PSNR delta {mean_delta:+.3f} dB >= -0.1 over 3 seeds; "
            f"pixel+feature loss fell {drop:.0%} >= 50% on a fixed batch")


# ------------------------------------------------------------------ 8


class _Uint8Cache(Mapping):
    """Id -> image mapping that stores uint8 and converts on access (memory cap).

    Callers must not retain returned arrays across accesses: conversion reuses
    one float64 buffer per shape so access cost stays flat (no per-frame
    allocation) and identical for both timed arms. score_corpus reads images
    one at a time, so this holds on the timed path.
    """

    def __init__(self, store: dict):
        self._store = store
        self._buffers: dict = {}

    def __getitem__(self, key):
        raw = self._store[key]
        buf = self._buffers.get(raw.shape)
        if buf is None:
            buf = self._buffers.setdefault(raw.shape, np.empty(raw.shape))
        np.divide(raw, 255.0, out=buf)  # single pass; bit-equal to from_uint8
        return buf

    def __contains__(self, key):
        return key in self._store  # Mapping's default would convert the image

    def __iter__(self):
        return iter(self._store)

    def __len__(self):
        return len(self._store)


def _cheap_big_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorized texture (ramps + sinusoids + noise); fast enough for 500 frames."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.empty((size, size, 3))
    for c in range(3):
        fx, fy = rng.uniform(1.0, 6.0, 2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        img[:, :, c] = 0.5 + 0.2 * np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase) \
            + 0.15 * (xx - yy)
    img += rng.normal(0.0, 0.05, img.shape)
    return np.clip(img, 0.0, 1.0)


@pytest.fixture(scope="module")
def big_corpus():
    n, size = 500, 512
    entries, store = [], {}
    for i in range(n):
        eid = f"big{i:04d}"
        store[eid] = to_uint8(_cheap_big_image(rng_for(77, "big", i), size))
        entries.append(ManifestEntry(id=eid, lq_path="", hq_path="",
                                     degradation=DegradationSpec("none", {}),
                                     width=size, height=size, seed=0))
    return CorpusManifest(entries=entries, seed=77), _Uint8Cache(store)


def test_criterion_08_downsampled_scoring_throughput(big_corpus, verdict):
    manifest, images = big_corpus
    train_man, train_images = memory_corpus(80, 64, 64, seed=88)
    scorer = train_learned_scorer(train_man, epochs=3, lr=1e-3, seed=5,
                                  resolution=None, images=train_images)

    def run_scoring(resolution, subset=None):
        target = subset if subset is not None else manifest
        t0 = time.perf_counter()
        scores = score_corpus(target, resolution=resolution, mode="learned",
                              scorer=scorer, images=images)
        return time.perf_counter() - t0, [(s.id, s.raw_entropy, s.normalized)
                                          for s in scores]

    warmup = CorpusManifest(entries=manifest.entries[:3], seed=manifest.seed)
    run_scoring((128, 128), subset=warmup)  # torch warmup outside the timed window
    run_scoring(None, subset=warmup)

    t_fast_a, fast_a = run_scoring((128, 128))
    t_fast_b, fast_b = run_scoring((128, 128))
    t_full_a, full_a = run_scoring(None)
    t_full_b, full_b = run_scoring(None)
    t_fast, t_full = min(t_fast_a, t_fast_b), min(t_full_a, t_full_b)

    ratio = t_full / t_fast
    deterministic = fast_a == fast_b and full_a == full_b
    ok = ratio >= 10.0 and deterministic
    verdict(8, "scoring 500x512px corpus at 128px is 10x faster", ok,
            f"{t_full:.1f} s full-res vs {t_fast:.1f} s at 128 ({ratio:.1f}x >= 10x), "
            f"scores identical across repeats: {deterministic}")


# ------------------------------------------------------------------ 9


def test_criterion_09_diversity_diagnostics_oracle(verdict):
    emb = rng_for(109, "embed").normal(size=(200, 16))
    curve = pairwise_distance_cdf(emb, metric="euclidean-raw")

    dists = []
    for i in range(len(emb)):  # brute-force O(n^2) double loop
        for j in range(i + 1, len(emb)):
            diff = emb[i] - emb[j]
            dists.append(float(np.sqrt(np.sum(diff * diff))))
    dists.sort()
    total = len(dists)
    expected, seen = [], 0
    for value in dists:
        if expected and expected[-1][0] == value:
            seen += 1
            expected[-1] = (value, seen / total)
        else:
            seen += 1
            expected.append((value, seen / total))

    exact = curve.points == expected
    ys = [y for _, y in curve.points]
    monotone = all(b >= a for a, b in zip(ys, ys[1:])) and ys[-1] == 1.0

    sample = rng_for(109, "qq").normal(size=500)
    qq = qq_points(sample, sample, q=64)
    qq_off = max(abs(y - x) for x, y in qq.points)

    ok = exact and monotone and qq_off <= 1e-9
    verdict(9, "distance CDF equals brute force, QQ self-identity", ok,
            f"{total} pairwise distances float-exact, CDF non-decreasing to 1, "
            f"QQ max |y-x| {qq_off:.1e} <= 1e-9")


# ------------------------------------------------------------------ 10


def test_criterion_10_pipeline_determinism(tmp_path, verdict):
    config = PipelineConfig.resolve({
        "seed": 7,
        "corpus": {"count": 16, "test_count": 4, "size": [32, 32]},
        "selection": {"p": 0.5},
        "scoring": {"resolution": "full"},
        "distill": {"adjuster": True, "steps": 3, "latent": True, "latent_m": 2,
                    "latent_steps": 2, "decoder_epochs": 2},
        "training": {"epochs": 1, "batch": 4, "patch": 32, "steps_per_epoch": 4},
    })
    run_a = run_pipeline(config, tmp_path / "a")
    run_b = run_pipeline(config, tmp_path / "b")

    files_a = sorted(p.relative_to(run_a.report_dir)
                     for p in run_a.report_dir.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(run_b.report_dir)
                     for p in run_b.report_dir.rglob("*") if p.is_file())
    same_names = files_a == files_b
    same_bytes = same_names and all(
        (run_a.report_dir / rel).read_bytes() == (run_b.report_dir / rel).read_bytes()
        for rel in files_a)
    has_index = any(rel.name == "index.json" for rel in files_a)

    ok = same_names and same_bytes and has_index and len(files_a) >= 4
    verdict(10, "pipeline reruns emit byte-identical reports", ok,
            f"{len(files_a)} report files byte-identical across two fresh runs")
