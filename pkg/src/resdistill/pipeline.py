"""End-to-end pipeline: synth -> score -> select -> distill -> train -> eval -> report.

Stages are content-addressed: each stage directory is keyed by a chained hash
of every config section that can influence it, so re-running an unchanged
config reuses completed stages, and two configs differing only downstream
share their upstream stages. A stage directory without a completion marker is
treated as partial and rebuilt from scratch.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .corpus import (CorpusManifest, DegradationSpec, load_image, load_manifest, load_pair,
                     save_manifest, synth_corpus)
from .diagnostics import emit_report, kde_1d, pairwise_distance_cdf, qq_points
from .distill import (distill_latents, extract_features, finetune_distribution, make_adjuster,
                      sample_reference_pairs, train_decoder)
from .errors import ConfigurationError
from .imageops import bilinear_downsample
from .scorer import (apply_scores, load_scores, random_selection, save_scores, score_corpus,
                     select_top_p, subset_manifest, train_learned_scorer, SubsetSelection)
from .seeding import derive_seed
from .trainer import (TrainConfig, evaluate, make_restoration_model, save_checkpoint,
                      save_eval_table, save_history, train_restoration)

MARKER = "_COMPLETE.json"

DEFAULT_MIX = [
    {"kind": "noise", "params": {"sigma": 25.0}, "fraction": 0.5},
    {"kind": "rain", "params": {"density": 2000.0, "angle": 15.0}, "fraction": 0.5},
]

DEFAULTS = {
    "seed": 0,
    "corpus": {
        "count": 200,
        "test_count": 50,
        "size": [64, 64],
        "mix": DEFAULT_MIX,
    },
    "scoring": {
        "mode": "oracle",  # oracle | learned
        "resolution": [128, 128],  # [H, W], an integer, or "full"
        "learned": {"epochs": 20, "lr": 1e-3},
    },
    "selection": {"p": 0.02},
    "distill": {
        "adjuster": True,
        "steps": 100,
        "lr": 1e-3,
        "loss_mode": "kl",  # kl | cosine
        "reference_factor": 4,
        "depth": 8,
        "width": 16,
        "latent": False,
        "latent_m": 4,
        "latent_steps": 20,
        "latent_lr": 3e-3,
        "decoder_epochs": 10,
        "decoder_lr": 1e-3,
        "latent_dim": 64,
    },
    "training": {
        "epochs": 4,
        "batch": 16,
        "patch": 64,
        "lr0": 3e-4,
        "accum_steps": 1,
        "weight_decay": 0.0,
        "steps_per_epoch": None,
        "model_width": 16,
    },
    "sweep": {"p": [], "accum": [], "resolution": [], "adjuster_depth": []},
}

# keys whose value may be None / a scalar / a list and are validated separately
_FREE_KEYS = {"steps_per_epoch", "resolution", "mix", "size"}


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigurationError(f"section {path or '<root>'} must be a mapping")
    out = {}
    for key, default in defaults.items():
        here = f"{path}.{key}" if path else key
        if key not in user:
            out[key] = json.loads(json.dumps(default))  # deep copy
        elif isinstance(default, dict) and key not in _FREE_KEYS:
            out[key] = _merge(default, user[key], here)
        else:
            out[key] = user[key]
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigurationError(f"unknown config keys in {path or '<root>'}: {sorted(unknown)}")
    return out


@dataclass(frozen=True)
class PipelineConfig:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @classmethod
    def resolve(cls, user: dict | None = None) -> "PipelineConfig":
        cfg = cls(_merge(DEFAULTS, user or {}))
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, path: Path) -> "PipelineConfig":
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        return cls.resolve(loaded)

    def mix_specs(self) -> list[tuple[DegradationSpec, float]]:
        out = []
        for item in self.data["corpus"]["mix"]:
            extra = set(item) - {"kind", "params", "fraction"}
            if extra:
                raise ConfigurationError(f"unknown mix keys: {sorted(extra)}")
            out.append((DegradationSpec(item["kind"], dict(item.get("params", {}))),
                        float(item["fraction"])))
        return out

    def resolution(self):
        res = self.data["scoring"]["resolution"]
        if res in ("full", None):
            return None
        if isinstance(res, int):
            return (res, res)
        if isinstance(res, (list, tuple)) and len(res) == 2:
            return (int(res[0]), int(res[1]))
        raise ConfigurationError(f"bad scoring.resolution: {res!r}")

    def train_config(self) -> TrainConfig:
        t = self.data["training"]
        return TrainConfig(
            epochs=int(t["epochs"]), batch=int(t["batch"]), patch=int(t["patch"]),
            lr0=float(t["lr0"]), accum_steps=int(t["accum_steps"]),
            weight_decay=float(t["weight_decay"]), seed=int(self.data["seed"]),
            steps_per_epoch=None if t["steps_per_epoch"] is None else int(t["steps_per_epoch"]),
        )

    def validate(self):
        d = self.data
        if d["corpus"]["count"] < 1 or d["corpus"]["test_count"] < 1:
            raise ConfigurationError("corpus.count and corpus.test_count must be >= 1")
        size = d["corpus"]["size"]
        if not (isinstance(size, (list, tuple)) and len(size) == 2):
            raise ConfigurationError(f"corpus.size must be [H, W], got {size!r}")
        if d["scoring"]["mode"] not in ("oracle", "learned"):
            raise ConfigurationError(f"unknown scoring.mode {d['scoring']['mode']!r}")
        if not 0.0 < float(d["selection"]["p"]) <= 1.0:
            raise ConfigurationError(f"selection.p must be in (0, 1], got {d['selection']['p']}")
        if d["distill"]["loss_mode"] not in ("kl", "cosine"):
            raise ConfigurationError(f"unknown distill.loss_mode {d['distill']['loss_mode']!r}")
        self.mix_specs()
        self.resolution()
        self.train_config()

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        """New resolved config with dotted-path overrides applied."""
        data = json.loads(json.dumps(self.data))
        for dotted, value in overrides.items():
            node = data
            *parents, leaf = dotted.split(".")
            for part in parents:
                if not isinstance(node.get(part), dict):
                    raise ConfigurationError(f"unknown config path {dotted!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigurationError(f"unknown config path {dotted!r}")
            node[leaf] = value
        return PipelineConfig.resolve(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=False)


def _hash(*parts) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(json.dumps(part, sort_keys=True, default=str).encode())
        digest.update(b"\x00")
    return digest.hexdigest()[:16]


def stage_hashes(config: PipelineConfig) -> dict[str, str]:
    """Chained content hashes; a stage's hash covers everything upstream of it."""
    d = config.data
    h = {}
    h["synth"] = _hash("synth", d["seed"], d["corpus"])
    h["score"] = _hash("score", h["synth"], d["scoring"])
    h["select"] = _hash("select", h["score"], d["selection"])
    # the distill stage co-trains a task model, so its width is an input here too
    h["distill"] = _hash("distill", h["select"], d["distill"], d["training"]["model_width"])
    h["train"] = _hash("train", h["distill"], d["training"])
    h["eval"] = _hash("eval", h["train"])
    h["report"] = _hash("report", h["eval"])
    return h


class StageRunner:
    """Executes stages under out_root/stages/<name>-<hash>, with reuse markers."""

    def __init__(self, out_root: Path, hashes: dict[str, str]):
        self.out_root = Path(out_root)
        self.hashes = hashes
        self.executed: list[str] = []
        self.reused: list[str] = []

    def dir(self, stage: str) -> Path:
        return self.out_root / "stages" / f"{stage}-{self.hashes[stage]}"

    def run(self, stage: str, fn) -> Path:
        path = self.dir(stage)
        marker = path / MARKER
        if marker.exists():
            self.reused.append(stage)
            return path
        if path.exists():
            shutil.rmtree(path)  # discard partially written outputs
        path.mkdir(parents=True)
        try:
            info = fn(path) or {}
        except Exception as exc:
            raise type(exc)(f"stage {stage!r} failed: {exc}") from exc
        marker.write_text(json.dumps(
            {"stage": stage, "hash": self.hashes[stage], "version": __version__, **info},
            sort_keys=True) + "\n")
        self.executed.append(stage)
        return path


@dataclass
class RunReport:
    config_hashes: dict[str, str]
    stage_dirs: dict[str, Path]
    summary: dict
    report_dir: Path
    executed: list[str]
    reused: list[str]


def _load_pairs(manifest: CorpusManifest):
    return [load_pair(manifest, e) for e in manifest.entries]


def _pair_cache(manifest: CorpusManifest):
    return {e.id: (load_image(manifest.resolve(e.lq_path)),
                   load_image(manifest.resolve(e.hq_path))) for e in manifest.entries}


def _save_pairs_as_corpus(pairs, seed: int, out_dir: Path) -> CorpusManifest:
    """Persist ImagePairs as a self-contained corpus directory."""
    from .corpus import ManifestEntry, save_image

    out_dir = Path(out_dir)
    entries = []
    for pair in pairs:
        lq_rel, hq_rel = f"images/{pair.id}_lq.png", f"images/{pair.id}_hq.png"
        save_image(pair.lq, out_dir / lq_rel)
        save_image(pair.hq, out_dir / hq_rel)
        h, w = pair.hq.shape[:2]
        entries.append(ManifestEntry(id=pair.id, lq_path=lq_rel, hq_path=hq_rel,
                                     degradation=pair.degradation, width=w, height=h,
                                     seed=pair.seed))
    manifest = CorpusManifest(entries=entries, seed=seed, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


STAGES = ("synth", "score", "select", "distill", "train", "eval", "report")


def run_pipeline(config: PipelineConfig, out_root: Path,
                 stop_after: str | None = None) -> RunReport:
    """Execute the stages in order, reusing any completed stage directories.

    `stop_after` truncates the run after the named stage (used by the per-stage
    CLI subcommands); the summary is empty unless eval ran.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigurationError(f"unknown stage {stop_after!r}")
    d = config.data
    seed = int(d["seed"])
    hashes = stage_hashes(config)
    runner = StageRunner(out_root, hashes)
    (runner.out_root).mkdir(parents=True, exist_ok=True)
    (runner.out_root / "config.resolved.yaml").write_text(config.to_yaml())

    def partial() -> RunReport:
        return RunReport(config_hashes=hashes,
                         stage_dirs={n: runner.dir(n) for n in hashes}, summary={},
                         report_dir=runner.dir("report"), executed=runner.executed,
                         reused=runner.reused)

    # ---- synth ----
    def synth(stage_dir: Path):
        mix = config.mix_specs()
        h, w = int(d["corpus"]["size"][0]), int(d["corpus"]["size"][1])
        synth_corpus(mix, int(d["corpus"]["count"]), (h, w), derive_seed(seed, "corpus", "train"),
                     stage_dir / "train")
        synth_corpus(mix, int(d["corpus"]["test_count"]), (h, w),
                     derive_seed(seed, "corpus", "test"), stage_dir / "test")
        return {"subdirs": ["train", "test"]}

    synth_dir = runner.run("synth", synth)
    if stop_after == "synth":
        return partial()
    train_manifest = load_manifest(synth_dir / "train" / "manifest.jsonl")
    test_manifest = load_manifest(synth_dir / "test" / "manifest.jsonl")

    # ---- score ----
    def score(stage_dir: Path):
        scorer = None
        if d["scoring"]["mode"] == "learned":
            scorer = train_learned_scorer(
                train_manifest, epochs=int(d["scoring"]["learned"]["epochs"]),
                lr=float(d["scoring"]["learned"]["lr"]), seed=derive_seed(seed, "scorer"),
                resolution=config.resolution())
            save_checkpoint(scorer, stage_dir / "scorer.npz",
                            config={"mode": "learned"})
        scores = score_corpus(train_manifest, resolution=config.resolution(),
                              mode=d["scoring"]["mode"], scorer=scorer)
        save_scores(scores, stage_dir / "scores.csv")
        scored = apply_scores(train_manifest, scores)
        save_manifest(scored, stage_dir / "scored_manifest.jsonl")

    score_dir = runner.run("score", score)
    if stop_after == "score":
        return partial()
    scores = load_scores(score_dir / "scores.csv")

    # ---- select ----
    def select(stage_dir: Path):
        selection = select_top_p(scores, float(d["selection"]["p"]))
        sub = subset_manifest(train_manifest, selection)
        pairs = _load_pairs(sub)
        _save_pairs_as_corpus(pairs, seed, stage_dir / "subset")
        (stage_dir / "selection.json").write_text(json.dumps({
            "selected_ids": list(selection.selected_ids), "p": selection.p,
            "scores_used": selection.scores_used}, sort_keys=True, indent=2) + "\n")

    select_dir = runner.run("select", select)
    if stop_after == "select":
        return partial()
    selection_info = json.loads((select_dir / "selection.json").read_text())
    selection = SubsetSelection(selected_ids=tuple(selection_info["selected_ids"]),
                                p=float(selection_info["p"]),
                                scores_used=selection_info["scores_used"])
    subset = load_manifest(select_dir / "subset" / "manifest.jsonl")

    # ---- distill ----
    def distill(stage_dir: Path):
        info = {"adjuster": bool(d["distill"]["adjuster"]), "latent": bool(d["distill"]["latent"])}
        subset_pairs = _load_pairs(subset)
        pool_pairs = list(subset_pairs)
        if d["distill"]["adjuster"]:
            adjuster = make_adjuster(derive_seed(seed, "adjuster"),
                                     depth=int(d["distill"]["depth"]),
                                     width=int(d["distill"]["width"]))
            refs = sample_reference_pairs(train_manifest, selection,
                                          seed=derive_seed(seed, "reference"),
                                          factor=int(d["distill"]["reference_factor"]))
            model = make_restoration_model(derive_seed(seed, "finetune-task"),
                                           width=int(d["training"]["model_width"]))
            ds = finetune_distribution(adjuster, subset_pairs, refs, model,
                                       steps=int(d["distill"]["steps"]),
                                       lr=float(d["distill"]["lr"]),
                                       seed=derive_seed(seed, "finetune"),
                                       mode=d["distill"]["loss_mode"])
            pool_pairs = list(ds.adjusted_pairs)
            _save_pairs_as_corpus(ds.adjusted_pairs, seed, stage_dir / "adjusted")
            save_checkpoint(adjuster, stage_dir / "adjuster.npz",
                            config={"depth": int(d["distill"]["depth"]),
                                    "width": int(d["distill"]["width"])})
            with (stage_dir / "finetune_curve.csv").open("w") as fh:
                fh.write("step,l2,divergence,task\n")
                for rec in ds.curve:
                    fh.write(f"{rec['step']},{rec['l2']!r},{rec['divergence']!r},"
                             f"{rec['task']!r}\n")
        if d["distill"]["latent"]:
            hq_images = [p.hq for p in subset_pairs]
            decoder = train_decoder(hq_images, epochs=int(d["distill"]["decoder_epochs"]),
                                    lr=float(d["distill"]["decoder_lr"]),
                                    seed=derive_seed(seed, "decoder"),
                                    latent_dim=int(d["distill"]["latent_dim"]))
            model = make_restoration_model(derive_seed(seed, "latent-task"),
                                           width=int(d["training"]["model_width"]))
            m = min(int(d["distill"]["latent_m"]), len(subset_pairs))
            curve = []
            synth_pairs = distill_latents(decoder, subset_pairs, model, m=m,
                                          steps=int(d["distill"]["latent_steps"]),
                                          lr=float(d["distill"]["latent_lr"]),
                                          seed=derive_seed(seed, "latents"), history=curve)
            _save_pairs_as_corpus(synth_pairs, seed, stage_dir / "synthetic")
            save_checkpoint(decoder, stage_dir / "decoder.npz",
                            config={"latent_dim": int(d["distill"]["latent_dim"])})
            with (stage_dir / "latent_curve.csv").open("w") as fh:
                fh.write("step,objective\n")
                for rec in curve:
                    fh.write(f"{rec['step']},{rec['objective']!r}\n")
            pool_pairs = pool_pairs + synth_pairs
        _save_pairs_as_corpus(pool_pairs, seed, stage_dir / "pool")
        return info

    distill_dir = runner.run("distill", distill)
    if stop_after == "distill":
        return partial()
    pool_manifest = load_manifest(distill_dir / "pool" / "manifest.jsonl")

    # ---- train ----
    def train(stage_dir: Path):
        train_cfg = config.train_config()
        model = make_restoration_model(derive_seed(seed, "train"),
                                       width=int(d["training"]["model_width"]))
        model, history = train_restoration(model, pool_manifest, train_cfg)
        save_checkpoint(model, stage_dir / "model.npz",
                        config={"width": int(d["training"]["model_width"]),
                                **train_cfg.to_json()})
        save_history(history, stage_dir / "history.csv", stage_dir / "epochs.jsonl")

    train_dir = runner.run("train", train)
    if stop_after == "train":
        return partial()

    # ---- eval ----
    def eval_stage(stage_dir: Path):
        from .trainer import RestorationNet, load_checkpoint

        model = RestorationNet(width=int(d["training"]["model_width"]))
        load_checkpoint(train_dir / "model.npz", model)
        table = evaluate(model, test_manifest)
        save_eval_table(table, stage_dir / "eval.csv")
        (stage_dir / "summary.json").write_text(json.dumps({
            "psnr": table.mean_psnr if np.isfinite(table.mean_psnr) else "inf",
            "ssim": table.mean_ssim, "n_train": len(pool_manifest.entries),
            "p": float(d["selection"]["p"])}, sort_keys=True) + "\n")

    eval_dir = runner.run("eval", eval_stage)
    summary = json.loads((eval_dir / "summary.json").read_text())
    if stop_after == "eval":
        out = partial()
        out.summary = summary
        return out

    # ---- report ----
    def report(stage_dir: Path):
        curves = _diagnostic_curves(config, train_manifest, pool_manifest, scores, selection)
        eval_rows, eval_cols = _read_csv_rows(eval_dir / "eval.csv")
        tables = {
            "eval": (eval_rows, eval_cols),
            "summary": ([summary], ["p", "n_train", "psnr", "ssim"]),
        }
        emit_report(stage_dir, tables, curves,
                    meta={"hashes": hashes, "seed": seed,
                          "arm": "distilled" if d["distill"]["adjuster"] else "selection-only"})

    report_dir = runner.run("report", report)

    stage_dirs = {name: runner.dir(name) for name in hashes}
    return RunReport(config_hashes=hashes, stage_dirs=stage_dirs, summary=summary,
                     report_dir=report_dir, executed=runner.executed, reused=runner.reused)


def _read_csv_rows(path: Path):
    import csv as _csv

    with Path(path).open(newline="") as fh:
        reader = _csv.reader(fh)
        columns = next(reader)
        rows = [dict(zip(columns, row)) for row in reader]
    return rows, columns


def _embedding_sets(config: PipelineConfig, train_manifest: CorpusManifest,
                    pool_manifest: CorpusManifest):
    """Raw-pixel and feature embeddings for the distilled pool vs a random baseline."""
    seed = int(config.data["seed"])
    baseline = random_selection(train_manifest, min(1.0, max(
        len(pool_manifest.entries) / max(1, len(train_manifest.entries)), 1e-9)),
        seed=derive_seed(seed, "baseline"))
    base_manifest = subset_manifest(train_manifest, baseline)
    adjuster = make_adjuster(derive_seed(seed, "diagnostic-features"),
                             depth=int(config.data["distill"]["depth"]),
                             width=int(config.data["distill"]["width"]))

    def embed(manifest):
        raw, feat = [], []
        for entry in manifest.entries:
            hq = load_image(manifest.resolve(entry.hq_path))
            small = bilinear_downsample(hq, (16, 16))
            raw.append(small.ravel())
            feat.append(extract_features(adjuster, hq).mean(axis=(1, 2)))
        return np.stack(raw), np.stack(feat)

    return embed(pool_manifest), embed(base_manifest)


def _diagnostic_curves(config: PipelineConfig, train_manifest, pool_manifest, scores,
                       selection: SubsetSelection):
    curves = []
    if len(pool_manifest.entries) >= 2 and len(train_manifest.entries) >= 2:
        (pool_raw, pool_feat), (base_raw, base_feat) = _embedding_sets(
            config, train_manifest, pool_manifest)
        for name, emb in (("distilled", pool_raw), ("random", base_raw)):
            c = pairwise_distance_cdf(emb, metric="euclidean-raw")
            c.meta["metric"] = f"ped-{name}"
            curves.append(c)
        for name, emb in (("distilled", pool_feat), ("random", base_feat)):
            c = pairwise_distance_cdf(emb, metric="euclidean-feature")
            c.meta["metric"] = f"pfd-{name}"
            curves.append(c)

    normalized = np.array([s.normalized for s in scores])
    chosen = set(selection.selected_ids)
    subset_norm = np.array([s.normalized for s in scores if s.id in chosen])
    if normalized.max() > normalized.min():
        full_kde = kde_1d(normalized)
        full_kde.meta["metric"] = "scores-full"
        curves.append(full_kde)
        if len(subset_norm) > 1 and subset_norm.max() > subset_norm.min():
            sub_kde = kde_1d(subset_norm, bandwidth=full_kde.meta["bandwidth"])
            sub_kde.meta["metric"] = "scores-subset"
            curves.append(sub_kde)
        qq = qq_points(subset_norm, normalized, q=32)
        qq.meta["metric"] = "scores-subset-vs-full"
        curves.append(qq)
    return curves


def run_sweep(config: PipelineConfig, out_root: Path) -> dict:
    """Run the configured sweep axes; emits one table per axis plus a baseline row.

    Every swept run is a full pipeline with one key overridden; unchanged
    upstream stages are shared through content addressing.
    """
    out_root = Path(out_root)
    axes = config.data["sweep"]
    results: dict[str, list[dict]] = {}

    full_cfg = config.with_overrides({"selection.p": 1.0})
    baseline = run_pipeline(full_cfg, out_root)
    base_row = {"arm": "full", "value": 1.0, "psnr": baseline.summary["psnr"],
                "ssim": baseline.summary["ssim"], "n_train": baseline.summary["n_train"]}

    def one(axis: str, dotted: str, value):
        run = run_pipeline(config.with_overrides({dotted: value}), out_root)
        results.setdefault(axis, []).append({
            "arm": axis, "value": value, "psnr": run.summary["psnr"],
            "ssim": run.summary["ssim"], "n_train": run.summary["n_train"]})

    for p in axes["p"]:
        one("p", "selection.p", float(p))
    for accum in axes["accum"]:
        one("accum", "training.accum_steps", int(accum))
    for res in axes["resolution"]:
        one("resolution", "scoring.resolution", res)
    for depth in axes["adjuster_depth"]:
        one("adjuster_depth", "distill.depth", int(depth))

    tables = {}
    for axis, rows in results.items():
        tables[f"sweep_{axis}"] = (rows + [base_row],
                                   ["arm", "value", "n_train", "psnr", "ssim"])
    report_dir = out_root / "sweep-report"
    emit_report(report_dir, tables, [], meta={"axes": {k: v for k, v in axes.items() if v}})
    return {"report_dir": report_dir, "tables": tables, "baseline": base_row}
