import numpy as np
import pytest
import torch
from torch import nn

from conftest import degraded_memory_corpus
from resdistill.errors import ConfigurationError, DivergenceError, ValidationError
from resdistill.trainer import (
    RestorationNet,
    TrainConfig,
    cosine_lr,
    evaluate,
    load_checkpoint,
    make_restoration_model,
    restore_image,
    save_checkpoint,
    save_eval_table,
    save_history,
    train_restoration,
)


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 3e-4) == pytest.approx(3e-4, abs=1e-18)
        assert cosine_lr(100, 100, 3e-4) == pytest.approx(0.0, abs=1e-18)
        assert cosine_lr(50, 100, 3e-4) == pytest.approx(1.5e-4, abs=1e-12)

    def test_monotone_decreasing(self):
        vals = [cosine_lr(s, 20, 1.0) for s in range(21)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            cosine_lr(-1, 10, 1e-3)
        with pytest.raises(ValidationError):
            cosine_lr(11, 10, 1e-3)
        with pytest.raises(ValidationError):
            cosine_lr(0, 0, 1e-3)


class TestTrainConfig:
    def test_batch_accum_divisibility(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(batch=16, accum_steps=3)

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=-1)
        with pytest.raises(ConfigurationError):
            TrainConfig(lr0=0.0)
        with pytest.raises(ConfigurationError):
            TrainConfig(patch=30)

    def test_round_trip(self):
        cfg = TrainConfig(epochs=3, batch=8, accum_steps=4, steps_per_epoch=5)
        assert TrainConfig.from_json(cfg.to_json()) == cfg


def _flat_params(model):
    return torch.cat([p.detach().flatten() for p in model.parameters()])


class TestTrainRestoration:
    def test_accumulation_equivalence(self):
        man, _, cache = degraded_memory_corpus(8, 32, 32, seed=5)
        results = {}
        for accum in (1, 4):
            model = make_restoration_model(3, width=8)
            cfg = TrainConfig(epochs=1, batch=8, patch=32, accum_steps=accum, seed=9,
                              steps_per_epoch=1)
            model, _ = train_restoration(model, man, cfg, images=cache)
            results[accum] = _flat_params(model)
        rel = float(torch.norm(results[1] - results[4]) / torch.norm(results[1]))
        assert rel < 1e-5

    def test_loss_decreases_over_epochs(self):
        man, _, cache = degraded_memory_corpus(200, 32, 32, seed=7)
        model = make_restoration_model(7, width=8)
        cfg = TrainConfig(epochs=5, batch=16, patch=32, seed=7)
        model, hist = train_restoration(model, man, cfg, images=cache)
        assert hist.epochs[4]["mean_loss"] < hist.epochs[0]["mean_loss"]

    def test_deterministic(self):
        man, _, cache = degraded_memory_corpus(12, 32, 32, seed=1)
        vecs = []
        for _ in range(2):
            model = make_restoration_model(2, width=8)
            cfg = TrainConfig(epochs=2, batch=4, patch=32, seed=4, steps_per_epoch=3)
            model, _ = train_restoration(model, man, cfg, images=cache)
            vecs.append(_flat_params(model))
        assert torch.equal(vecs[0], vecs[1])

    def test_lr_trace_matches_schedule(self):
        man, _, cache = degraded_memory_corpus(8, 32, 32, seed=2)
        model = make_restoration_model(1, width=8)
        cfg = TrainConfig(epochs=2, batch=4, patch=32, seed=3, steps_per_epoch=4)
        _, hist = train_restoration(model, man, cfg, images=cache)
        total = 8
        for rec in hist.steps:
            assert rec["lr"] == cosine_lr(rec["step"], total, cfg.lr0)

    def test_divergence_raises_with_step(self):
        man, _, cache = degraded_memory_corpus(8, 32, 32, seed=3)
        model = make_restoration_model(4, width=8)
        cfg = TrainConfig(epochs=1, batch=4, patch=32, lr0=1e12, seed=5, steps_per_epoch=20)
        with pytest.raises(DivergenceError) as err:
            train_restoration(model, man, cfg, images=cache)
        assert err.value.step >= 0

    def test_empty_manifest_rejected(self):
        from resdistill.corpus import CorpusManifest

        model = make_restoration_model(0, width=8)
        with pytest.raises(ValidationError):
            train_restoration(model, CorpusManifest(entries=[], seed=0), TrainConfig())


class _Identity(nn.Module):
    def forward(self, x):
        return x


class TestEvaluate:
    def test_identity_model_on_clean_pairs(self):
        man, pairs, cache = degraded_memory_corpus(4, 32, 32, seed=6)
        clean_cache = {pid: (hq, hq) for pid, (_, hq) in cache.items()}
        table = evaluate(_Identity(), man, images=clean_cache)
        assert table.mean_psnr == float("inf")
        assert table.mean_ssim == pytest.approx(1.0, abs=1e-9)

    def test_row_count_and_mean_row(self):
        man, _, cache = degraded_memory_corpus(5, 32, 32, seed=8)
        table = evaluate(make_restoration_model(1, width=8), man, images=cache)
        assert len(table.rows) == 6
        assert table.rows[-1]["id"] == "mean"
        finite = [r["psnr"] for r in table.rows[:-1]]
        assert table.mean_psnr == pytest.approx(np.mean(finite))

    def test_deterministic(self):
        man, _, cache = degraded_memory_corpus(3, 32, 32, seed=9)
        model = make_restoration_model(5, width=8)
        assert evaluate(model, man, images=cache).rows == evaluate(model, man, images=cache).rows

    def test_restore_image_clamped_shape(self):
        model = make_restoration_model(6, width=8)
        out = restore_image(model, np.random.default_rng(0).random((32, 48, 3)))
        assert out.shape == (32, 48, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        model = make_restoration_model(11, width=8)
        save_checkpoint(model, tmp_path / "m.npz", config={"width": 8})
        other = RestorationNet(width=8)
        meta = load_checkpoint(tmp_path / "m.npz", other)
        assert meta["config"] == {"width": 8}
        for a, b in zip(model.state_dict().values(), other.state_dict().values()):
            assert torch.equal(a, b)

    def test_byte_deterministic(self, tmp_path):
        model = make_restoration_model(12, width=8)
        save_checkpoint(model, tmp_path / "a.npz")
        save_checkpoint(model, tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_unreadable_rejected(self, tmp_path):
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(ValidationError):
            load_checkpoint(bad, RestorationNet(width=8))


class TestArtifacts:
    def test_history_and_table_files(self, tmp_path):
        man, _, cache = degraded_memory_corpus(8, 32, 32, seed=10)
        model = make_restoration_model(13, width=8)
        cfg = TrainConfig(epochs=1, batch=4, patch=32, seed=2, steps_per_epoch=2)
        model, hist = train_restoration(model, man, cfg, images=cache)
        save_history(hist, tmp_path / "h.csv", tmp_path / "h.jsonl")
        table = evaluate(model, man, images=cache)
        save_eval_table(table, tmp_path / "eval.csv")

        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "step,lr,loss"
        assert len(lines) == 3
        assert (tmp_path / "eval.csv").read_text().splitlines()[0] == "id,psnr,ssim"

    def test_inf_serialized_as_sentinel(self, tmp_path):
        man, _, cache = degraded_memory_corpus(2, 32, 32, seed=11)
        clean_cache = {pid: (hq, hq) for pid, (_, hq) in cache.items()}
        table = evaluate(_Identity(), man, images=clean_cache)
        save_eval_table(table, tmp_path / "eval.csv")
        body = (tmp_path / "eval.csv").read_text()
        assert "inf" in body and "Infinity" not in body
