"""Tests for the training loop, harnesses, and checkpointing."""

import json
import os

import numpy as np
import pytest

from sannli.data import (
    THREE_WAY_LABELS,
    SyntheticTaskSpec,
    Vocabulary,
    synthetic_generate,
    synthetic_raw_pairs,
    tokenize_pair,
)
from sannli.model import ModelConfig, SanParameters, forward
from sannli.training import (
    CHECKPOINT_VERSION,
    FULL_SCALE_REFERENCE,
    CheckpointError,
    CheckpointPayloadError,
    CheckpointShapeError,
    CheckpointVersionError,
    DivergenceError,
    MetricsRecord,
    RunConfig,
    compare_single_vs_multi,
    dump_step_predictions,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    sweep_steps,
    synthetic_model_config,
    train,
)


def tiny_model(steps: int = 3) -> ModelConfig:
    return ModelConfig(hidden=8, word_dim=12, char_dim=4, char_windows=(1, 2),
                       char_channels=(3, 3), lex_hidden=16, lex_dim=12,
                       attn_dim=10, steps=steps)


def make_dataset(n: int, seed: int):
    spec = SyntheticTaskSpec()
    rows = synthetic_generate(spec, n, seed=seed)
    toks = [tokenize_pair(r) for r in synthetic_raw_pairs(rows)]
    vocab = Vocabulary.build(toks, labels=THREE_WAY_LABELS)
    return [(vocab.encode(tp), tp.label) for tp in toks], vocab


@pytest.fixture(scope="module")
def dataset():
    return make_dataset(64, seed=21)


class TestRunConfig:
    def test_json_round_trip(self):
        run = RunConfig(model=tiny_model(), epochs=4, batch_size=8, seed=9,
                        base_lr=0.01, lr_decay=0.25, lr_decay_every=2,
                        multi_step=False)
        again = RunConfig.from_json(json.loads(json.dumps(run.to_json())))
        assert again == run
        assert isinstance(again.model.char_windows, tuple)

    def test_validation_errors(self):
        with pytest.raises(ValueError):
            RunConfig(model=tiny_model(), epochs=0).validate()
        with pytest.raises(ValueError):
            RunConfig(model=tiny_model(), batch_size=0).validate()
        with pytest.raises(ValueError):
            RunConfig(model=tiny_model(), base_lr=-1.0).validate()
        with pytest.raises(ValueError):
            RunConfig(model=tiny_model(), lr_decay=0.0).validate()

    def test_synthetic_config_is_valid(self):
        cfg = synthetic_model_config(steps=7)
        cfg.validate()
        assert cfg.steps == 7 and cfg.hidden == 16


class TestEvaluate:
    def test_confusion_rows_count_gold_labels(self, dataset):
        ds, vocab = dataset
        cfg = tiny_model()
        params = SanParameters.create(cfg, vocab.word_count, vocab.char_count, 3)
        rec = evaluate(params, cfg, ds)
        conf = np.array(rec.confusion)
        golds = np.bincount([g for _, g in ds], minlength=3)
        assert conf.sum() == len(ds)
        assert np.array_equal(conf.sum(axis=1), golds)
        assert rec.accuracy == pytest.approx(np.trace(conf) / conf.sum())
        assert rec.split == "dev"

    def test_zero_classifier_predicts_lowest_label(self, dataset):
        """Uniform output distributions tie; argmax resolves to index 0."""
        ds, vocab = dataset
        cfg = tiny_model()
        params = SanParameters.create(cfg, vocab.word_count, vocab.char_count, 3)
        params.classify_w.data[...] = 0.0
        rec = evaluate(params, cfg, ds)
        conf = np.array(rec.confusion)
        assert conf[:, 0].sum() == len(ds)
        for pair, _ in ds[:4]:
            assert predict(params, cfg, pair) == 0

    def test_bad_gold_label_rejected(self, dataset):
        ds, vocab = dataset
        cfg = tiny_model()
        params = SanParameters.create(cfg, vocab.word_count, vocab.char_count, 3)
        with pytest.raises(ValueError):
            evaluate(params, cfg, [(ds[0][0], 7)])

    def test_single_step_mode(self, dataset):
        ds, vocab = dataset
        cfg = tiny_model()
        params = SanParameters.create(cfg, vocab.word_count, vocab.char_count, 3)
        rec = evaluate(params, cfg, ds[:10], multi_step=False)
        assert np.array(rec.confusion).sum() == 10

    def test_metrics_record_serializes(self):
        rec = MetricsRecord(epoch=1, split="dev", accuracy=0.5, mean_loss=1.0,
                            confusion=[[1, 0], [1, 0]], wall_time=0.1)
        blob = json.loads(json.dumps(rec.to_json()))
        assert blob["accuracy"] == 0.5 and blob["confusion"] == [[1, 0], [1, 0]]


class TestTrain:
    def test_two_epochs_loss_decreases(self, dataset):
        ds, vocab = dataset
        run = RunConfig(model=tiny_model(), epochs=2, batch_size=16, seed=5)
        params = SanParameters.create(run.model, vocab.word_count,
                                      vocab.char_count, run.seed)
        outcome = train(run, params, ds, ds[:24])
        train_recs = [r for r in outcome.history if r.split == "train"]
        dev_recs = [r for r in outcome.history if r.split == "dev"]
        assert len(train_recs) == 2 and len(dev_recs) == 2
        assert train_recs[1].mean_loss < train_recs[0].mean_loss

    def test_same_seed_bitwise_identical_trajectory(self, dataset):
        ds, vocab = dataset
        run = RunConfig(model=tiny_model(), epochs=2, batch_size=16, seed=8)
        losses = []
        for _ in range(2):
            params = SanParameters.create(run.model, vocab.word_count,
                                          vocab.char_count, run.seed)
            outcome = train(run, params, ds[:32], ds[32:48])
            losses.append([r.mean_loss for r in outcome.history])
        assert losses[0] == losses[1]

    def test_best_dev_weights_survive(self, dataset):
        ds, vocab = dataset
        run = RunConfig(model=tiny_model(), epochs=3, batch_size=16, seed=4)
        params = SanParameters.create(run.model, vocab.word_count,
                                      vocab.char_count, run.seed)
        outcome = train(run, params, ds[:32], ds[32:])
        dev_accs = [r.accuracy for r in outcome.history if r.split == "dev"]
        assert outcome.best_dev_accuracy == max(dev_accs)
        assert outcome.best_epoch == dev_accs.index(max(dev_accs))
        again = evaluate(params, run.model, ds[32:])
        assert again.accuracy == outcome.best_dev_accuracy

    def test_divergence_raises(self, dataset):
        ds, vocab = dataset
        run = RunConfig(model=tiny_model(), epochs=1, batch_size=8, seed=5)
        params = SanParameters.create(run.model, vocab.word_count,
                                      vocab.char_count, run.seed)
        params.classify_w.data[0, 0] = np.nan
        with pytest.raises(DivergenceError):
            train(run, params, ds, ds[:8])

    def test_empty_sets_rejected(self, dataset):
        ds, vocab = dataset
        run = RunConfig(model=tiny_model(), epochs=1)
        params = SanParameters.create(run.model, vocab.word_count,
                                      vocab.char_count, 1)
        with pytest.raises(ValueError):
            train(run, params, [], ds)
        with pytest.raises(ValueError):
            train(run, params, ds, [])


class TestHarnesses:
    def test_compare_reports_both_arms(self, dataset):
        ds, vocab = dataset
        run = RunConfig(model=tiny_model(), epochs=1, batch_size=16, seed=2)
        report = compare_single_vs_multi(run, vocab.word_count,
                                         vocab.char_count, ds[:32], ds[32:48])
        assert 0.0 <= report.single_accuracy <= 1.0
        assert 0.0 <= report.multi_accuracy <= 1.0
        assert report.delta == pytest.approx(
            report.multi_accuracy - report.single_accuracy)
        assert report.reference == FULL_SCALE_REFERENCE
        blob = report.to_json()
        assert blob["reference"]["multi_step_dev"] == 89.35

    def test_sweep_covers_every_step_value(self, dataset):
        ds, vocab = dataset
        run = RunConfig(model=tiny_model(), epochs=1, batch_size=16, seed=2)
        rep = sweep_steps(run, vocab.word_count, vocab.char_count,
                          ds[:32], ds[32:48], step_values=(1, 2, 3))
        assert [r[0] for r in rep.rows] == [1, 2, 3]
        assert all(0.0 <= r[1] <= 1.0 for r in rep.rows)
        assert rep.reference == {"2": 86.7, "5": 89.4}

    def test_sweep_is_deterministic(self, dataset):
        ds, vocab = dataset
        run = RunConfig(model=tiny_model(), epochs=1, batch_size=16, seed=2)
        first = sweep_steps(run, vocab.word_count, vocab.char_count,
                            ds[:24], ds[24:40], step_values=(1, 2))
        second = sweep_steps(run, vocab.word_count, vocab.char_count,
                             ds[:24], ds[24:40], step_values=(1, 2))
        assert first.rows == second.rows

    def test_sweep_rejects_empty_values(self, dataset):
        ds, vocab = dataset
        run = RunConfig(model=tiny_model(), epochs=1)
        with pytest.raises(ValueError):
            sweep_steps(run, vocab.word_count, vocab.char_count,
                        ds[:8], ds[8:16], step_values=())

    def test_dump_traces_every_step(self, dataset):
        ds, vocab = dataset
        cfg = tiny_model(steps=4)
        params = SanParameters.create(cfg, vocab.word_count, vocab.char_count, 3)
        records = dump_step_predictions(params, cfg, ds[:6], THREE_WAY_LABELS)
        assert [r["id"] for r in records] == list(range(6))
        for rec, (_, gold) in zip(records, ds[:6]):
            assert rec["gold"] == THREE_WAY_LABELS[gold]
            assert len(rec["steps"]) == 4
            mean = np.mean([s["probs"] for s in rec["steps"]], axis=0)
            assert np.allclose(mean, rec["aggregate"], atol=1e-12)
            assert rec["predicted"] == THREE_WAY_LABELS[int(np.argmax(rec["aggregate"]))]
            for s in rec["steps"]:
                assert s["label"] in THREE_WAY_LABELS


class TestCheckpoints:
    def make_trained(self, dataset, tmp_path):
        ds, vocab = dataset
        run = RunConfig(model=tiny_model(), epochs=1, batch_size=16, seed=6)
        params = SanParameters.create(run.model, vocab.word_count,
                                      vocab.char_count, run.seed)
        train(run, params, ds[:32], ds[32:48])
        out = os.path.join(tmp_path, "ckpt")
        save_checkpoint(params, run, vocab, out)
        return params, run, vocab, out

    def test_round_trip_reproduces_forward_bitwise(self, dataset, tmp_path):
        ds, vocab = dataset
        params, run, vocab, out = self.make_trained(dataset, tmp_path)
        loaded, run2, vocab2 = load_checkpoint(out)
        assert run2 == run
        assert vocab2.words == vocab.words and vocab2.labels == vocab.labels
        for pair, _ in ds[:4]:
            a = forward(params, run.model, pair).aggregate.data
            b = forward(loaded, run2.model, pair).aggregate.data
            assert np.array_equal(a, b)

    def test_save_load_save_is_byte_identical(self, dataset, tmp_path):
        _, run, vocab, out = self.make_trained(dataset, tmp_path)
        loaded, run2, vocab2 = load_checkpoint(out)
        second = os.path.join(tmp_path, "again")
        save_checkpoint(loaded, run2, vocab2, second)
        for fname in ("manifest.json", "params.bin"):
            with open(os.path.join(out, fname), "rb") as fh:
                first_bytes = fh.read()
            with open(os.path.join(second, fname), "rb") as fh:
                second_bytes = fh.read()
            assert first_bytes == second_bytes

    def test_version_mismatch(self, dataset, tmp_path):
        _, _, _, out = self.make_trained(dataset, tmp_path)
        path = os.path.join(out, "manifest.json")
        with open(path) as fh:
            manifest = json.load(fh)
        manifest["format_version"] = CHECKPOINT_VERSION + 1
        with open(path, "w") as fh:
            json.dump(manifest, fh)
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(out)

    def test_truncated_payload(self, dataset, tmp_path):
        _, _, _, out = self.make_trained(dataset, tmp_path)
        path = os.path.join(out, "params.bin")
        with open(path, "rb") as fh:
            blob = fh.read()
        with open(path, "wb") as fh:
            fh.write(blob[:-16])
        with pytest.raises(CheckpointPayloadError):
            load_checkpoint(out)

    def test_trailing_bytes(self, dataset, tmp_path):
        _, _, _, out = self.make_trained(dataset, tmp_path)
        with open(os.path.join(out, "params.bin"), "ab") as fh:
            fh.write(b"\x00" * 8)
        with pytest.raises(CheckpointPayloadError):
            load_checkpoint(out)

    def test_tensor_set_mismatch(self, dataset, tmp_path):
        _, _, _, out = self.make_trained(dataset, tmp_path)
        path = os.path.join(out, "manifest.json")
        with open(path) as fh:
            manifest = json.load(fh)
        manifest["tensors"] = manifest["tensors"][:-1]
        with open(path, "w") as fh:
            json.dump(manifest, fh)
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(out)

    def test_shape_mismatch(self, dataset, tmp_path):
        _, _, _, out = self.make_trained(dataset, tmp_path)
        path = os.path.join(out, "manifest.json")
        with open(path) as fh:
            manifest = json.load(fh)
        manifest["tensors"][0]["shape"][0] += 1
        with open(path, "w") as fh:
            json.dump(manifest, fh)
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(out)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "nowhere"))
