"""Training, evaluation, comparison harnesses, and checkpoint persistence.

Everything here is deterministic given (seed, config, data): batch order,
dropout draws, and parameter updates all derive from one root stream, so a
rerun reproduces the metrics log bit for bit.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Vocabulary, make_batches
from .model import (
    LexiconCache,
    ModelConfig,
    PairInput,
    SanParameters,
    forward,
    nli_loss,
    single_step_forward,
)
from .optim import Adamax, LrSchedule
from .rng import RngStream
from .tensor import Tape, backward


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# Accuracies from full-corpus, full-size training runs, quoted in reports
# for orientation. They are not reproducible at the scale this package
# targets and nothing asserts against them.
FULL_SCALE_REFERENCE = {
    "single_step_dev": 85.46,
    "multi_step_dev": 89.35,
    "steps_curve_points": {2: 86.7, 5: 89.4},
    "benchmark_accuracy": {"snli_dev": 88.73, "scitail_test": 88.4},
}


@dataclass
class RunConfig:
    """Everything a training run depends on besides the data itself."""

    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    batch_size: int = 32
    seed: int = 1
    base_lr: float = 0.002
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    multi_step: bool = True

    def validate(self) -> None:
        self.model.validate()
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not math.isfinite(self.base_lr) or self.base_lr <= 0:
            raise ValueError("bad learning-rate schedule settings")
        if not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise ValueError("bad learning-rate schedule settings")

    def to_json(self) -> dict:
        blob = asdict(self)
        blob["model"]["char_windows"] = list(self.model.char_windows)
        blob["model"]["char_channels"] = list(self.model.char_channels)
        return blob

    @classmethod
    def from_json(cls, blob: dict) -> "RunConfig":
        data = dict(blob)
        mdata = dict(data.pop("model"))
        mdata["char_windows"] = tuple(mdata["char_windows"])
        mdata["char_channels"] = tuple(mdata["char_channels"])
        return cls(model=ModelConfig(**mdata), **data)


def synthetic_model_config(steps: int = 5) -> ModelConfig:
    """Down-scaled dimensions for the closed-vocabulary synthetic task."""
    return ModelConfig(hidden=16, word_dim=16, char_dim=8,
                       char_windows=(1, 2, 3), char_channels=(16, 16, 16),
                       lex_hidden=64, lex_dim=32, attn_dim=32, steps=steps)


@dataclass
class MetricsRecord:
    """Per-epoch, per-split summary; confusion rows are gold, columns predicted."""

    epoch: int
    split: str
    accuracy: float
    mean_loss: float
    confusion: list
    wall_time: float

    def to_json(self) -> dict:
        return asdict(self)


def _finish_record(epoch: int, split: str, confusion: np.ndarray,
                   loss_sum: float, started: float) -> MetricsRecord:
    total = int(confusion.sum())
    acc = float(np.trace(confusion)) / total if total else 0.0
    return MetricsRecord(epoch=epoch, split=split, accuracy=acc,
                         mean_loss=loss_sum / total if total else math.nan,
                         confusion=confusion.astype(int).tolist(),
                         wall_time=time.perf_counter() - started)


def evaluate(params: SanParameters, config: ModelConfig,
             dataset: Sequence[tuple], multi_step: bool = True,
             epoch: int = 0, split: str = "dev") -> MetricsRecord:
    """Evaluation-mode accuracy, mean loss, and confusion counts.

    Predictions are the argmax of the aggregate distribution; ties go to
    the lowest label index.
    """
    started = time.perf_counter()
    fwd = forward if multi_step else single_step_forward
    confusion = np.zeros((config.classes, config.classes))
    loss_sum = 0.0
    cache = LexiconCache()   # no tape in eval mode, so safe to share throughout
    for pair, gold in dataset:
        if not 0 <= gold < config.classes:
            raise ValueError(f"gold label {gold} outside {config.classes} classes")
        out = fwd(params, config, pair, cache=cache)
        pred = int(np.argmax(out.aggregate.data[:, 0]))
        confusion[gold, pred] += 1
        loss_sum += float(nli_loss(out, gold).data)
    return _finish_record(epoch, split, confusion, loss_sum, started)


def predict(params: SanParameters, config: ModelConfig, pair: PairInput,
            multi_step: bool = True) -> int:
    fwd = forward if multi_step else single_step_forward
    out = fwd(params, config, pair)
    return int(np.argmax(out.aggregate.data[:, 0]))


@dataclass
class TrainOutcome:
    history: list            # MetricsRecords, train and dev per epoch
    best_epoch: int
    best_dev_accuracy: float


def train(run: RunConfig, params: SanParameters, train_set: Sequence[tuple],
          dev_set: Sequence[tuple],
          log: Optional[Callable[[MetricsRecord], None]] = None) -> TrainOutcome:
    """Run the full loop; on return ``params`` holds the best-dev weights.

    Each epoch: shuffle, batch, training-mode forwards with per-example
    dropout streams, mean-loss backward, one optimizer step per batch, then
    a dev evaluation. The best dev accuracy (earliest epoch on ties) decides
    which weights survive.
    """
    run.validate()
    if not train_set or not dev_set:
        raise ValueError("train and dev sets must be non-empty")
    for pair, gold in list(train_set) + list(dev_set):
        if not 0 <= gold < run.model.classes:
            raise ValueError(f"gold label {gold} outside "
                             f"{run.model.classes} classes")
    fwd = forward if run.multi_step else single_step_forward
    named = params.named_tensors()
    opt = Adamax(named, lr=run.base_lr)
    schedule = LrSchedule(run.base_lr, run.lr_decay, run.lr_decay_every)
    root = RngStream(run.seed).derive("train")

    history = []
    best_acc = -1.0
    best_epoch = -1
    best_weights = None

    for epoch in range(run.epochs):
        started = time.perf_counter()
        opt.lr = schedule.rate(epoch)
        erng = root.derive(f"epoch{epoch}")
        batches = make_batches(len(train_set), run.batch_size,
                               erng.derive("order"))
        confusion = np.zeros((run.model.classes, run.model.classes))
        loss_sum = 0.0
        for b_idx, batch in enumerate(batches):
            cache = LexiconCache()
            try:
                with Tape() as tape:
                    parts = []
                    for j in batch:
                        pair, gold = train_set[j]
                        out = fwd(params, run.model, pair, training=True,
                                  rng=erng.derive(f"ex{j}"), cache=cache)
                        parts.append(nli_loss(out, gold))
                        pred = int(np.argmax(out.aggregate.data[:, 0]))
                        confusion[gold, pred] += 1
                        loss_sum += float(parts[-1].data)
                    total = parts[0]
                    for p in parts[1:]:
                        total = T.add(total, p)
                    batch_loss = T.scale(total, 1.0 / len(batch))
                    if not math.isfinite(float(batch_loss.data)):
                        raise DivergenceError(
                            f"non-finite loss at epoch {epoch}, batch {b_idx}")
                    backward(batch_loss, tape)
            except ValueError as e:
                # Gold labels were checked up front, so a domain error here
                # (log of an underflowed probability) means the run blew up.
                raise DivergenceError(
                    f"numeric failure at epoch {epoch}, batch {b_idx}: {e}"
                ) from e
            opt.step(tape)
        train_rec = _finish_record(epoch, "train", confusion, loss_sum, started)
        dev_rec = evaluate(params, run.model, dev_set,
                           multi_step=run.multi_step, epoch=epoch)
        history.extend([train_rec, dev_rec])
        if log is not None:
            log(train_rec)
            log(dev_rec)
        if dev_rec.accuracy > best_acc:
            best_acc = dev_rec.accuracy
            best_epoch = epoch
            best_weights = {name: t.data.copy() for name, t in named.items()}

    if best_weights is not None:
        for name, t in named.items():
            t.data[...] = best_weights[name]
    return TrainOutcome(history=history, best_epoch=best_epoch,
                        best_dev_accuracy=best_acc)


# ---------------------------------------------------------------------------
# analysis harnesses
# ---------------------------------------------------------------------------

@dataclass
class CompareReport:
    single_accuracy: float
    multi_accuracy: float
    delta: float
    reference: dict = field(default_factory=lambda: dict(FULL_SCALE_REFERENCE))

    def to_json(self) -> dict:
        return asdict(self)


def compare_single_vs_multi(run: RunConfig, word_vocab: int, char_vocab: int,
                            train_set: Sequence[tuple],
                            dev_set: Sequence[tuple],
                            log: Optional[Callable] = None) -> CompareReport:
    """Train both output-layer variants from identical lower-layer weights.

    Both arms are created from the same seed; their initial tensors are
    asserted equal before either run starts. The reference entries quote
    full-scale results for context only.
    """
    params_multi = SanParameters.create(run.model, word_vocab, char_vocab, run.seed)
    params_single = SanParameters.create(run.model, word_vocab, char_vocab, run.seed)
    named_m = params_multi.named_tensors()
    named_s = params_single.named_tensors()
    for name, t in named_m.items():
        if not np.array_equal(t.data, named_s[name].data):
            raise AssertionError(f"arms start from different weights at {name}")

    multi = train(replace(run, multi_step=True), params_multi,
                  train_set, dev_set, log=log)
    single = train(replace(run, multi_step=False), params_single,
                   train_set, dev_set, log=log)
    return CompareReport(single_accuracy=single.best_dev_accuracy,
                         multi_accuracy=multi.best_dev_accuracy,
                         delta=multi.best_dev_accuracy - single.best_dev_accuracy)


@dataclass
class SweepReport:
    rows: list               # (steps, best dev accuracy) per setting
    reference: dict = field(default_factory=lambda: dict(
        {str(k): v for k, v in FULL_SCALE_REFERENCE["steps_curve_points"].items()}))

    def to_json(self) -> dict:
        return {"rows": [list(r) for r in self.rows], "reference": self.reference}


def sweep_steps(run: RunConfig, word_vocab: int, char_vocab: int,
                train_set: Sequence[tuple], dev_set: Sequence[tuple],
                step_values: Sequence[int] = tuple(range(1, 11)),
                log: Optional[Callable] = None) -> SweepReport:
    """Train once per refinement depth, all else fixed; tabulate accuracy."""
    if not step_values:
        raise ValueError("step sweep needs at least one value")
    rows = []
    for steps in step_values:
        arm = replace(run, model=replace(run.model, steps=steps))
        params = SanParameters.create(arm.model, word_vocab, char_vocab, arm.seed)
        outcome = train(arm, params, train_set, dev_set, log=log)
        rows.append((steps, outcome.best_dev_accuracy))
    return SweepReport(rows=rows)


def dump_step_predictions(params: SanParameters, config: ModelConfig,
                          dataset: Sequence[tuple],
                          labels: Sequence[str]) -> list:
    """Trace every step's verdict per example (evaluation mode).

    Each record carries the per-step distributions and argmax labels plus
    the aggregate, so step-by-step opinion changes are visible.
    """
    records = []
    cache = LexiconCache()
    for i, (pair, gold) in enumerate(dataset):
        out = forward(params, config, pair, cache=cache)
        steps = []
        for p in out.step_probs:
            probs = p.data[:, 0]
            steps.append({"label": labels[int(np.argmax(probs))],
                          "probs": [float(x) for x in probs]})
        agg = out.aggregate.data[:, 0]
        records.append({
            "id": i,
            "gold": labels[gold],
            "steps": steps,
            "aggregate": [float(x) for x in agg],
            "predicted": labels[int(np.argmax(agg))],
        })
    return records


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1
_MANIFEST = "manifest.json"
_PAYLOAD = "params.bin"


class CheckpointError(Exception):
    """A checkpoint could not be written or read."""


class CheckpointVersionError(CheckpointError):
    """The on-disk format version is not the one this code writes."""


class CheckpointShapeError(CheckpointError):
    """Manifest tensors do not match the parameters being loaded."""


class CheckpointPayloadError(CheckpointError):
    """The binary payload is shorter or longer than the manifest says."""


def save_checkpoint(params: SanParameters, run: RunConfig, vocab: Vocabulary,
                    out_dir: str) -> None:
    """Write manifest.json + params.bin (little-endian float64 payload)."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, t in params.named_tensors().items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.data.shape),
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "run_config": run.to_json(),
        "vocab": vocab.to_json(),
        "tensors": entries,
    }
    with open(os.path.join(out_dir, _MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, _PAYLOAD), "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path: str) -> tuple:
    """Read a checkpoint directory -> (params, run_config, vocabulary)."""
    try:
        with open(os.path.join(path, _MANIFEST), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest found") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: manifest is not valid json ({e.msg})") from None
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version!r}, expected {CHECKPOINT_VERSION}")
    run = RunConfig.from_json(manifest["run_config"])
    vocab = Vocabulary.from_json(manifest["vocab"])
    params = SanParameters.create(run.model, vocab.word_count,
                                  vocab.char_count, run.seed)
    named = params.named_tensors()

    entries = {e["name"]: e for e in manifest["tensors"]}
    if set(entries) != set(named):
        missing = sorted(set(named) - set(entries))
        extra = sorted(set(entries) - set(named))
        raise CheckpointShapeError(
            f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")

    with open(os.path.join(path, _PAYLOAD), "rb") as fh:
        payload = fh.read()
    expected = sum(e["length"] for e in entries.values())
    if len(payload) < expected:
        raise CheckpointPayloadError(
            f"{path}: payload is {len(payload)} bytes, manifest needs {expected}")
    if len(payload) > expected:
        raise CheckpointPayloadError(
            f"{path}: payload has {len(payload) - expected} trailing bytes")

    for name, t in named.items():
        e = entries[name]
        shape = tuple(e["shape"])
        if shape != t.data.shape:
            raise CheckpointShapeError(
                f"{path}: {name} has shape {shape}, expected {t.data.shape}")
        count = int(np.prod(shape)) if shape else 1
        if e["length"] != count * 8:
            raise CheckpointPayloadError(
                f"{path}: {name} length {e['length']} != {count * 8}")
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=e["offset"]).reshape(shape)
        t.data[...] = arr
    return params, run, vocab
