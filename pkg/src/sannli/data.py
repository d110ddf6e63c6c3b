"""Text ingestion: tokenization, vocabularies, file readers, synthetic data.

The pipeline is text -> tokens -> ids:

- readers produce ``RawPair`` (premise/hypothesis strings + label index),
- ``tokenize`` turns strings into word tokens,
- ``Vocabulary`` maps tokens to word ids and char-id lists, yielding the
  ``PairInput`` the model consumes.

A small synthetic attribute-matching task lives here too. It has a closed
vocabulary of synonym and antonym word pairs and an exact labeling rule,
so models can be exercised end to end without external corpora.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import PairInput
from .rng import RngStream

THREE_WAY_LABELS = ("entailment", "neutral", "contradiction")
TWO_WAY_LABELS = ("entails", "neutral")

WORD_UNK = 0
CHAR_PAD = 0
CHAR_UNK = 1


class DataError(Exception):
    """A dataset is structurally unusable (bad labels, empty, missing)."""


class ParseError(DataError):
    """A specific line of a data file could not be parsed."""


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

# peeled off token edges as standalone tokens; apostrophes are handled by
# the contraction rule instead
_PEEL = set(string.punctuation) - {"'"}


def _split_token(piece: str) -> list:
    lead = []
    while piece and piece[0] in _PEEL:
        lead.append(piece[0])
        piece = piece[1:]
    trail = []
    while piece and piece[-1] in _PEEL:
        trail.append(piece[-1])
        piece = piece[:-1]
    trail.reverse()

    core = []
    start = 0
    for i in range(1, len(piece)):
        if piece[i] == "'":
            core.append(piece[start:i])
            start = i
    if piece[start:]:
        core.append(piece[start:])
    return lead + core + trail


def tokenize(text: str) -> list:
    """Lowercase word tokens: outer punctuation peeled into its own tokens,
    contractions split so the apostrophe stays with the suffix
    ("it's" -> ["it", "'s"]). Applying it to its own (re-joined) output
    changes nothing.
    """
    out = []
    for piece in text.lower().split():
        out.extend(_split_token(piece))
    return out


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

@dataclass
class RawPair:
    premise: str
    hypothesis: str
    label: int


@dataclass
class TokenizedPair:
    premise_tokens: list
    hyp_tokens: list
    label: int


def tokenize_pair(raw: RawPair) -> TokenizedPair:
    prem = tokenize(raw.premise)
    hyp = tokenize(raw.hypothesis)
    if not prem or not hyp:
        raise DataError(f"empty sentence after tokenization: {raw!r}")
    return TokenizedPair(premise_tokens=prem, hyp_tokens=hyp, label=raw.label)


class Vocabulary:
    """Deterministic word/char/label index built from tokenized pairs.

    Word id 0 is the unknown token; char ids 0 and 1 are padding and
    unknown. Types are sorted, so the same data always yields the same ids.
    """

    def __init__(self, words: Sequence[str], chars: Sequence[str],
                 labels: Sequence[str]):
        self.words = ["<unk>"] + list(words)
        self.chars = ["<pad>", "<cunk>"] + list(chars)
        self.labels = tuple(labels)
        self._word_index = {w: i for i, w in enumerate(self.words)}
        self._char_index = {c: i for i, c in enumerate(self.chars)}

    @classmethod
    def build(cls, pairs: Sequence[TokenizedPair],
              labels: Sequence[str]) -> "Vocabulary":
        words = set()
        for p in pairs:
            words.update(p.premise_tokens)
            words.update(p.hyp_tokens)
        chars = set()
        for w in words:
            chars.update(w)
        return cls(sorted(words), sorted(chars), labels)

    @property
    def word_count(self) -> int:
        return len(self.words)

    @property
    def char_count(self) -> int:
        return len(self.chars)

    def word_id(self, token: str) -> int:
        return self._word_index.get(token, WORD_UNK)

    def char_ids(self, token: str) -> list:
        return [self._char_index.get(c, CHAR_UNK) for c in token]

    def label_id(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DataError(f"unknown label {label!r}; expected one of "
                            f"{self.labels}") from None

    def encode(self, pair: TokenizedPair) -> PairInput:
        return PairInput(
            premise_ids=[self.word_id(t) for t in pair.premise_tokens],
            premise_chars=[self.char_ids(t) for t in pair.premise_tokens],
            hyp_ids=[self.word_id(t) for t in pair.hyp_tokens],
            hyp_chars=[self.char_ids(t) for t in pair.hyp_tokens],
        )

    def to_json(self) -> dict:
        return {"words": self.words[1:], "chars": self.chars[2:],
                "labels": list(self.labels)}

    @classmethod
    def from_json(cls, blob: dict) -> "Vocabulary":
        return cls(blob["words"], blob["chars"], blob["labels"])


# ---------------------------------------------------------------------------
# file readers
# ---------------------------------------------------------------------------

def _label_index(label: str, labels: Sequence[str], where: str) -> int:
    try:
        return list(labels).index(label)
    except ValueError:
        raise ParseError(f"{where}: unknown label {label!r}") from None


def read_snli_jsonl(path: str, labels: Sequence[str] = THREE_WAY_LABELS) -> tuple:
    """Read json-lines pairs; returns (pairs, skipped).

    Lines whose gold label is "-" (annotators disagreed) are skipped and
    counted rather than kept or treated as errors.
    """
    pairs = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{ln}"
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{where}: bad json ({e.msg})") from None
            try:
                gold = row["gold_label"]
                premise = row["sentence1"]
                hypothesis = row["sentence2"]
            except KeyError as e:
                raise ParseError(f"{where}: missing field {e.args[0]!r}") from None
            if gold == "-":
                skipped += 1
                continue
            pairs.append(RawPair(premise=premise, hypothesis=hypothesis,
                                 label=_label_index(gold, labels, where)))
    if not pairs:
        raise DataError(f"{path}: no usable pairs")
    return pairs, skipped


@dataclass
class TsvSchema:
    """Column layout of a tab-separated pair file."""

    premise_col: int
    hyp_col: int
    label_col: int
    id_col: Optional[int] = None

    @property
    def min_columns(self) -> int:
        cols = [self.premise_col, self.hyp_col, self.label_col]
        if self.id_col is not None:
            cols.append(self.id_col)
        return max(cols) + 1


def read_tsv_pairs(path: str, schema: TsvSchema,
                   labels: Sequence[str] = THREE_WAY_LABELS) -> tuple:
    """Read tab-separated pairs; returns (pairs, skipped).

    A first line whose id column is not an integer (or, without an id
    column, whose label column is not a known label) is taken as a header.
    Pairs labeled "-" are skipped and counted.
    """
    pairs = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            where = f"{path}:{ln}"
            cells = line.split("\t")
            if len(cells) < schema.min_columns:
                raise ParseError(f"{where}: expected at least "
                                 f"{schema.min_columns} columns, got {len(cells)}")
            if ln == 1:
                if schema.id_col is not None:
                    header = not cells[schema.id_col].lstrip("-").isdigit()
                else:
                    header = cells[schema.label_col] not in list(labels) + ["-"]
                if header:
                    continue
            label = cells[schema.label_col]
            if label == "-":
                skipped += 1
                continue
            pairs.append(RawPair(premise=cells[schema.premise_col],
                                 hypothesis=cells[schema.hyp_col],
                                 label=_label_index(label, labels, where)))
    if not pairs:
        raise DataError(f"{path}: no usable pairs")
    return pairs, skipped


def load_embeddings(path: str, dim: int = 300) -> dict:
    """Load a text table of word vectors (token then `dim` floats per line)."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ParseError(f"{path}:{ln}: expected {dim} values for "
                                 f"{parts[0]!r}, got {len(parts) - 1}")
            try:
                table[parts[0]] = np.array([float(x) for x in parts[1:]])
            except ValueError:
                raise ParseError(f"{path}:{ln}: non-numeric vector entry") from None
    if not table:
        raise DataError(f"{path}: no vectors found")
    return table


def embedding_matrix(vocab: Vocabulary, table: dict, dim: int) -> np.ndarray:
    """Assemble [word_count x dim] rows from a vector table.

    Words without a pretrained vector (including the unknown token) get
    zero rows; their identity still reaches the model via char features.
    """
    out = np.zeros((vocab.word_count, dim))
    for i, w in enumerate(vocab.words):
        vec = table.get(w)
        if vec is not None:
            if vec.shape != (dim,):
                raise DataError(f"vector for {w!r} has width {vec.shape[0]}, "
                                f"expected {dim}")
            out[i] = vec
    return out


# ---------------------------------------------------------------------------
# tokenized cache files
# ---------------------------------------------------------------------------

def write_token_cache(path: str, pairs: Sequence[TokenizedPair]) -> None:
    """Write pairs as tab-separated lines: index, label, premise, hypothesis."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in enumerate(pairs):
            fh.write(f"{i}\t{p.label}\t{' '.join(p.premise_tokens)}"
                     f"\t{' '.join(p.hyp_tokens)}\n")


def read_token_cache(path: str) -> list:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) != 4:
                raise ParseError(f"{path}:{ln}: expected 4 columns, got {len(cells)}")
            try:
                label = int(cells[1])
            except ValueError:
                raise ParseError(f"{path}:{ln}: non-integer label") from None
            prem = cells[2].split()
            hyp = cells[3].split()
            if not prem or not hyp:
                raise ParseError(f"{path}:{ln}: empty sentence")
            pairs.append(TokenizedPair(premise_tokens=prem, hyp_tokens=hyp,
                                       label=label))
    if not pairs:
        raise DataError(f"{path}: cache is empty")
    return pairs


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def make_batches(n_items: int, batch_size: int,
                 rng: Optional[RngStream] = None) -> list:
    """Index batches over n items; shuffled when an rng is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = list(range(n_items))
    if rng is not None:
        order = rng.shuffle(order)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


# ---------------------------------------------------------------------------
# synthetic attribute task
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    """Closed-vocabulary attribute matching.

    The vocabulary is split into synonym pairs and antonym pairs over
    disjoint words. A hypothesis token is *supported* if it or its synonym
    partner appears in the premise. The label is:

    - contradiction, if any hypothesis token's antonym partner is in the
      premise;
    - entailment, if every hypothesis token is supported;
    - neutral otherwise.
    """

    synonym_pairs: int = 10
    antonym_pairs: int = 10
    premise_len: tuple = (4, 8)
    hyp_len: tuple = (2, 4)

    def words(self) -> list:
        out = []
        for i in range(self.synonym_pairs):
            out += [f"syn{i}a", f"syn{i}b"]
        for i in range(self.antonym_pairs):
            out += [f"ant{i}p", f"ant{i}n"]
        return out

    def synonym_of(self) -> dict:
        out = {}
        for i in range(self.synonym_pairs):
            out[f"syn{i}a"] = f"syn{i}b"
            out[f"syn{i}b"] = f"syn{i}a"
        return out

    def antonym_of(self) -> dict:
        out = {}
        for i in range(self.antonym_pairs):
            out[f"ant{i}p"] = f"ant{i}n"
            out[f"ant{i}n"] = f"ant{i}p"
        return out


def synthetic_label(spec: SyntheticTaskSpec, premise: Sequence[str],
                    hypothesis: Sequence[str]) -> str:
    """Apply the task's labeling rule to token lists."""
    prem = set(premise)
    ant = spec.antonym_of()
    syn = spec.synonym_of()
    if any(ant.get(t) in prem for t in hypothesis):
        return "contradiction"
    if all(t in prem or syn.get(t) in prem for t in hypothesis):
        return "entailment"
    return "neutral"


def _sample_len(rng: RngStream, bounds: tuple) -> int:
    lo, hi = bounds
    return lo + int(rng.integers(hi - lo + 1))


def synthetic_generate(spec: SyntheticTaskSpec, n: int, seed: int) -> list:
    """Generate n labeled pairs with labels balanced to within one.

    Targets cycle entailment -> neutral -> contradiction; candidates are
    constructed toward the target and kept only when the labeling rule
    agrees, so the emitted label is always the rule's own verdict.
    """
    if spec.synonym_pairs < 1 or spec.antonym_pairs < 1:
        raise ValueError("the task needs at least one pair of each kind")
    if spec.premise_len[0] < 1 or spec.hyp_len[0] < 1:
        raise ValueError("sentence length bounds must start at 1")
    rng = RngStream(seed).derive("synthetic")
    words = spec.words()
    syn = spec.synonym_of()
    ant = spec.antonym_of()
    rows = []
    for k in range(n):
        target = THREE_WAY_LABELS[k % 3]
        for _ in range(1000):
            prem = rng.shuffle(words)[:_sample_len(rng, spec.premise_len)]
            if target == "contradiction" and not any(t in ant for t in prem):
                fresh = [w for w in sorted(ant) if w not in prem]
                prem[int(rng.integers(len(prem)))] = \
                    fresh[int(rng.integers(len(fresh)))]
            hyp = _build_hypothesis(spec, rng, prem, target, words, syn, ant)
            if hyp is None or len(set(hyp)) != len(hyp):
                continue
            if synthetic_label(spec, prem, hyp) == target:
                rows.append((" ".join(prem), " ".join(hyp), target))
                break
        else:
            raise DataError(f"could not construct a {target} pair; "
                            "the task spec is too constrained")
    return rows


def _supported_tokens(rng: RngStream, prem: list, syn: dict, count: int) -> list:
    """Tokens the premise supports: members or their synonym partners."""
    picked = rng.shuffle(prem)[:count]
    out = []
    for t in picked:
        if t in syn and rng.uniform() < 0.5:
            out.append(syn[t])
        else:
            out.append(t)
    return out


def _build_hypothesis(spec, rng, prem, target, words, syn, ant):
    """Construct a candidate hypothesis toward the target label.

    Neutral and contradiction candidates carry a randomized number of
    decisive tokens (novel or clashing), so the emitted difficulty varies
    from blatant (every token decisive) to subtle (a single one).
    """
    h_len = min(_sample_len(rng, spec.hyp_len), len(prem))
    if target == "entailment":
        return _supported_tokens(rng, prem, syn, h_len)
    if target == "neutral":
        prem_set = set(prem)
        novel = [w for w in words
                 if w not in prem_set
                 and syn.get(w) not in prem_set
                 and ant.get(w) not in prem_set]
        if not novel:
            return None
        k = min(1 + int(rng.integers(h_len)), len(novel))
        picked = rng.shuffle(novel)[:k]
        return rng.shuffle(_supported_tokens(rng, prem, syn, h_len - k) + picked)
    clashes = [ant[t] for t in prem if t in ant]
    if not clashes:
        return None
    k = min(1 + int(rng.integers(len(clashes))), h_len)
    picked = rng.shuffle(clashes)[:k]
    return rng.shuffle(_supported_tokens(rng, prem, syn, h_len - k) + picked)


def synthetic_raw_pairs(rows: Sequence[tuple],
                        labels: Sequence[str] = THREE_WAY_LABELS) -> list:
    """Adapt generated (premise, hypothesis, label) rows to RawPair records."""
    return [RawPair(premise=p, hypothesis=h, label=list(labels).index(lab))
            for p, h, lab in rows]


def write_synthetic_tsv(path: str, rows: Sequence[tuple]) -> None:
    """Write generated rows in the tab-separated layout readers accept."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id\tpremise\thypothesis\tlabel\n")
        for i, (p, h, lab) in enumerate(rows):
            fh.write(f"{i}\t{p}\t{h}\t{lab}\n")


SYNTHETIC_SCHEMA = TsvSchema(premise_col=1, hyp_col=2, label_col=3, id_col=0)
