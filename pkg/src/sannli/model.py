"""The multi-step inference model for premise/hypothesis classification.

Four stages, all operating on column matrices [features x length]:

1. lexicon: word embedding + char-convolution features per token, passed
   through a position-wise feed-forward block (separate blocks for premise
   and hypothesis). Because the block is position-wise, a token type always
   encodes to the same column, which ``LexiconCache`` exploits to encode
   each distinct token once per batch.
2. context: two stacked bidirectional LSTMs, each shrunk back to the
   hidden width by pairwise maxout; their outputs are stacked.
3. alignment + memory: both sentences are projected through a shared
   relu map, dot-product scores align premise rows to hypothesis columns,
   and a shared bidirectional LSTM over [own context; aligned other;
   own context again] produces the memories.
4. answer: a recurrent state starts from hypothesis-memory attention and
   is refined for a fixed number of steps; each step attends into the
   premise memory, classifies, and the per-step distributions are averaged
   (during training, over a random non-empty subset of steps).

The single-shot variant shares stages 1-3 and classifies once from the
initial state plus a self-attended premise summary.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .layers import (
    CharCnnParams,
    FfnParams,
    GruParams,
    LstmParams,
    Projection,
    bilinear_read,
    bilstm,
    char_cnn_encode,
    embed_tokens,
    embedding_init,
    ffn_apply,
    gru_step,
    match_classify,
    maxout_shrink,
    recurrent_mask,
    uniform_init,
)
from .rng import RngStream
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Dimensions and regularization rates; defaults are full-scale."""

    hidden: int = 128              # per-direction LSTM width
    word_dim: int = 300
    char_dim: int = 20             # character embedding width
    char_windows: tuple = (1, 3, 5)
    char_channels: tuple = (50, 100, 150)
    lex_hidden: int = 600          # feed-forward block inner width
    lex_dim: int = 600             # lexicon output width per token
    attn_dim: int = 256            # alignment projection width
    steps: int = 5                 # answer refinement steps
    classes: int = 3
    dropout_rate: float = 0.2      # recurrent-state and alignment dropout
    step_dropout: float = 0.2      # chance of excluding a step's prediction
    weight_norm: bool = True       # reparameterize the ffn/alignment maps
    freeze_word_emb: bool = False

    def validate(self) -> None:
        if self.hidden < 1 or self.steps < 1 or self.classes < 2:
            raise ValueError("hidden, steps and classes must be positive")
        if min(self.word_dim, self.char_dim, self.lex_hidden, self.lex_dim,
               self.attn_dim) < 1:
            raise ValueError("all widths must be positive")
        if len(self.char_windows) != len(self.char_channels) or not self.char_windows:
            raise ValueError("char windows and channels must pair up")
        for r in (self.dropout_rate, self.step_dropout):
            if not 0.0 <= r < 1.0:
                raise ValueError(f"rates must lie in [0, 1), got {r}")

    @property
    def classifier_width(self) -> int:
        """Width of the final feature vector [state; read; |diff|; product]."""
        return 8 * self.hidden


@dataclass
class PairInput:
    """One tokenized premise/hypothesis pair, already mapped to ids."""

    premise_ids: list
    premise_chars: list   # list of char-id lists, aligned with premise_ids
    hyp_ids: list
    hyp_chars: list


@dataclass
class StepOutputs:
    """Everything a forward pass produces for one pair."""

    step_probs: list       # per-step [classes x 1] distributions
    kept: list             # which steps entered the aggregate
    aggregate: Tensor      # [classes x 1] averaged distribution


# Alignment heads start far hotter than fan-based init would make them.
# Recurrent encoders emit activations with std around 0.05-0.1, so dot-product
# logits over a few dozen dimensions would have a spread near 0.02: softmax
# over positions starts uniform and its gradient starves every attention
# parameter (measured ~1e-6 relative to ordinary layers). The multipliers
# below lift initial logit spreads to order one; both stay fully learnable
# (the projection through its norm gain, the heads as plain weights).
ATTN_GAIN_SCALE = 6.0
SCORE_HEAD_SCALE = 40.0


def _score_head(rng: RngStream, rows: int, cols: int) -> Tensor:
    head = uniform_init(rng, rows, cols)
    head.data *= SCORE_HEAD_SCALE
    return head


@dataclass
class SanParameters:
    """Every learnable tensor, with stable names for saving and updates."""

    word_emb: Tensor
    char_cnn: CharCnnParams
    lex_ffn_p: FfnParams
    lex_ffn_h: FfnParams
    ctx1_f: LstmParams
    ctx1_b: LstmParams
    ctx2_f: LstmParams
    ctx2_b: LstmParams
    attn_proj: Projection
    mem_f: LstmParams
    mem_b: LstmParams
    init_attn: Tensor      # [1 x 2h], starts the answer state from M_h
    read_form: Tensor      # [2h x 2h], bilinear state-to-premise scores
    gru: GruParams
    classify_w: Tensor     # [classes x 8h]
    base_attn: Tensor      # [1 x 2h], single-shot premise self-attention

    @classmethod
    def create(cls, config: ModelConfig, word_vocab: int, char_vocab: int,
               seed: int) -> "SanParameters":
        config.validate()
        rng = RngStream(seed).derive("params")
        h2 = 2 * config.hidden
        char_out = sum(config.char_channels)
        lex_in = config.word_dim + char_out
        wn = config.weight_norm

        word_emb = embedding_init(rng.derive("word_emb"), word_vocab,
                                  config.word_dim)
        word_emb.requires_grad = not config.freeze_word_emb
        return cls(
            word_emb=word_emb,
            char_cnn=CharCnnParams.create(rng.derive("char_cnn"), char_vocab,
                                          config.char_dim, config.char_windows,
                                          config.char_channels),
            lex_ffn_p=FfnParams.create(rng.derive("lex_p"), lex_in,
                                       config.lex_hidden, config.lex_dim, wn),
            lex_ffn_h=FfnParams.create(rng.derive("lex_h"), lex_in,
                                       config.lex_hidden, config.lex_dim, wn),
            ctx1_f=LstmParams.create(rng.derive("ctx1f"), config.lex_dim, config.hidden),
            ctx1_b=LstmParams.create(rng.derive("ctx1b"), config.lex_dim, config.hidden),
            ctx2_f=LstmParams.create(rng.derive("ctx2f"), config.hidden, config.hidden),
            ctx2_b=LstmParams.create(rng.derive("ctx2b"), config.hidden, config.hidden),
            attn_proj=Projection.create(rng.derive("attn"), config.attn_dim, h2,
                                        wn, gain_scale=ATTN_GAIN_SCALE),
            mem_f=LstmParams.create(rng.derive("memf"), 3 * h2, config.hidden),
            mem_b=LstmParams.create(rng.derive("memb"), 3 * h2, config.hidden),
            init_attn=_score_head(rng.derive("init_attn"), 1, h2),
            read_form=_score_head(rng.derive("read_form"), h2, h2),
            gru=GruParams.create(rng.derive("gru"), h2, h2),
            classify_w=uniform_init(rng.derive("classify"), config.classes, 4 * h2),
            base_attn=_score_head(rng.derive("base_attn"), 1, h2),
        )

    def named_tensors(self) -> dict:
        """Stable name -> tensor map; iteration order is the field order."""
        out = {"word_emb": self.word_emb}
        out.update(self.char_cnn.named("char_cnn"))
        out.update(self.lex_ffn_p.named("lex_ffn_p"))
        out.update(self.lex_ffn_h.named("lex_ffn_h"))
        for name in ("ctx1_f", "ctx1_b", "ctx2_f", "ctx2_b", "mem_f", "mem_b"):
            out.update(getattr(self, name).named(name))
        out.update(self.attn_proj.named("attn_proj"))
        out.update(self.gru.named("gru"))
        for name in ("init_attn", "read_form", "classify_w", "base_attn"):
            out[name] = getattr(self, name)
        return out


# ---------------------------------------------------------------------------
# stage 1: lexicon encoding
# ---------------------------------------------------------------------------

class LexiconCache:
    """Per-batch memo of encoded token columns, keyed by side and token.

    All cached columns belong to one tape, so a batch may only reuse a
    cache within a single recorded forward/backward cycle.
    """

    def __init__(self):
        self._cols: dict = {}

    def encode(self, params: SanParameters, side: str,
               ids: Sequence[int], chars: Sequence[Sequence[int]]) -> Tensor:
        keys = [(side, i, tuple(c)) for i, c in zip(ids, chars)]
        missing = [k for k in dict.fromkeys(keys) if k not in self._cols]
        if missing:
            cols = _encode_token_block(params, side,
                                       [k[1] for k in missing],
                                       [list(k[2]) for k in missing])
            for j, k in enumerate(missing):
                self._cols[k] = T.slice_cols(cols, j, j + 1)
        return T.concat([self._cols[k] for k in keys], axis=1)


def _encode_token_block(params: SanParameters, side: str,
                        ids: Sequence[int], chars: Sequence[Sequence[int]]) -> Tensor:
    """Encode a set of tokens in one vectorized feed-forward application."""
    word_cols = embed_tokens(params.word_emb, ids)
    char_cols = T.concat([char_cnn_encode(params.char_cnn, c) for c in chars], axis=1)
    x = T.concat([word_cols, char_cols], axis=0)
    ffn = params.lex_ffn_p if side == "premise" else params.lex_ffn_h
    return ffn_apply(ffn, x)


def lexicon_encode(params: SanParameters, side: str, ids: Sequence[int],
                   chars: Sequence[Sequence[int]],
                   cache: Optional[LexiconCache] = None) -> Tensor:
    """Token ids -> [lex_dim x L] columns, optionally memoized per batch."""
    if not ids:
        raise ValueError("lexicon_encode: empty token sequence")
    if cache is not None:
        return cache.encode(params, side, ids, chars)
    return _encode_token_block(params, side, ids, chars)


# ---------------------------------------------------------------------------
# stage 2: contextual encoding
# ---------------------------------------------------------------------------

def contextual_encode(params: SanParameters, config: ModelConfig, lex: Tensor,
                      training: bool, rng: RngStream) -> Tensor:
    """Stacked maxout-shrunk BiLSTMs; output stacks both layers [2h x L]."""
    h, rate = config.hidden, config.dropout_rate

    def masks(label):
        return (recurrent_mask(h, rate, rng.derive(label + ".f"), training),
                recurrent_mask(h, rate, rng.derive(label + ".b"), training))

    low = maxout_shrink(bilstm(params.ctx1_f, params.ctx1_b, lex, masks("ctx1")))
    high = maxout_shrink(bilstm(params.ctx2_f, params.ctx2_b, low, masks("ctx2")))
    return T.concat([low, high], axis=0)


# ---------------------------------------------------------------------------
# stage 3: alignment and memory
# ---------------------------------------------------------------------------

def _attention_dropout(attn: Tensor, rate: float, rng: RngStream) -> Tensor:
    """Randomly zero alignment weights, renormalizing each row.

    A row losing every weight keeps its original distribution instead of
    degenerating, so downstream reads always see a proper average.
    """
    keep = np.asarray(rng.uniform(size=attn.shape)) >= rate
    dead = ~keep.any(axis=1)
    keep[dead, :] = True
    masked = T.mul(attn, Tensor(keep.astype(np.float64)))
    return T.normalize_rows(masked)


def attention_align(params: SanParameters, config: ModelConfig,
                    ctx_p: Tensor, ctx_h: Tensor,
                    training: bool, rng: RngStream) -> tuple:
    """Cross-attend the contexts; returns augmented streams (U_p, U_h).

    Scores come from a shared relu projection of both sides. The score
    matrix is normalized twice: over hypothesis positions to read the
    hypothesis for each premise token, and over premise positions to read
    the premise for each hypothesis token, so both gathered summaries are
    proper weighted averages.
    """
    proj = params.attn_proj.weight()
    prem = T.relu(T.matmul(proj, ctx_p))
    hyp = T.relu(T.matmul(proj, ctx_h))
    scores = T.matmul(T.transpose(prem), hyp)            # [Lp x Lh]
    attn = T.softmax(scores, axis=1)                     # premise rows
    attn_rev = T.softmax(T.transpose(scores), axis=1)    # hypothesis rows
    if training and config.dropout_rate > 0.0:
        attn = _attention_dropout(attn, config.dropout_rate,
                                  rng.derive("attn_drop"))
        attn_rev = _attention_dropout(attn_rev, config.dropout_rate,
                                      rng.derive("attn_drop_rev"))
    gathered_h = T.matmul(ctx_h, T.transpose(attn))      # [2h x Lp]
    gathered_p = T.matmul(ctx_p, T.transpose(attn_rev))  # [2h x Lh]
    u_p = T.concat([ctx_p, gathered_h], axis=0)
    u_h = T.concat([ctx_h, gathered_p], axis=0)
    return u_p, u_h


def build_memory(params: SanParameters, config: ModelConfig, u: Tensor,
                 ctx: Tensor, label: str, training: bool, rng: RngStream) -> Tensor:
    """Fuse the augmented stream with its context: BiLSTM([U; C]) -> [2h x L]."""
    h, rate = config.hidden, config.dropout_rate
    masks = (recurrent_mask(h, rate, rng.derive(label + ".f"), training),
             recurrent_mask(h, rate, rng.derive(label + ".b"), training))
    return bilstm(params.mem_f, params.mem_b, T.concat([u, ctx], axis=0), masks)


# ---------------------------------------------------------------------------
# stage 4: answer refinement
# ---------------------------------------------------------------------------

def answer_init(params: SanParameters, mem_h: Tensor) -> Tensor:
    """Initial state: attention-weighted sum of hypothesis memory columns."""
    alpha = T.softmax(T.matmul(params.init_attn, mem_h), axis=1)
    return T.matmul(mem_h, T.transpose(alpha))


def answer_read(params: SanParameters, state: Tensor, mem_p: Tensor) -> Tensor:
    """Read the premise memory through a bilinear match with the state."""
    return bilinear_read(state, params.read_form, mem_p)


def step_classify(params: SanParameters, state: Tensor, read: Tensor) -> Tensor:
    """Class distribution from [state; read; |state-read|; state*read]."""
    return match_classify(params.classify_w, state, read)


def sample_step_keep(steps: int, rate: float, rng: RngStream) -> list:
    """Bernoulli keep flags per step, resampled until at least one survives."""
    if rate == 0.0:
        return [True] * steps
    while True:
        kept = [bool(u >= rate) for u in np.asarray(rng.uniform(size=steps))]
        if any(kept):
            return kept


def aggregate_predictions(step_probs: Sequence[Tensor],
                          kept: Optional[Sequence[bool]] = None) -> Tensor:
    """Average the per-step distributions over the kept subset (all if None)."""
    if kept is None:
        kept = [True] * len(step_probs)
    if len(kept) != len(step_probs) or not any(kept):
        raise ValueError("aggregate needs at least one kept step")
    n = sum(kept)
    weights = Tensor(np.asarray([[1.0 / n if k else 0.0] for k in kept]))
    return T.matmul(T.concat(list(step_probs), axis=1), weights)


# ---------------------------------------------------------------------------
# full passes
# ---------------------------------------------------------------------------

def _encode_pair(params: SanParameters, config: ModelConfig, pair: PairInput,
                 training: bool, rng: RngStream,
                 cache: Optional[LexiconCache]) -> tuple:
    """Shared stages 1-3; returns the two memories (M_p, M_h)."""
    lex_p = lexicon_encode(params, "premise", pair.premise_ids,
                           pair.premise_chars, cache)
    lex_h = lexicon_encode(params, "hypothesis", pair.hyp_ids,
                           pair.hyp_chars, cache)
    ctx_p = contextual_encode(params, config, lex_p, training, rng.derive("ctx_p"))
    ctx_h = contextual_encode(params, config, lex_h, training, rng.derive("ctx_h"))
    u_p, u_h = attention_align(params, config, ctx_p, ctx_h, training, rng)
    mem_p = build_memory(params, config, u_p, ctx_p, "mem_p", training, rng)
    mem_h = build_memory(params, config, u_h, ctx_h, "mem_h", training, rng)
    return mem_p, mem_h


def forward(params: SanParameters, config: ModelConfig, pair: PairInput,
            training: bool = False, rng: Optional[RngStream] = None,
            cache: Optional[LexiconCache] = None) -> StepOutputs:
    """Multi-step pass: refine the state, classify at every step, average.

    During training a random non-empty subset of the per-step distributions
    forms the average; at evaluation time all steps do.
    """
    if rng is None:
        if training:
            raise ValueError("training forward needs an rng")
        rng = RngStream(0)
    mem_p, mem_h = _encode_pair(params, config, pair, training, rng, cache)
    state = answer_init(params, mem_h)
    step_probs = []
    for _ in range(config.steps):
        read = answer_read(params, state, mem_p)
        step_probs.append(step_classify(params, state, read))
        state = gru_step(params.gru, state, read)
    if training:
        kept = sample_step_keep(config.steps, config.step_dropout,
                                rng.derive("step_drop"))
    else:
        kept = [True] * config.steps
    return StepOutputs(step_probs=step_probs, kept=kept,
                       aggregate=aggregate_predictions(step_probs, kept))


def single_step_forward(params: SanParameters, config: ModelConfig,
                        pair: PairInput, training: bool = False,
                        rng: Optional[RngStream] = None,
                        cache: Optional[LexiconCache] = None) -> StepOutputs:
    """One-shot variant: classify once from the initial state and a
    self-attended premise summary. Shares stages 1-3 with the multi-step
    pass; no refinement, no step dropout."""
    if rng is None:
        if training:
            raise ValueError("training forward needs an rng")
        rng = RngStream(0)
    mem_p, mem_h = _encode_pair(params, config, pair, training, rng, cache)
    state = answer_init(params, mem_h)
    alpha = T.softmax(T.matmul(params.base_attn, mem_p), axis=1)
    read = T.matmul(mem_p, T.transpose(alpha))
    probs = step_classify(params, state, read)
    return StepOutputs(step_probs=[probs], kept=[True], aggregate=probs)


LOSS_EPS = 1e-12


def nli_loss(outputs: StepOutputs, gold: int) -> Tensor:
    """Negative log probability of the gold class under the aggregate.

    A tiny epsilon inside the log keeps the loss finite even when the gold
    probability underflows to exactly zero.
    """
    classes = outputs.aggregate.shape[0]
    if not 0 <= gold < classes:
        raise ValueError(f"gold label {gold} outside {classes} classes")
    p = T.pick(outputs.aggregate, (gold, 0))
    return T.neg(T.log(T.add(p, Tensor(np.asarray(LOSS_EPS)))))
