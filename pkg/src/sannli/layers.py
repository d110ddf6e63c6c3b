"""Neural building blocks on top of the autodiff core.

Sequences are column matrices [features x length]; single vectors are
[features x 1] columns. Recurrent cells follow that convention: each time
step consumes and produces one column.

The LSTM exists in two forms that must agree: ``lstm_step`` composes tape
primitives one step at a time, and ``lstm_sequence`` runs an entire
direction as one fused op with a hand-derived backward pass. The fused
form is what the model uses; the composed form is the reference the tests
check it against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor, record_op


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def uniform_init(rng: RngStream, rows: int, cols: int) -> Tensor:
    """Xavier-uniform matrix, tracked for gradients."""
    limit = np.sqrt(6.0 / (rows + cols))
    data = np.asarray(rng.uniform(-limit, limit, size=(rows, cols)))
    return Tensor(data, requires_grad=True)


def embedding_init(rng: RngStream, rows: int, cols: int) -> Tensor:
    """Lookup-table init, U(-1, 1) per entry.

    Tables are read one row at a time, not multiplied through, so fan-based
    scaling would leave them far smaller than the pretrained vectors they
    stand in for; unit range keeps downstream activations at a healthy
    scale.
    """
    data = np.asarray(rng.uniform(-1.0, 1.0, size=(rows, cols)))
    return Tensor(data, requires_grad=True)


def zeros_init(rows: int) -> Tensor:
    return Tensor(np.zeros((rows, 1)), requires_grad=True)


def scalar_param(value: float) -> Tensor:
    return Tensor(np.asarray(float(value)), requires_grad=True)


# ---------------------------------------------------------------------------
# weight-normalized linear maps
# ---------------------------------------------------------------------------

@dataclass
class Projection:
    """A linear map stored either directly or as a normalized direction.

    With reparameterization on, the effective weight is gain * v / ||v||
    and the gain starts at ||v_init|| so the initial map is unchanged.
    """

    v: Tensor
    gain: Optional[Tensor]

    @classmethod
    def create(cls, rng: RngStream, rows: int, cols: int,
               normalize: bool = True, gain_scale: float = 1.0) -> "Projection":
        v = uniform_init(rng, rows, cols)
        gain = None
        if normalize:
            gain = scalar_param(gain_scale * float(np.sqrt((v.data * v.data).sum())))
        else:
            v.data *= gain_scale
        return cls(v=v, gain=gain)

    def weight(self) -> Tensor:
        if self.gain is None:
            return self.v
        return T.weight_norm(self.v, self.gain)

    def named(self, prefix: str) -> dict:
        out = {f"{prefix}.v": self.v}
        if self.gain is not None:
            out[f"{prefix}.gain"] = self.gain
        return out


@dataclass
class FfnParams:
    """Two-layer position-wise feed-forward block: relu between linear maps."""

    w1: Projection
    b1: Tensor
    w2: Projection
    b2: Tensor

    @classmethod
    def create(cls, rng: RngStream, d_in: int, d_hidden: int, d_out: int,
               normalize: bool = True) -> "FfnParams":
        return cls(
            w1=Projection.create(rng.derive("w1"), d_hidden, d_in, normalize),
            b1=zeros_init(d_hidden),
            w2=Projection.create(rng.derive("w2"), d_out, d_hidden, normalize),
            b2=zeros_init(d_out),
        )

    def named(self, prefix: str) -> dict:
        out = {}
        out.update(self.w1.named(f"{prefix}.w1"))
        out[f"{prefix}.b1"] = self.b1
        out.update(self.w2.named(f"{prefix}.w2"))
        out[f"{prefix}.b2"] = self.b2
        return out


def ffn_apply(p: FfnParams, x: Tensor) -> Tensor:
    """Apply the block column-wise: w2 @ relu(w1 @ x + b1) + b2."""
    h = T.relu(T.add_bias(T.matmul(p.w1.weight(), x), p.b1))
    return T.add_bias(T.matmul(p.w2.weight(), h), p.b2)


# ---------------------------------------------------------------------------
# recurrent dropout
# ---------------------------------------------------------------------------

def recurrent_mask(hidden: int, rate: float, rng: RngStream,
                   training: bool) -> Optional[np.ndarray]:
    """One keep mask per sequence, reused at every time step.

    Returns a [hidden x 1] array of 0 / (1/(1-rate)) values to multiply the
    recurrent state with, or None when dropout is off. Sharing the mask
    across steps keeps the recurrence's scale stable within a sequence.
    """
    if not training or rate == 0.0:
        return None
    keep = np.asarray(rng.uniform(size=(hidden, 1))) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

@dataclass
class LstmParams:
    """One direction of an LSTM; gates stacked [input; forget; output; cell].

    The three sigmoid gates sit in one contiguous block so a sequence step
    activates them with a single call.
    """

    w: Tensor  # [4h x d_in]
    u: Tensor  # [4h x h]
    b: Tensor  # [4h x 1]

    @classmethod
    def create(cls, rng: RngStream, d_in: int, hidden: int) -> "LstmParams":
        b = np.zeros((4 * hidden, 1))
        b[hidden:2 * hidden] = 1.0  # open the forget gate at the start
        # Fan terms count one gate's rows, not all four stacked gates;
        # stacking is a storage layout, not a wider output.
        lw = np.sqrt(6.0 / (d_in + hidden))
        lu = np.sqrt(6.0 / (hidden + hidden))
        return cls(
            w=Tensor(np.asarray(rng.derive("w").uniform(-lw, lw, size=(4 * hidden, d_in))),
                     requires_grad=True),
            u=Tensor(np.asarray(rng.derive("u").uniform(-lu, lu, size=(4 * hidden, hidden))),
                     requires_grad=True),
            b=Tensor(b, requires_grad=True),
        )

    @property
    def hidden(self) -> int:
        return self.u.shape[1]

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.u": self.u, f"{prefix}.b": self.b}


def lstm_step(p: LstmParams, x: Tensor, h_prev: Tensor, c_prev: Tensor,
              rec_mask: Optional[np.ndarray] = None) -> tuple:
    """One step composed from tape primitives; reference path for the fused op."""
    hid = p.hidden
    h_in = h_prev if rec_mask is None else T.mul(h_prev, Tensor(rec_mask))
    pre = T.add_bias(T.add(T.matmul(p.w, x), T.matmul(p.u, h_in)), p.b)
    i = T.sigmoid(T.slice_rows(pre, 0, hid))
    f = T.sigmoid(T.slice_rows(pre, hid, 2 * hid))
    o = T.sigmoid(T.slice_rows(pre, 2 * hid, 3 * hid))
    g = T.tanh_(T.slice_rows(pre, 3 * hid, 4 * hid))
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    h = T.mul(o, T.tanh_(c))
    return h, c


def lstm_sequence(p: LstmParams, xs: Tensor,
                  rec_mask: Optional[np.ndarray] = None,
                  reverse: bool = False) -> Tensor:
    """Run a whole direction [d_in x L] -> [h x L] as one fused op.

    The input contribution w @ xs + b is computed for all steps up front;
    only the recurrence itself is sequential. The backward closure replays
    the stored gate activations in reverse time order.
    """
    if xs.data.ndim != 2 or xs.shape[0] != p.w.shape[1]:
        raise T.ShapeError(f"lstm_sequence: input {xs.shape} for w {p.w.shape}")
    hid = p.hidden
    L = xs.shape[1]
    wd, ud, bd, xd = p.w.data, p.u.data, p.b.data, xs.data
    pre_all = wd @ xd + bd  # [4h x L]
    order = range(L - 1, -1, -1) if reverse else range(L)

    H = np.empty((hid, L))
    I = np.empty((hid, L)); F = np.empty((hid, L))
    G = np.empty((hid, L)); O = np.empty((hid, L))
    TH = np.empty((hid, L)); CPREV = np.empty((hid, L)); HM = np.empty((hid, L))

    h = np.zeros((hid, 1))
    c = np.zeros((hid, 1))
    for t in order:
        hm = h if rec_mask is None else h * rec_mask
        pre = pre_all[:, t:t + 1] + ud @ hm
        gates = T.sigmoid_values(pre[:3 * hid])
        i = gates[0:hid]
        f = gates[hid:2 * hid]
        o = gates[2 * hid:]
        g = np.tanh(pre[3 * hid:])
        CPREV[:, t:t + 1] = c
        c = f * c + i * g
        th = np.tanh(c)
        h = o * th
        I[:, t:t + 1] = i; F[:, t:t + 1] = f
        G[:, t:t + 1] = g; O[:, t:t + 1] = o
        TH[:, t:t + 1] = th; HM[:, t:t + 1] = hm
        H[:, t:t + 1] = h

    def bwd(dH):
        dPre = np.zeros((4 * hid, L))
        dh_rec = np.zeros((hid, 1))
        dc_rec = np.zeros((hid, 1))
        for t in reversed(list(order)):
            i = I[:, t:t + 1]; f = F[:, t:t + 1]
            g = G[:, t:t + 1]; o = O[:, t:t + 1]
            th = TH[:, t:t + 1]
            dh = dH[:, t:t + 1] + dh_rec
            do = dh * th
            dc = dc_rec + dh * o * (1.0 - th * th)
            di = dc * g
            dg = dc * i
            df = dc * CPREV[:, t:t + 1]
            dc_rec = dc * f
            dpre = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                do * o * (1.0 - o),
                dg * (1.0 - g * g),
            ])
            dPre[:, t:t + 1] = dpre
            dh_rec = ud.T @ dpre
            if rec_mask is not None:
                dh_rec = dh_rec * rec_mask
        dxs = wd.T @ dPre
        dw = dPre @ xd.T
        du = dPre @ HM.T
        db = dPre.sum(axis=1, keepdims=True)
        return dxs, dw, du, db

    return record_op(H, (xs, p.w, p.u, p.b), bwd)


def bilstm_composed(fwd: LstmParams, bwd: LstmParams, xs: Tensor,
                    masks: tuple = (None, None)) -> Tensor:
    """Per-direction reference for the fused op below."""
    out_f = lstm_sequence(fwd, xs, rec_mask=masks[0], reverse=False)
    out_b = lstm_sequence(bwd, xs, rec_mask=masks[1], reverse=True)
    return T.concat([out_f, out_b], axis=0)


def bilstm(fwd: LstmParams, bwd: LstmParams, xs: Tensor,
           masks: tuple = (None, None)) -> Tensor:
    """Both directions over the sequence, hidden states stacked [fwd; bwd].

    Fused into one recorded op: loop step t advances the forward state at
    position t and the backward state at position L-1-t together, so each
    iteration activates both directions' gates with single sigmoid/tanh
    calls on [rows x 2] blocks. Direction 0 is forward, 1 is backward.
    """
    if xs.data.ndim != 2 or xs.shape[0] != fwd.w.shape[1]:
        raise T.ShapeError(f"bilstm: input {xs.shape} for w {fwd.w.shape}")
    if fwd.hidden != bwd.hidden or fwd.w.shape != bwd.w.shape:
        raise T.ShapeError("bilstm: direction parameter shapes differ")
    hid = fwd.hidden
    L = xs.shape[1]
    xd = xs.data
    wf, uf, bf = fwd.w.data, fwd.u.data, fwd.b.data
    wb, ub, bb = bwd.w.data, bwd.u.data, bwd.b.data

    # Input contributions for every step up front; the backward direction's
    # columns are flipped so column t always belongs to loop step t.
    base = np.stack([wf @ xd + bf, (wb @ xd + bb)[:, ::-1]], axis=-1)  # [4h,L,2]
    U3 = np.stack([uf, ub])                                            # [2,4h,h]
    U3t = U3.transpose(0, 2, 1)
    if masks[0] is None and masks[1] is None:
        m2 = None
    else:
        ones = np.ones((hid, 1))
        m2 = np.hstack([masks[0] if masks[0] is not None else ones,
                        masks[1] if masks[1] is not None else ones])

    I = np.empty((L, hid, 2)); F = np.empty((L, hid, 2))
    O = np.empty((L, hid, 2)); G = np.empty((L, hid, 2))
    TH = np.empty((L, hid, 2)); CPREV = np.empty((L, hid, 2))
    HM = np.empty((L, hid, 2)); HOUT = np.empty((L, hid, 2))

    h2 = np.zeros((hid, 2))
    c2 = np.zeros((hid, 2))
    for t in range(L):
        hm = h2 if m2 is None else h2 * m2
        uh = U3 @ hm.T[:, :, None]                  # [2,4h,1]
        pre = base[:, t, :] + uh[:, :, 0].T         # [4h,2]
        gates = T.sigmoid_values(pre[:3 * hid])
        i = gates[:hid]
        f = gates[hid:2 * hid]
        o = gates[2 * hid:]
        g = np.tanh(pre[3 * hid:])
        CPREV[t] = c2
        c2 = f * c2 + i * g
        th = np.tanh(c2)
        h2 = o * th
        I[t] = i; F[t] = f; O[t] = o; G[t] = g
        TH[t] = th; HM[t] = hm; HOUT[t] = h2

    out = np.empty((2 * hid, L))
    out[:hid] = HOUT[:, :, 0].T
    out[hid:] = HOUT[::-1, :, 1].T

    def bwdfn(dOut):
        dH = np.empty((L, hid, 2))
        dH[:, :, 0] = dOut[:hid].T
        dH[:, :, 1] = dOut[hid:][:, ::-1].T
        dPre = np.empty((L, 4 * hid, 2))
        dh_rec = np.zeros((hid, 2))
        dc_rec = np.zeros((hid, 2))
        for t in range(L - 1, -1, -1):
            i = I[t]; f = F[t]; o = O[t]; g = G[t]; th = TH[t]
            dh = dH[t] + dh_rec
            do = dh * th
            dc = dc_rec + dh * o * (1.0 - th * th)
            dc_rec = dc * f
            dpre = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * CPREV[t] * f * (1.0 - f),
                do * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ])
            dPre[t] = dpre
            dh_rec = (U3t @ dpre.T[:, :, None])[:, :, 0].T
            if m2 is not None:
                dh_rec = dh_rec * m2
        dPf = dPre[:, :, 0].T                       # loop order == original
        dPb_loop = dPre[:, :, 1].T
        dPb = dPre[::-1, :, 1].T                    # original column order
        dxs = wf.T @ dPf + wb.T @ dPb
        dwf = dPf @ xd.T
        dwb = dPb @ xd.T
        duf = dPf @ HM[:, :, 0]
        dub = dPb_loop @ HM[:, :, 1]
        dbf = dPf.sum(axis=1, keepdims=True)
        dbb = dPb_loop.sum(axis=1, keepdims=True)
        return (dxs, dwf, duf, dbf, dwb, dub, dbb)

    return record_op(out, (xs, fwd.w, fwd.u, fwd.b, bwd.w, bwd.u, bwd.b), bwdfn)


def maxout_shrink(x: Tensor, factor: int = 2) -> Tensor:
    """Halve the feature rows by taking the max of each consecutive pair."""
    return T.rowgroup_max(x, factor)


# ---------------------------------------------------------------------------
# GRU (the answer-state cell)
# ---------------------------------------------------------------------------

@dataclass
class GruParams:
    wr: Tensor; ur: Tensor; br: Tensor
    wz: Tensor; uz: Tensor; bz: Tensor
    wn: Tensor; un: Tensor; bn: Tensor

    @classmethod
    def create(cls, rng: RngStream, d_in: int, hidden: int) -> "GruParams":
        def m(label, rows, cols):
            return uniform_init(rng.derive(label), rows, cols)
        return cls(
            wr=m("wr", hidden, d_in), ur=m("ur", hidden, hidden), br=zeros_init(hidden),
            wz=m("wz", hidden, d_in), uz=m("uz", hidden, hidden), bz=zeros_init(hidden),
            wn=m("wn", hidden, d_in), un=m("un", hidden, hidden), bn=zeros_init(hidden),
        )

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("wr", "ur", "br", "wz", "uz", "bz", "wn", "un", "bn")}


def gru_step_composed(p: GruParams, state: Tensor, x: Tensor) -> Tensor:
    """Primitive-op reference for the fused step below."""
    r = T.sigmoid(T.add_bias(T.add(T.matmul(p.wr, x), T.matmul(p.ur, state)), p.br))
    z = T.sigmoid(T.add_bias(T.add(T.matmul(p.wz, x), T.matmul(p.uz, state)), p.bz))
    n = T.tanh_(T.add_bias(T.add(T.matmul(p.wn, x), T.matmul(p.un, T.mul(r, state))), p.bn))
    zs = T.mul(z, state)
    return T.add(zs, T.sub(n, T.mul(z, n)))


def gru_step(p: GruParams, state: Tensor, x: Tensor) -> Tensor:
    """state' = z*state + (1-z)*candidate, with reset-gated candidate.

    Fused into one recorded op; the hot path runs this every answer step.
    """
    sd, xd = state.data, x.data
    wr, ur, br = p.wr.data, p.ur.data, p.br.data
    wz, uz, bz = p.wz.data, p.uz.data, p.bz.data
    wn, un, bn = p.wn.data, p.un.data, p.bn.data
    r = T.sigmoid_values(wr @ xd + ur @ sd + br)
    z = T.sigmoid_values(wz @ xd + uz @ sd + bz)
    rs = r * sd
    n = np.tanh(wn @ xd + un @ rs + bn)
    out = z * sd + (1.0 - z) * n

    def bwd(g):
        dz = g * (sd - n)
        dn = g * (1.0 - z)
        ds = g * z
        da_n = dn * (1.0 - n * n)
        dwn = da_n @ xd.T
        dun = da_n @ rs.T
        drs = un.T @ da_n
        dr = drs * sd
        ds = ds + drs * r
        da_r = dr * r * (1.0 - r)
        dwr = da_r @ xd.T
        dur = da_r @ sd.T
        ds = ds + ur.T @ da_r
        da_z = dz * z * (1.0 - z)
        dwz = da_z @ xd.T
        duz = da_z @ sd.T
        ds = ds + uz.T @ da_z
        dx = wr.T @ da_r + wz.T @ da_z + wn.T @ da_n
        dbr = da_r.sum(axis=1, keepdims=True)
        dbz = da_z.sum(axis=1, keepdims=True)
        dbn = da_n.sum(axis=1, keepdims=True)
        return (ds, dx, dwr, dur, dbr, dwz, duz, dbz, dwn, dun, dbn)

    return record_op(out, (state, x, p.wr, p.ur, p.br, p.wz, p.uz, p.bz,
                           p.wn, p.un, p.bn), bwd)


# ---------------------------------------------------------------------------
# fused attention/classification kernels
# ---------------------------------------------------------------------------

def bilinear_read(state: Tensor, form: Tensor, mem: Tensor) -> Tensor:
    """Attention-weighted read of `mem` scored by state' @ form @ mem.

    state is [d x m], form [d x d], mem [d x L]; each state column gets a
    softmax over the L memory slots and the result is the weighted sum of
    memory columns, shape [d x m].
    """
    sd, fd, md = state.data, form.data, mem.data
    q = fd.T @ sd                                 # [d x m]
    scores = q.T @ md                             # [m x L]
    shifted = np.exp(scores - scores.max(axis=1, keepdims=True))
    beta = shifted / shifted.sum(axis=1, keepdims=True)
    out = md @ beta.T                             # [d x m]

    def bwd(g):
        dbeta = g.T @ md                          # [m x L]
        dmem = g @ beta                           # [d x L]
        dscores = beta * (dbeta - (dbeta * beta).sum(axis=1, keepdims=True))
        dq = md @ dscores.T                       # [d x m]
        dmem = dmem + q @ dscores
        dform = sd @ dq.T
        dstate = fd @ dq
        return (dstate, dform, dmem)

    return record_op(out, (state, form, mem), bwd)


def match_classify(w: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Column softmax of w @ [a; b; |a-b|; a*b].

    a and b are [d x m]; w is [k x 4d]; the result is [k x m] with each
    column a distribution over k classes.
    """
    ad, bd, wd = a.data, b.data, w.data
    sgn = np.sign(ad - bd)
    feats = np.concatenate([ad, bd, np.abs(ad - bd), ad * bd], axis=0)
    logits = wd @ feats
    shifted = np.exp(logits - logits.max(axis=0, keepdims=True))
    probs = shifted / shifted.sum(axis=0, keepdims=True)
    d = ad.shape[0]

    def bwd(g):
        dlogits = probs * (g - (g * probs).sum(axis=0, keepdims=True))
        dw = dlogits @ feats.T
        dfeats = wd.T @ dlogits
        d1, d2, d3, d4 = (dfeats[:d], dfeats[d:2 * d],
                          dfeats[2 * d:3 * d], dfeats[3 * d:])
        da = d1 + d3 * sgn + d4 * bd
        db = d2 - d3 * sgn + d4 * ad
        return (dw, da, db)

    return record_op(probs, (w, a, b), bwd)


# ---------------------------------------------------------------------------
# character convolutions
# ---------------------------------------------------------------------------

@dataclass
class CharCnnParams:
    """Per-window 1-d convolutions over character embeddings, max-pooled."""

    emb: Tensor                    # [n_chars x d_char]
    windows: tuple                 # e.g. (1, 3, 5)
    weights: list                  # per window: [channels x d_char*window]
    biases: list                   # per window: [channels x 1]

    @classmethod
    def create(cls, rng: RngStream, n_chars: int, d_char: int,
               windows: tuple, channels: tuple) -> "CharCnnParams":
        if len(windows) != len(channels):
            raise ValueError("char cnn: windows and channels must pair up")
        weights, biases = [], []
        for w, ch in zip(windows, channels):
            weights.append(uniform_init(rng.derive(f"conv{w}"), ch, d_char * w))
            biases.append(zeros_init(ch))
        return cls(
            emb=embedding_init(rng.derive("emb"), n_chars, d_char),
            windows=tuple(windows), weights=weights, biases=biases,
        )

    @property
    def out_dim(self) -> int:
        return sum(w.shape[0] for w in self.weights)

    def named(self, prefix: str) -> dict:
        out = {f"{prefix}.emb": self.emb}
        for w, wt, bt in zip(self.windows, self.weights, self.biases):
            out[f"{prefix}.conv{w}.w"] = wt
            out[f"{prefix}.conv{w}.b"] = bt
        return out


def char_cnn_encode(p: CharCnnParams, char_ids: Sequence[int],
                    pad_id: int = 0) -> Tensor:
    """Encode one token's characters to a fixed [out_dim x 1] column.

    Short tokens are padded with pad_id so every window fits at least once.
    """
    ids = list(char_ids)
    need = max(p.windows)
    if len(ids) < need:
        ids = ids + [pad_id] * (need - len(ids))
    cols = T.transpose(T.gather_rows(p.emb, ids))  # [d_char x L]
    pooled = []
    for w, wt, bt in zip(p.windows, p.weights, p.biases):
        patches = T.unfold_cols(cols, w)
        act = T.relu(T.add_bias(T.matmul(wt, patches), bt))
        pooled.append(T.max_cols(act))
    return T.concat(pooled, axis=0)


# ---------------------------------------------------------------------------
# token embeddings
# ---------------------------------------------------------------------------

def embed_tokens(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Look up token ids as columns: [vocab x d] table -> [d x L]."""
    return T.transpose(T.gather_rows(table, ids))
