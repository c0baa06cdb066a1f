"""Predictor for whether a newcomer's first message gets a reply.

A personalized Bi-GRU encodes each turn from token embeddings, with both
directional initial states projected from a topic vector: the newcomer's
history embedding for the query turn, the conversation context embedding for
context turns.  A second Bi-GRU runs over the turn encodings concatenated
with their discourse vectors; a per-behavior attention weight pools its
states, and a sigmoid head scores the query.

Two forward implementations exist on purpose.  The per-instance functions
(`encode_turn`, `encode_conversation`, `instance_forward`) follow the model
definition directly and differentiate end-to-end into the topic module, which
the finite-difference suite relies on.  `forward_batch` is the padded, masked
batch version the trainer uses; a test pins both to the same outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tdm as tdm_mod
from .autodiff import ShapeError, Tensor
from .corpus import Turn, Vocab
from .layers import (EmbeddingTable, GruParams, LinearParams, bigru_encode,
                     dropout, gru_params_dict, init_embedding, init_gru,
                     init_linear, masked_gru_step)
from .tdm import TdmParams


class SnpError(ValueError):
    """Invalid predictor input (empty turn, mismatched lengths, ...)."""


@dataclass
class SnpConfig:
    topic_dim: int
    n_behaviors: int
    hidden_size: int = 100
    embedding_size: int = 100
    dropout: float = 0.2
    ablate_topic_init: bool = False
    ablate_disc_concat: bool = False
    ablate_disc_att: bool = False

    def validate(self) -> None:
        if min(self.topic_dim, self.n_behaviors,
               self.hidden_size, self.embedding_size) < 1:
            raise SnpError("all dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise SnpError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def conv_input_size(self) -> int:
        base = 2 * self.hidden_size
        return base if self.ablate_disc_concat else base + self.n_behaviors


@dataclass
class SnpParams:
    embeddings: EmbeddingTable
    turn_fwd: GruParams
    turn_bwd: GruParams
    conv_fwd: GruParams
    conv_bwd: GruParams
    proj: LinearParams        # topic vector (K) -> initial hidden state (H)
    att: Tensor               # (D, 1) scalar attention logit per behavior
    out: LinearParams         # (1, 4H) sigmoid head
    default_user_vec: Tensor  # (1, K) stand-in for users with no history

    def named(self) -> dict[str, Tensor]:
        out = {"snp.embeddings": self.embeddings.table,
               "snp.att": self.att,
               "snp.proj.weight": self.proj.weight,
               "snp.proj.bias": self.proj.bias,
               "snp.out.weight": self.out.weight,
               "snp.out.bias": self.out.bias,
               "snp.default_user_vec": self.default_user_vec}
        for prefix, gru in (("snp.turn_fwd", self.turn_fwd),
                            ("snp.turn_bwd", self.turn_bwd),
                            ("snp.conv_fwd", self.conv_fwd),
                            ("snp.conv_bwd", self.conv_bwd)):
            out.update(gru_params_dict(gru, prefix))
        return out


def init_snp(vocab_size: int, cfg: SnpConfig, rng: np.random.Generator) -> SnpParams:
    cfg.validate()
    h = cfg.hidden_size
    return SnpParams(
        embeddings=init_embedding(vocab_size, cfg.embedding_size, rng,
                                  name="snp.embeddings"),
        turn_fwd=init_gru(h, cfg.embedding_size, rng, name="snp.turn_fwd"),
        turn_bwd=init_gru(h, cfg.embedding_size, rng, name="snp.turn_bwd"),
        conv_fwd=init_gru(h, cfg.conv_input_size, rng, name="snp.conv_fwd"),
        conv_bwd=init_gru(h, cfg.conv_input_size, rng, name="snp.conv_bwd"),
        proj=init_linear(h, cfg.topic_dim, rng, name="snp.proj"),
        att=Tensor(np.zeros((cfg.n_behaviors, 1)), requires_grad=True,
                   name="snp.att"),
        out=init_linear(1, 4 * h, rng, name="snp.out"),
        default_user_vec=Tensor(np.zeros((1, cfg.topic_dim)), requires_grad=True,
                                name="snp.default_user_vec"),
    )


# ---------------------------------------------------------------------------
# Reference (per-instance) forward path
# ---------------------------------------------------------------------------


def _turn_init(p: SnpParams, cfg: SnpConfig, e: Tensor) -> Tensor:
    if cfg.ablate_topic_init:
        return Tensor(np.zeros((1, cfg.hidden_size)))
    return p.proj.apply(e)


def encode_turn(p: SnpParams, cfg: SnpConfig, token_ids: np.ndarray,
                e: Tensor) -> Tensor:
    """Bi-GRU encoding of one turn, both directions initialized from e."""
    token_ids = np.asarray(token_ids)
    if token_ids.size == 0:
        raise SnpError("cannot encode an empty turn")
    init = _turn_init(p, cfg, e)
    x = p.embeddings.lookup(token_ids)
    _, final = bigru_encode(x, init, init, p.turn_fwd, p.turn_bwd)
    return final


@dataclass
class ConversationRep:
    turn_encodings: list[Tensor]   # h_j, each (1, 2H)
    disc_encodings: Tensor         # h_j^d stacked, (T, 2H)
    attention: Tensor              # softmax weights, (1, T)
    vector: Tensor                 # h^c, (1, 4H)


def encode_conversation(p: SnpParams, cfg: SnpConfig,
                        turn_encodings: list[Tensor],
                        discourse: list[Tensor]) -> ConversationRep:
    """Second-level Bi-GRU with discourse-aware attention pooling.

    The query turn is the last element; its discourse-aware state fills the
    dedicated slot of the conversation vector and also joins the attention
    sum with every other turn.
    """
    if len(turn_encodings) != len(discourse):
        raise SnpError(f"{len(turn_encodings)} turn encodings "
                       f"but {len(discourse)} discourse vectors")
    if not turn_encodings:
        raise SnpError("cannot encode an empty conversation")
    t_len = len(turn_encodings)
    h = ad.concat(turn_encodings, axis=0)          # (T, 2H)
    if cfg.ablate_disc_concat:
        s = h
    else:
        d = ad.concat(discourse, axis=0)           # (T, D)
        s = ad.concat([h, d], axis=1)
    zero = Tensor(np.zeros((1, cfg.hidden_size)))
    hiddens, _ = bigru_encode(s, zero, zero, p.conv_fwd, p.conv_bwd)

    if cfg.ablate_disc_att:
        weights = ad.softmax(Tensor(np.zeros((1, t_len))), axis=1)
    else:
        idx = np.array([int(np.argmax(dv.data)) for dv in discourse])
        logits = ad.reshape(ad.embedding(p.att, idx), (1, t_len))
        weights = ad.softmax(logits, axis=1)
    pooled = ad.matmul(weights, hiddens)           # (1, 2H)
    query = ad.narrow(hiddens, 0, t_len - 1, 1)    # (1, 2H)
    vector = ad.concat([query, pooled], axis=1)    # (1, 4H)
    return ConversationRep(turn_encodings=turn_encodings, disc_encodings=hiddens,
                           attention=weights, vector=vector)


def predict(p: SnpParams, h_c: Tensor) -> Tensor:
    """Success probability σ(w·h^c + b), shape (batch, 1)."""
    return ad.sigmoid(p.out.apply(h_c))


def snp_loss(probs: Tensor, labels: np.ndarray, mu_w: float,
             clamp: float = 1e-7) -> tuple[Tensor, int]:
    """Class-weighted binary cross entropy, summed over the batch.

    Probabilities at or beyond the clamp bounds are clipped and counted; the
    count is returned so callers can log the event.
    """
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if probs.shape != labels.shape:
        raise SnpError(f"probs {probs.shape} vs labels {labels.shape}")
    n_clamped = int(((probs.data <= clamp) | (probs.data >= 1.0 - clamp)).sum())
    p = ad.clip(probs, clamp, 1.0 - clamp)
    y = Tensor(labels, dtype=probs.data.dtype)
    one_minus_y = ad.add_scalar(ad.neg(y), 1.0)
    pos = ad.scale(ad.mul(y, ad.log(p)), mu_w)
    neg = ad.mul(one_minus_y, ad.log(ad.add_scalar(ad.neg(p), 1.0)))
    loss = ad.neg(ad.reduce_sum(ad.add(pos, neg)))
    return loss, n_clamped


def prediction_record(instance_id: str, probability: float, gold: int,
                      threshold: float = 0.5) -> dict:
    return {"instance_id": instance_id,
            "probability": round(float(probability), 6),
            "predicted": int(probability >= threshold),
            "gold": int(gold)}


def instance_forward(tdm_p: TdmParams, snp_p: SnpParams, cfg: SnpConfig,
                     vocab: Vocab, context: list[Turn], query: Turn,
                     history_bows: list[np.ndarray], *, tau: float = 0.3,
                     gumbel: np.ndarray | None = None) -> Tensor:
    """Full differentiable path from both parameter sets to one probability.

    With gumbel noise the discourse vectors are relaxed samples (training
    style); without it they are hard argmax one-hots (inference style, no
    gradient into the discourse head).
    """
    if not context:
        raise SnpError("instance needs at least one context turn")
    turns = context + [query]

    context_bow = tdm_mod.conversation_topic_bow(vocab, context).reshape(1, -1)
    e_c, _ = tdm_mod.conversation_stats(tdm_p, Tensor(context_bow))
    if history_bows:
        hist = np.stack(history_bows)
        mus, _ = tdm_mod.conversation_stats(tdm_p, Tensor(hist))
        e_u = ad.reshape(ad.reduce_mean(mus, axis=0), (1, cfg.topic_dim))
    else:
        e_u = snp_p.default_user_vec

    bows = tdm_mod.turn_full_bows(vocab, turns)
    pi = ad.softmax(tdm_mod.discourse_logits(tdm_p, Tensor(bows)))
    if gumbel is None:
        d = tdm_mod.sample_discourse(pi, np.zeros(pi.shape), tau, hard=True)
    else:
        d = tdm_mod.sample_discourse(pi, gumbel, tau)
    disc = [ad.narrow(d, 0, j, 1) for j in range(len(turns))]

    encodings = []
    for j, turn in enumerate(turns):
        e = e_u if j == len(turns) - 1 else e_c
        encodings.append(encode_turn(snp_p, cfg, vocab.encode(turn.tokens), e))
    rep = encode_conversation(snp_p, cfg, encodings, disc)
    return predict(snp_p, rep.vector)


# ---------------------------------------------------------------------------
# Batched (masked) forward path
# ---------------------------------------------------------------------------


@dataclass
class InstanceInputs:
    """Everything the predictor needs for one instance, topic side resolved.

    ``token_ids`` lists every turn, context first and the query last.
    ``init_user`` is None when the newcomer has no prior history; the batch
    then routes that row through the learnable default vector.
    """

    instance_id: str
    token_ids: list[np.ndarray]
    init_context: np.ndarray      # (K,)
    init_user: np.ndarray | None  # (K,) or None
    disc: np.ndarray              # (T, D) discourse vector per turn
    label: int


@dataclass
class SnpBatch:
    """Padded arrays for one minibatch of instances.

    Turn rows are shared across instances of the batch: token_ids holds every
    turn once, and turn_rows points each (instance, position) slot at a row.
    Reversed copies implement the backward direction with the same masked
    left-to-right scan; padded slots repeat a real row of their own instance
    and are masked out, so they contribute nothing either way.
    """

    instance_ids: list[str]
    token_ids: np.ndarray      # (N, T_tok) int
    token_ids_rev: np.ndarray  # (N, T_tok) int, valid prefix reversed
    token_mask: np.ndarray     # (N, T_tok) float 0/1
    init_vecs: np.ndarray      # (N, K) topic init vector per turn row
    default_rows: np.ndarray   # (N,) bool, rows taking the learnable default
    turn_rows: np.ndarray      # (B, T_conv) int
    turn_rows_rev: np.ndarray  # (B, T_conv) int
    conv_mask: np.ndarray      # (B, T_conv) float 0/1
    disc: np.ndarray           # (B, T_conv, D)
    disc_rev: np.ndarray       # (B, T_conv, D)
    att_idx: np.ndarray        # (B, T_conv) int
    att_idx_rev: np.ndarray    # (B, T_conv) int
    labels: np.ndarray         # (B,)

    @property
    def size(self) -> int:
        return len(self.labels)


def build_batch(items: list[InstanceInputs], pad_id: int = 0) -> SnpBatch:
    """Pad and index a group of instances for `forward_batch`."""
    if not items:
        raise SnpError("cannot build an empty batch")
    for it in items:
        if not it.token_ids:
            raise SnpError(f"instance {it.instance_id} has no turns")
        if any(ids.size == 0 for ids in it.token_ids):
            raise SnpError(f"instance {it.instance_id} has an empty turn")
        if it.disc.shape[0] != len(it.token_ids):
            raise SnpError(f"instance {it.instance_id}: {len(it.token_ids)} turns "
                           f"but {it.disc.shape[0]} discourse vectors")

    b = len(items)
    k = items[0].init_context.shape[0]
    d = items[0].disc.shape[1]
    n = sum(len(it.token_ids) for it in items)
    t_tok = max(ids.size for it in items for ids in it.token_ids)
    t_conv = max(len(it.token_ids) for it in items)

    token_ids = np.full((n, t_tok), pad_id, dtype=np.int64)
    token_ids_rev = np.full((n, t_tok), pad_id, dtype=np.int64)
    token_mask = np.zeros((n, t_tok))
    init_vecs = np.zeros((n, k))
    default_rows = np.zeros(n, dtype=bool)
    turn_rows = np.zeros((b, t_conv), dtype=np.int64)
    turn_rows_rev = np.zeros((b, t_conv), dtype=np.int64)
    conv_mask = np.zeros((b, t_conv))
    disc = np.zeros((b, t_conv, d))
    disc_rev = np.zeros((b, t_conv, d))
    labels = np.zeros(b)

    row = 0
    for i, it in enumerate(items):
        t_i = len(it.token_ids)
        rows_i = np.arange(row, row + t_i)
        turn_rows[i, :t_i] = rows_i
        turn_rows[i, t_i:] = rows_i[-1]
        turn_rows_rev[i, :t_i] = rows_i[::-1]
        turn_rows_rev[i, t_i:] = rows_i[0]
        conv_mask[i, :t_i] = 1.0
        disc[i, :t_i] = it.disc
        disc_rev[i, :t_i] = it.disc[::-1]
        for j, ids in enumerate(it.token_ids):
            token_ids[row, :ids.size] = ids
            token_ids_rev[row, :ids.size] = ids[::-1]
            token_mask[row, :ids.size] = 1.0
            if j == t_i - 1 and it.init_user is None:
                default_rows[row] = True
            else:
                init_vecs[row] = it.init_user if j == t_i - 1 else it.init_context
            row += 1
        labels[i] = it.label

    att_idx = np.argmax(disc, axis=2)
    att_idx_rev = np.argmax(disc_rev, axis=2)
    return SnpBatch(instance_ids=[it.instance_id for it in items],
                    token_ids=token_ids, token_ids_rev=token_ids_rev,
                    token_mask=token_mask, init_vecs=init_vecs,
                    default_rows=default_rows, turn_rows=turn_rows,
                    turn_rows_rev=turn_rows_rev, conv_mask=conv_mask,
                    disc=disc, disc_rev=disc_rev, att_idx=att_idx,
                    att_idx_rev=att_idx_rev, labels=labels)


def forward_batch(p: SnpParams, cfg: SnpConfig, batch: SnpBatch,
                  *, training: bool = False,
                  dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Probabilities for a padded batch; matches instance_forward exactly."""
    dt = p.att.data.dtype
    n, t_tok = batch.token_ids.shape
    b, t_conv = batch.turn_rows.shape

    if cfg.ablate_topic_init:
        init = Tensor(np.zeros((n, cfg.hidden_size)), dtype=dt)
    else:
        table = ad.concat([Tensor(batch.init_vecs, dtype=dt), p.default_user_vec],
                          axis=0)
        row_idx = np.where(batch.default_rows, n, np.arange(n))
        init = p.proj.apply(ad.embedding(table, row_idx))

    def turn_scan(ids, gru):
        h = init
        for t in range(t_tok):
            x = p.embeddings.lookup(ids[:, t])
            m = Tensor(np.repeat(batch.token_mask[:, t:t + 1], cfg.hidden_size,
                                 axis=1), dtype=dt)
            h = masked_gru_step(x, h, gru, m)
        return h

    fwd_last = turn_scan(batch.token_ids, p.turn_fwd)
    bwd_first = turn_scan(batch.token_ids_rev, p.turn_bwd)
    turn_enc = ad.concat([fwd_last, bwd_first], axis=1)        # (N, 2H)
    turn_enc = dropout(turn_enc, cfg.dropout, training, dropout_rng)

    def conv_inputs(rows, disc):
        out = []
        for j in range(t_conv):
            hj = ad.embedding(turn_enc, rows[:, j])
            if cfg.ablate_disc_concat:
                out.append(hj)
            else:
                out.append(ad.concat([hj, Tensor(disc[:, j, :], dtype=dt)], axis=1))
        return out

    def conv_scan(rows, disc, gru):
        states = []
        h = Tensor(np.zeros((b, cfg.hidden_size)), dtype=dt)
        for j, x in enumerate(conv_inputs(rows, disc)):
            m = Tensor(np.repeat(batch.conv_mask[:, j:j + 1], cfg.hidden_size,
                                 axis=1), dtype=dt)
            h = masked_gru_step(x, h, gru, m)
            states.append(h)
        return states

    fwd_states = conv_scan(batch.turn_rows, batch.disc, p.conv_fwd)
    rev_states = conv_scan(batch.turn_rows_rev, batch.disc_rev, p.conv_bwd)

    def att_weights(idx):
        if cfg.ablate_disc_att:
            logits = Tensor(np.zeros((b, t_conv)), dtype=dt)
        else:
            logits = ad.reshape(ad.embedding(p.att, idx.reshape(-1)), (b, t_conv))
        penalty = Tensor((batch.conv_mask - 1.0) * 1e9, dtype=dt)
        masked = ad.add(ad.mul(logits, Tensor(batch.conv_mask, dtype=dt)), penalty)
        return ad.softmax(masked, axis=1)

    w = att_weights(batch.att_idx)
    w_rev = att_weights(batch.att_idx_rev)
    ones_h = Tensor(np.ones((1, cfg.hidden_size)), dtype=dt)

    def weighted_sum(weights, states):
        acc = None
        for j, s in enumerate(states):
            wj = ad.matmul(ad.narrow(weights, 1, j, 1), ones_h)
            term = ad.mul(wj, s)
            acc = term if acc is None else ad.add(acc, term)
        return acc

    pooled = ad.concat([weighted_sum(w, fwd_states),
                        weighted_sum(w_rev, rev_states)], axis=1)   # (B, 2H)
    query = ad.concat([fwd_states[-1], rev_states[0]], axis=1)      # (B, 2H)
    h_c = ad.concat([query, pooled], axis=1)                        # (B, 4H)
    h_c = dropout(h_c, cfg.dropout, training, dropout_rng)
    return predict(p, h_c)
