"""Variational topic and discourse module.

A conversation's content-word bag is encoded into a Gaussian topic latent z
whose mixture θ drives a topic-word channel over the content vocabulary.
Each turn's full bag (stopwords and punctuation included) is encoded into a
categorical discourse latent d driving a discourse-word channel over the full
vocabulary.  Their sum reconstructs the turn.  A small penalty keeps the
discourse head uninformative on purely topical content, separating the two
channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .corpus import Turn, Vocab
from .layers import LinearParams, init_linear


class TdmError(ValueError):
    """Invalid configuration or degenerate input to the topic module."""


@dataclass
class TdmConfig:
    n_topics: int = 10
    n_behaviors: int = 10
    hidden_size: int = 100
    mi_weight: float = 0.01
    tau_start: float = 1.0
    tau_end: float = 0.3

    def validate(self) -> None:
        if self.n_topics < 1 or self.n_behaviors < 1 or self.hidden_size < 1:
            raise TdmError("n_topics, n_behaviors and hidden_size must be positive")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise TdmError("temperatures must be positive")
        if self.mi_weight < 0:
            raise TdmError("mi_weight must be nonnegative")


@dataclass
class TdmParams:
    enc: LinearParams          # content BoW -> hidden (ReLU applied outside)
    mu: LinearParams           # hidden -> K
    log_sigma: LinearParams    # hidden -> K
    disc: LinearParams         # full BoW -> D discourse logits
    theta: LinearParams        # z -> topic-mixture logits
    topic_words: Tensor        # (K, topic vocab); rows softmax to word dists
    disc_words: Tensor         # (D, full vocab); rows softmax to word dists
    topic_cols: np.ndarray     # full-vocab column of each topic-vocab word

    @property
    def n_topics(self) -> int:
        return self.mu.weight.shape[0]

    @property
    def n_behaviors(self) -> int:
        return self.disc.weight.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.disc.weight.shape[1]

    @property
    def topic_vocab_size(self) -> int:
        return len(self.topic_cols)

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, lin in (("enc", self.enc), ("mu", self.mu),
                            ("log_sigma", self.log_sigma), ("disc", self.disc),
                            ("theta", self.theta)):
            out[f"tdm.{prefix}.weight"] = lin.weight
            out[f"tdm.{prefix}.bias"] = lin.bias
        out["tdm.topic_words"] = self.topic_words
        out["tdm.disc_words"] = self.disc_words
        return out


def init_tdm(vocab: Vocab, cfg: TdmConfig, rng: np.random.Generator) -> TdmParams:
    cfg.validate()
    k, d, h = cfg.n_topics, cfg.n_behaviors, cfg.hidden_size
    vt, v = vocab.topic_size, vocab.size

    def matrix(rows, cols, name):
        s = math.sqrt(6.0 / (rows + cols))
        return Tensor(rng.uniform(-s, s, size=(rows, cols)),
                      requires_grad=True, name=name)

    return TdmParams(
        enc=init_linear(h, vt, rng, name="tdm.enc"),
        mu=init_linear(k, h, rng, name="tdm.mu"),
        log_sigma=init_linear(k, h, rng, name="tdm.log_sigma"),
        disc=init_linear(d, v, rng, name="tdm.disc"),
        theta=init_linear(k, k, rng, name="tdm.theta"),
        topic_words=matrix(k, vt, "tdm.topic_words"),
        disc_words=matrix(d, v, "tdm.disc_words"),
        topic_cols=np.asarray(vocab.topic_indices, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def conversation_stats(p: TdmParams, conv_bow: Tensor) -> tuple[Tensor, Tensor]:
    """Gaussian posterior parameters (μ, log σ) of a conversation content bag."""
    h = ad.relu(p.enc.apply(conv_bow))
    return p.mu.apply(h), p.log_sigma.apply(h)


def discourse_logits(p: TdmParams, turn_bow: Tensor) -> Tensor:
    return p.disc.apply(turn_bow)


def encode(p: TdmParams, conv_bow: Tensor, turn_bow: Tensor
           ) -> tuple[Tensor, Tensor, Tensor]:
    """(μ, log σ, π) for a batch of conversation bags and turn bags."""
    if conv_bow.shape[0] != turn_bow.shape[0]:
        raise ShapeError(f"encode: batch mismatch {conv_bow.shape} vs {turn_bow.shape}")
    mu, log_sigma = conversation_stats(p, conv_bow)
    pi = ad.softmax(discourse_logits(p, turn_bow))
    return mu, log_sigma, pi


def sample_topic(mu: Tensor, log_sigma: Tensor, eps: np.ndarray) -> Tensor:
    """Reparameterized Gaussian sample z = μ + exp(log σ) ⊙ ε."""
    eps = np.asarray(eps)
    if eps.shape != mu.shape or mu.shape != log_sigma.shape:
        raise ShapeError(f"sample_topic: shapes {mu.shape}, {log_sigma.shape}, "
                         f"{eps.shape} must match")
    noise = Tensor(eps, dtype=mu.data.dtype)
    return ad.add(mu, ad.mul(ad.exp(log_sigma), noise))


def sample_discourse(pi: Tensor, gumbel: np.ndarray, tau: float,
                     hard: bool = False) -> Tensor:
    """Temperature-relaxed categorical sample; hard argmax one-hot if asked.

    The relaxed sample is fully differentiable in π.  The hard path is for
    inference only and carries no gradient.
    """
    if tau <= 0:
        raise TdmError(f"temperature must be positive, got {tau}")
    if hard:
        idx = np.argmax(pi.data, axis=-1)
        one_hot = np.zeros_like(pi.data)
        one_hot[np.arange(pi.shape[0]), idx] = 1.0
        return Tensor(one_hot, dtype=pi.data.dtype)
    gumbel = np.asarray(gumbel)
    if gumbel.shape != pi.shape:
        raise ShapeError(f"sample_discourse: noise {gumbel.shape} vs π {pi.shape}")
    log_pi = ad.log(ad.clip(pi, 1e-12, 1.0))
    g = Tensor(gumbel, dtype=pi.data.dtype)
    return ad.softmax(ad.scale(ad.add(log_pi, g), 1.0 / tau))


def gumbel_noise(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(u + 1e-20) + 1e-20)


def topic_mixture(p: TdmParams, z: Tensor) -> Tensor:
    return ad.softmax(p.theta.apply(z))


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def _word_logits(p: TdmParams, theta: Tensor, d: Tensor) -> tuple[Tensor, Tensor]:
    """(full-vocab logits for β, topic-vocab logits for the content channel)."""
    topic_logits = ad.matmul(theta, p.topic_words)
    scattered = ad.col_scatter(topic_logits, p.topic_cols, p.vocab_size)
    full = ad.add(scattered, ad.matmul(d, p.disc_words))
    return full, topic_logits


def decode(p: TdmParams, theta: Tensor, d: Tensor) -> Tensor:
    """Word distribution β over the full vocabulary."""
    full, _ = _word_logits(p, theta, d)
    return ad.softmax(full)


def phi_topic(p: TdmParams) -> np.ndarray:
    """Topic-word distributions, one row per topic over the topic vocabulary."""
    w = p.topic_words.data.astype(np.float64)
    e = np.exp(w - w.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def phi_discourse(p: TdmParams) -> np.ndarray:
    """Behavior-word distributions, one row per behavior over the full vocab."""
    w = p.disc_words.data.astype(np.float64)
    e = np.exp(w - w.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def top_words(row: np.ndarray, tokens: list[str], n: int) -> list[str]:
    """The n most probable tokens, ties broken by vocabulary index."""
    row = np.asarray(row)
    if n > len(row):
        raise TdmError(f"asked for {n} words from a {len(row)}-token distribution")
    order = np.lexsort((np.arange(len(row)), -row))
    return [tokens[i] for i in order[:n]]


def topic_report(p: TdmParams, vocab: Vocab, n: int = 10) -> str:
    """Plain-text dump of the top words of every topic and behavior row."""
    topic_tokens = [vocab.topic_token(i) for i in range(vocab.topic_size)]
    lines = []
    for k, row in enumerate(phi_topic(p)):
        words = top_words(row, topic_tokens, min(n, len(row)))
        probs = sorted(row, reverse=True)[:len(words)]
        pairs = " ".join(f"{w}:{q:.4f}" for w, q in zip(words, probs))
        lines.append(f"topic {k}: {pairs}")
    for b, row in enumerate(phi_discourse(p)):
        words = top_words(row, vocab.index_to_token, min(n, len(row)))
        probs = sorted(row, reverse=True)[:len(words)]
        pairs = " ".join(f"{w}:{q:.4f}" for w, q in zip(words, probs))
        lines.append(f"behavior {b}: {pairs}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


@dataclass
class TdmLoss:
    """Scalar loss tensor plus float components for logging.

    All components are minimization-form: reconstruction terms are negative
    log likelihoods and regularizers are KL divergences, so the total is their
    sum with the separation penalty weighted by mi_weight.  Minimizing it
    maximizes the evidence bound while driving topic/discourse separation.
    """

    total: Tensor
    l_z: float
    l_d: float
    l_t: float
    l_mi: float
    recon_conversation: float
    kl_topic: float

    @property
    def value(self) -> float:
        return self.total.item()


def _batch_nll(counts: Tensor, logits: Tensor) -> Tensor:
    """Mean over the batch of -Σ_w count_w · log softmax(logits)_w."""
    return ad.neg(ad.reduce_mean(ad.reduce_sum(
        ad.mul(counts, ad.log_softmax(logits, axis=1)), axis=1)))


def _uniform_kl(logits: Tensor, n: int) -> Tensor:
    """Mean KL(softmax(logits) ‖ uniform over n)."""
    q = ad.softmax(logits)
    log_q = ad.log_softmax(logits, axis=1)
    return ad.add_scalar(ad.reduce_mean(ad.reduce_sum(ad.mul(q, log_q), axis=1)),
                         math.log(n))


def gaussian_kl(mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Mean closed-form KL(N(μ, σ²) ‖ N(0, I)) over the batch."""
    mu2 = ad.mul(mu, mu)
    sig2 = ad.exp(ad.scale(log_sigma, 2.0))
    inner = ad.add_scalar(ad.add(ad.add(mu2, sig2), ad.scale(log_sigma, -2.0)), -1.0)
    return ad.reduce_mean(ad.scale(ad.reduce_sum(inner, axis=1), 0.5))


def tdm_loss(p: TdmParams, cfg: TdmConfig, conv_bow: np.ndarray,
             turn_bow: np.ndarray, tau: float, eps: np.ndarray,
             gumbel: np.ndarray) -> TdmLoss:
    """Training loss for a batch of (conversation bag, target-turn bag) pairs.

    eps and gumbel are the pre-drawn noise arrays for the two latent samples,
    shapes (B, K) and (B, D); passing them explicitly keeps a loss evaluation
    a pure function of parameters, which finite-difference checks rely on.
    """
    conv_bow = np.asarray(conv_bow)
    turn_bow = np.asarray(turn_bow)
    if conv_bow.ndim != 2 or conv_bow.shape[0] == 0:
        raise TdmError(f"empty or malformed batch: conversation bags {conv_bow.shape}")
    cb = Tensor(conv_bow)
    tb = Tensor(turn_bow)
    mu, log_sigma = conversation_stats(p, cb)
    d_logits = discourse_logits(p, tb)

    z = sample_topic(mu, log_sigma, eps)
    theta = topic_mixture(p, z)
    full_logits, topic_logits = _word_logits(
        p, theta, sample_discourse(ad.softmax(d_logits), gumbel, tau))

    recon_conversation = _batch_nll(cb, topic_logits)
    kl_topic = gaussian_kl(mu, log_sigma)
    l_z = ad.add(recon_conversation, kl_topic)
    l_d = _uniform_kl(d_logits, p.n_behaviors)
    l_t = _batch_nll(tb, full_logits)

    scattered = ad.col_scatter(topic_logits, p.topic_cols, p.vocab_size)
    l_mi = _uniform_kl(discourse_logits(p, scattered), p.n_behaviors)

    total = ad.add(ad.add(l_z, l_d), ad.add(l_t, ad.scale(l_mi, cfg.mi_weight)))
    return TdmLoss(total=total, l_z=l_z.item(), l_d=l_d.item(), l_t=l_t.item(),
                   l_mi=l_mi.item(), recon_conversation=recon_conversation.item(),
                   kl_topic=kl_topic.item())


def tau_schedule(cfg: TdmConfig, epoch: int, n_epochs: int) -> float:
    """Linear anneal from tau_start at epoch 0 to tau_end at the last epoch."""
    if n_epochs <= 1:
        return cfg.tau_end
    frac = min(max(epoch, 0) / (n_epochs - 1), 1.0)
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac


# ---------------------------------------------------------------------------
# Topic embeddings for the predictor
# ---------------------------------------------------------------------------


def user_topic_embedding(history_mus, default):
    """Mean of the user's history conversation topic means; default if none.

    Works on plain arrays (cached inference) and on graph tensors (end-to-end
    differentiation) alike.
    """
    if len(history_mus) == 0:
        return default
    if isinstance(history_mus[0], Tensor):
        acc = history_mus[0]
        for m in history_mus[1:]:
            acc = ad.add(acc, m)
        return ad.scale(acc, 1.0 / len(history_mus))
    return np.mean(np.stack(history_mus), axis=0)


def conversation_topic_bow(vocab: Vocab, turns: list[Turn]) -> np.ndarray:
    """Summed content-word bag of a list of turns."""
    bow = np.zeros(vocab.topic_size, dtype=np.float64)
    for t in turns:
        bow += vocab.topic_bow(t.topic_tokens)
    return bow


def turn_full_bows(vocab: Vocab, turns: list[Turn]) -> np.ndarray:
    out = np.zeros((len(turns), vocab.size), dtype=np.float64)
    for i, t in enumerate(turns):
        out[i] = vocab.bow(t.tokens)
    return out


def infer_mu(p: TdmParams, conv_bows: np.ndarray) -> np.ndarray:
    """Deterministic topic means for rows of conversation content bags."""
    x = np.atleast_2d(np.asarray(conv_bows, dtype=np.float64))
    h = np.maximum(x @ p.enc.weight.data.T.astype(np.float64)
                   + p.enc.bias.data.astype(np.float64), 0.0)
    return h @ p.mu.weight.data.T.astype(np.float64) + p.mu.bias.data.astype(np.float64)


def infer_pi(p: TdmParams, turn_bows: np.ndarray) -> np.ndarray:
    """Deterministic discourse distributions for rows of turn bags."""
    x = np.atleast_2d(np.asarray(turn_bows, dtype=np.float64))
    logits = (x @ p.disc.weight.data.T.astype(np.float64)
              + p.disc.bias.data.astype(np.float64))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
