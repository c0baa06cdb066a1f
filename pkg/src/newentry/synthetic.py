"""Synthetic conversation generator with planted structure.

Conversations are built from disjoint topic word blocks plus a shared block
of discourse words (function words and punctuation, so they behave like the
real thing under stopword removal).  Every first-time author at position 3 or
later is a planted newcomer entry whose success probability follows a simple
rule: asking in a question-like way helps, and bringing a topic that differs
from the conversation's topic helps a lot.  The generator emits the hidden
annotations (true probabilities, behaviors, novelty) alongside the corpus so
that tests can compare models against the Bayes-optimal scorer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .corpus import RawConversation, RawTurn
from .rng import stream

_TOPIC_THEMES = [
    ("food", """pizza ham pineapple cheese oven recipe garlic butter salmon
        pasta sauce vinegar roast dough flour salad pepper onion grill spice
        bacon tomato basil lemon honey yeast steak noodle broth curry""".split()),
    ("space", """rocket orbit lunar telescope galaxy asteroid launch booster
        satellite nebula gravity probe crater martian capsule thruster comet
        cosmic stellar eclipse payload astronaut module horizon quasar plasma
        fusion vacuum reentry spectrum""".split()),
    ("music", """guitar chord drummer melody bass amplifier vinyl chorus
        tempo riff piano synth lyric album concert harmony octave pedal
        acoustic studio verse falsetto cadence soprano ballad remix orchestra
        percussion banjo encore""".split()),
]

_DISCOURSE_SUBBLOCKS = [
    ("question", ["?", "what", "how", "why", "where", "when", "who", "which"]),
    ("opinion", ["i", "think", "my", "me", "honestly", "really", "believe", "feel"]),
    ("agreement", ["!", "yes", "yeah", "agree", "right", "too", "same", "exactly"]),
    ("explanation", ["because", "since", "so", "that", "this", "it", "of", "for"]),
]


class SyntheticError(ValueError):
    """Invalid generator configuration."""


@dataclass
class SyntheticConfig:
    """Knobs for the planted corpus; defaults target a learnable benchmark."""

    n_conversations: int = 2000
    n_users: int = 4000
    n_topics: int = 3
    n_behaviors: int = 4
    topic_block_size: int = 30
    seed: int = 13
    p_match: float = 0.75
    base_logit: float = -3.8
    question_boost: float = 2.6
    novelty_boost: float = 5.2
    novelty_slope: float = 1.5
    novelty_threshold: float = 0.5
    p_topic_context: float = 0.72
    p_topic_query: float = 0.5
    min_turns: int = 4
    max_turns: int = 8
    min_tokens: int = 6
    max_tokens: int = 14
    extra_entry_prob: float = 0.45
    question_index: int = 0
    behavior_rates: tuple = (0.3, 0.3, 0.2, 0.2)
    topic_concentration: float = 9.0
    topic_noise: float = 0.6
    # Optional context effect: conversations whose preceding turns carry
    # more of one designated behavior are more welcoming to newcomers.
    # At the default weight of 0.0 the term is inert and output is
    # byte-identical to a config without it.
    welcome_boost: float = 0.0
    welcome_index: int = 3

    def validate(self) -> None:
        if self.n_conversations < 1 or self.n_users < 10:
            raise SyntheticError("need at least 1 conversation and 10 users")
        if self.n_topics < 2:
            raise SyntheticError("need at least 2 planted topics")
        if self.n_behaviors < 2:
            raise SyntheticError("need at least 2 planted behaviors")
        if len(self.behavior_rates) != self.n_behaviors:
            raise SyntheticError(
                f"behavior_rates has {len(self.behavior_rates)} entries "
                f"for {self.n_behaviors} behaviors")
        if abs(sum(self.behavior_rates) - 1.0) > 1e-9:
            raise SyntheticError("behavior_rates must sum to 1")
        if not 0 <= self.question_index < self.n_behaviors:
            raise SyntheticError("question_index out of range")
        if self.min_turns < 4:
            raise SyntheticError("min_turns must be at least 4")
        if self.max_turns < self.min_turns:
            raise SyntheticError("max_turns below min_turns")
        for name in ("p_match", "p_topic_context", "p_topic_query",
                     "extra_entry_prob", "novelty_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SyntheticError(f"{name} must be in [0, 1], got {v}")
        if not 0 <= self.welcome_index < self.n_behaviors:
            raise SyntheticError("welcome_index out of range")
        if not math.isfinite(self.welcome_boost):
            raise SyntheticError("welcome_boost must be finite")


@dataclass
class SyntheticGround:
    """The planted truth: word blocks and their sampling distributions."""

    topic_blocks: list[list[str]]
    behavior_names: list[str]
    discourse_subblocks: list[list[str]]
    discourse_block: list[str]
    topic_probs: np.ndarray      # (n_topics, block_size)
    behavior_probs: np.ndarray   # (n_behaviors, len(discourse_block))

    def sample_topic_words(self, topic: int, n: int, rng: np.random.Generator) -> list[str]:
        words = self.topic_blocks[topic]
        return [words[i] for i in rng.choice(len(words), size=n, p=self.topic_probs[topic])]

    def sample_behavior_words(self, behavior: int, n: int, rng: np.random.Generator) -> list[str]:
        return [self.discourse_block[i]
                for i in rng.choice(len(self.discourse_block), size=n,
                                    p=self.behavior_probs[behavior])]


def _zipf(n: int) -> np.ndarray:
    p = 1.0 / (np.arange(n) + 2.0)
    return p / p.sum()


def _build_ground(cfg: SyntheticConfig) -> SyntheticGround:
    topic_blocks = []
    for k in range(cfg.n_topics):
        if k < len(_TOPIC_THEMES):
            _, words = _TOPIC_THEMES[k]
        else:
            words = []
        words = list(words[:cfg.topic_block_size])
        while len(words) < cfg.topic_block_size:
            words.append(f"t{k}w{len(words):02d}")
        topic_blocks.append(words)

    names, subblocks = [], []
    for b in range(cfg.n_behaviors):
        if b < len(_DISCOURSE_SUBBLOCKS):
            name, words = _DISCOURSE_SUBBLOCKS[b]
        else:
            name, words = f"behavior{b}", [f"d{b}w{j}" for j in range(8)]
        names.append(name)
        subblocks.append(list(words))
    discourse_block = [w for sub in subblocks for w in sub]

    topic_probs = np.stack([_zipf(cfg.topic_block_size) for _ in range(cfg.n_topics)])
    behavior_probs = np.zeros((cfg.n_behaviors, len(discourse_block)))
    offset = 0
    for b, sub in enumerate(subblocks):
        behavior_probs[b, offset:offset + len(sub)] = 0.82 * _zipf(len(sub))
        offset += len(sub)
    behavior_probs += 0.18 / len(discourse_block)
    behavior_probs /= behavior_probs.sum(axis=1, keepdims=True)
    return SyntheticGround(topic_blocks, names, subblocks, discourse_block,
                           topic_probs, behavior_probs)


def _concentrated_mixture(k: int, n_topics: int, cfg: SyntheticConfig,
                          rng: np.random.Generator) -> np.ndarray:
    alpha = np.full(n_topics, cfg.topic_noise)
    alpha[k] += cfg.topic_concentration
    return rng.dirichlet(alpha)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def generate_synthetic(cfg: SyntheticConfig
                       ) -> tuple[list[RawConversation], list[dict], SyntheticGround]:
    """Deterministically generate conversations, hidden annotations, ground truth."""
    cfg.validate()
    ground = _build_ground(cfg)
    rng = stream(cfg.seed, "synthetic")
    rates = np.asarray(cfg.behavior_rates, dtype=np.float64)

    user_topic = rng.integers(0, cfg.n_topics, size=cfg.n_users)
    user_mix = np.stack([_concentrated_mixture(int(k), cfg.n_topics, cfg, rng)
                         for k in user_topic])
    users_by_topic = [np.flatnonzero(user_topic == k) for k in range(cfg.n_topics)]

    def draw_user(conv_topic: int, taken: set[int]) -> int:
        match = rng.random() < cfg.p_match
        for _ in range(200):
            if match:
                pool = users_by_topic[conv_topic]
                u = int(pool[rng.integers(len(pool))])
            else:
                u = int(rng.integers(cfg.n_users))
                if user_topic[u] == conv_topic:
                    continue
            if u not in taken:
                return u
        raise SyntheticError("could not draw a fresh participant; too few users")

    def turn_tokens(theta: np.ndarray, behavior: int, p_topic: float) -> str:
        n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        topical = rng.random(n) < p_topic
        n_topical = int(topical.sum())
        words = []
        if n_topical:
            topics = rng.choice(cfg.n_topics, size=n_topical, p=theta)
            for k in topics:
                words.append(ground.sample_topic_words(int(k), 1, rng)[0])
        words.extend(ground.sample_behavior_words(behavior, n - n_topical, rng))
        perm = rng.permutation(n)
        return " ".join(words[i] for i in perm)

    conversations: list[RawConversation] = []
    annotations: list[dict] = []
    for ci in range(cfg.n_conversations):
        conv_id = f"c{ci:05d}"
        k_c = int(rng.integers(cfg.n_topics))
        theta_c = _concentrated_mixture(k_c, cfg.n_topics, cfg, rng)
        taken: set[int] = set()
        u1 = draw_user(k_c, taken); taken.add(u1)
        u2 = draw_user(k_c, taken); taken.add(u2)
        turns: list[RawTurn] = []
        replyable: list[str] = []

        def add_turn(author: int, text: str, reply_to: str | None) -> str:
            tid = f"{conv_id}t{len(turns):03d}"
            turns.append(RawTurn(tid, f"u{author:05d}", text, reply_to))
            return tid

        context_behaviors: list[int] = []
        b1 = int(rng.choice(cfg.n_behaviors, p=rates))
        replyable.append(add_turn(u1, turn_tokens(theta_c, b1, cfg.p_topic_context), None))
        context_behaviors.append(b1)
        b2 = int(rng.choice(cfg.n_behaviors, p=rates))
        replyable.append(add_turn(u2, turn_tokens(theta_c, b2, cfg.p_topic_context),
                                  replyable[0]))
        context_behaviors.append(b2)

        n_base = int(rng.integers(cfg.min_turns, cfg.max_turns + 1))
        n_entries = 1 + int(rng.random() < cfg.extra_entry_prob)
        slots = list(range(3, n_base + 1))
        entry_at = set(int(s) for s in
                       rng.choice(slots, size=min(n_entries, len(slots)), replace=False))
        participants = [u1, u2]
        for pos in range(3, n_base + 1):
            if pos in entry_at:
                u = draw_user(k_c, taken); taken.add(u)
                behavior = int(rng.choice(cfg.n_behaviors, p=rates))
                novelty = 1.0 - _cosine(user_mix[u], theta_c)
                is_q = behavior == cfg.question_index
                is_novel = novelty > cfg.novelty_threshold
                welcome_frac = (context_behaviors.count(cfg.welcome_index)
                                / len(context_behaviors))
                logit = (cfg.base_logit
                         + cfg.question_boost * is_q
                         + cfg.novelty_boost * is_novel
                         + cfg.novelty_slope * (novelty - cfg.novelty_threshold)
                         + cfg.welcome_boost
                         * (welcome_frac - cfg.behavior_rates[cfg.welcome_index]))
                p = 1.0 / (1.0 + math.exp(-logit))
                label = int(rng.random() < p)
                text = turn_tokens(user_mix[u], behavior, cfg.p_topic_query)
                qid = add_turn(u, text, replyable[int(rng.integers(len(replyable)))])
                annotations.append({
                    "conversation_id": conv_id,
                    "query_turn_id": qid,
                    "newcomer_id": f"u{u:05d}",
                    "label": label,
                    "true_p": round(p, 6),
                    "novelty": round(novelty, 6),
                    "is_novel": bool(is_novel),
                    "behavior": ground.behavior_names[behavior],
                    "is_question": bool(is_q),
                    "conversation_topic": k_c,
                    "newcomer_topic": int(user_topic[u]),
                    "welcome_frac": round(welcome_frac, 6),
                })
                context_behaviors.append(behavior)
                if label:
                    replier = participants[int(rng.integers(len(participants)))]
                    rb = int(rng.choice(cfg.n_behaviors, p=rates))
                    add_turn(replier, turn_tokens(theta_c, rb, cfg.p_topic_context), qid)
                    replyable.append(qid)
                    context_behaviors.append(rb)
                participants.append(u)
            else:
                author = participants[int(rng.integers(len(participants)))]
                behavior = int(rng.choice(cfg.n_behaviors, p=rates))
                tid = add_turn(author, turn_tokens(theta_c, behavior, cfg.p_topic_context),
                               replyable[int(rng.integers(len(replyable)))])
                replyable.append(tid)
                context_behaviors.append(behavior)
        conversations.append(RawConversation(conv_id, tuple(turns)))
    return conversations, annotations, ground


def config_to_dict(cfg: SyntheticConfig) -> dict:
    d = asdict(cfg)
    d["behavior_rates"] = list(cfg.behavior_rates)
    return d
