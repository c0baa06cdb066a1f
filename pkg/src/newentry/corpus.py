"""Conversation corpus handling.

Raw conversations arrive as JSONL records (one conversation per line with its
turns, authors and reply-to edges).  This module tokenizes them into two
bag-of-words views, filters short or two-person conversations, extracts
newcomer-entry prediction instances, performs the deterministic train/valid/
test split, and builds the vocabulary and per-user history index from the
training portion only.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .rng import stream
from .stopwords import STOPWORDS

URL_TOKEN = "URL"
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
MAX_TURN_TOKENS = 50
MAX_CONTEXT_TURNS = 20
MIN_TURNS = 4
MIN_PARTICIPANTS = 3
MIN_CONTEXT_TURNS = 2


class CorpusError(ValueError):
    """Malformed corpus input or an unusable corpus (e.g. too few instances)."""


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RawTurn:
    turn_id: str
    author_id: str
    text: str
    reply_to: str | None = None


@dataclass(frozen=True)
class RawConversation:
    conversation_id: str
    turns: tuple[RawTurn, ...]


@dataclass
class Turn:
    """A preprocessed turn with its two token views."""

    turn_id: str
    author_id: str
    tokens: list[str]        # full view: words, emoticons, punctuation, URL tag
    topic_tokens: list[str]  # stopword- and punctuation-free view
    reply_to: str | None
    raw_index: int           # 1-based position in the source conversation


@dataclass
class Conversation:
    conversation_id: str
    turns: list[Turn]              # turns that survived preprocessing
    raw_turns: tuple[RawTurn, ...]  # original sequence, used for reply edges

    @property
    def participants(self) -> set[str]:
        return {t.author_id for t in self.turns}


@dataclass(frozen=True)
class NewEntryInstance:
    """One prediction case: does the newcomer's first message get a reply?"""

    conversation_id: str
    query_turn_id: str
    newcomer_id: str
    label: int
    query_raw_index: int

    @property
    def instance_id(self) -> str:
        return f"{self.conversation_id}/{self.query_turn_id}"


@dataclass
class Splits:
    train: list[NewEntryInstance]
    valid: list[NewEntryInstance]
    test: list[NewEntryInstance]


# ---------------------------------------------------------------------------
# Tokenization and preprocessing
# ---------------------------------------------------------------------------

_URL_RE = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_URL_SENTINEL = "\x00URL\x00"
_EMOTICON_RE = r"[<>]?[:;=8x][-'o^]?[)(\[\]dp/\\|3*]+|<3+|xd+"
_TOKEN_RE = re.compile(
    rf"(?:{_EMOTICON_RE})"
    r"|[a-z](?:[a-z0-9_'-]*[a-z0-9'])?"
    r"|\d+(?:\.\d+)?"
    r"|[?!.,;:]+"
)
_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?\Z")


def _has_letter(token: str) -> bool:
    return any(c.isalpha() for c in token)


def tokenize(text: str) -> list[str]:
    """Lowercased full-view tokens.

    URLs become the URL tag.  Tokens with no letters are dropped unless they
    are punctuation runs or emoticons, which stay as their own tokens.
    """
    text = _URL_RE.sub(f" {_URL_SENTINEL} ", text)
    out: list[str] = []
    for piece in text.split():
        if piece == _URL_SENTINEL:
            out.append(URL_TOKEN)
            continue
        for tok in _TOKEN_RE.findall(piece.lower()):
            if not _NUMBER_RE.fullmatch(tok):
                out.append(tok)
    return out


def topic_view(tokens: list[str]) -> list[str]:
    """Content words only: no stopwords, punctuation, emoticons or URL tags."""
    return [t for t in tokens
            if t != URL_TOKEN and _has_letter(t) and t not in STOPWORDS]


def preprocess_conversation(raw: RawConversation) -> Conversation:
    """Tokenize every turn; turns left empty after cleaning are dropped."""
    turns = []
    for i, rt in enumerate(raw.turns, start=1):
        tokens = tokenize(rt.text)[:MAX_TURN_TOKENS]
        if not tokens:
            continue
        turns.append(Turn(turn_id=rt.turn_id, author_id=rt.author_id,
                          tokens=tokens, topic_tokens=topic_view(tokens),
                          reply_to=rt.reply_to, raw_index=i))
    return Conversation(raw.conversation_id, turns, raw.turns)


def filter_conversations(conversations: list[Conversation]) -> list[Conversation]:
    """Keep conversations with at least 4 turns and 3 distinct participants."""
    return [c for c in conversations
            if len(c.turns) >= MIN_TURNS and len(c.participants) >= MIN_PARTICIPANTS]


# ---------------------------------------------------------------------------
# Instance extraction
# ---------------------------------------------------------------------------


def extract_instances(conv: Conversation) -> list[NewEntryInstance]:
    """All newcomer entries of a conversation.

    A newcomer entry is a turn whose author appears for the first time in the
    conversation, at position >= 3 so that at least two earlier turns exist.
    The label is 1 iff some later turn by a different author replies to it.
    Entries whose query turn was emptied by preprocessing, or with fewer than
    two surviving context turns, are skipped.
    """
    surviving = {t.turn_id: t for t in conv.turns}
    instances = []
    seen: set[str] = set()
    for i, rt in enumerate(conv.raw_turns, start=1):
        first_time = rt.author_id not in seen
        seen.add(rt.author_id)
        if not first_time or i < 3:
            continue
        if rt.turn_id not in surviving:
            continue
        n_context = sum(1 for t in conv.turns if t.raw_index < i)
        if n_context < MIN_CONTEXT_TURNS:
            continue
        label = int(any(later.reply_to == rt.turn_id and later.author_id != rt.author_id
                        for later in conv.raw_turns[i:]))
        instances.append(NewEntryInstance(conv.conversation_id, rt.turn_id,
                                          rt.author_id, label, i))
    return instances


def instance_context(conv: Conversation, inst: NewEntryInstance,
                     max_turns: int = MAX_CONTEXT_TURNS) -> list[Turn]:
    """Strictly-earlier surviving turns, truncated to the most recent ones."""
    context = [t for t in conv.turns if t.raw_index < inst.query_raw_index]
    return context[-max_turns:]


def query_turn(conv: Conversation, inst: NewEntryInstance) -> Turn:
    for t in conv.turns:
        if t.turn_id == inst.query_turn_id:
            return t
    raise CorpusError(f"query turn {inst.query_turn_id} missing from "
                      f"conversation {conv.conversation_id}")


# ---------------------------------------------------------------------------
# Split
# ---------------------------------------------------------------------------


def split_instances(instances: list[NewEntryInstance],
                    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                    seed: int = 0) -> Splits:
    """Deterministic train/valid/test partition, grouped by conversation.

    All instances of a conversation land in the same split so that no
    validation or test conversation can leak into the vocabulary or the user
    history index.  Group order is shuffled by the seed; instance-count
    targets are the floor of the ratios.
    """
    if len(instances) < 10:
        raise CorpusError(f"need at least 10 instances to split, got {len(instances)}")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r <= 0 for r in ratios):
        raise CorpusError(f"ratios must be positive and sum to 1, got {ratios}")
    groups: dict[str, list[NewEntryInstance]] = {}
    for inst in instances:
        groups.setdefault(inst.conversation_id, []).append(inst)
    keys = sorted(groups)
    order = stream(seed, "split").permutation(len(keys))
    n = len(instances)
    target_train = int(ratios[0] * n)
    target_valid = int(ratios[1] * n)
    train: list[NewEntryInstance] = []
    valid: list[NewEntryInstance] = []
    test: list[NewEntryInstance] = []
    for gi in order:
        group = groups[keys[gi]]
        if len(train) < target_train:
            train.extend(group)
        elif len(valid) < target_valid:
            valid.extend(group)
        else:
            test.extend(group)
    return Splits(train, valid, test)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------


class Vocab:
    """Token-index map built from training conversations only.

    Index 0 is padding, index 1 the unknown token.  ``topic_indices`` lists
    the full-vocabulary indices eligible for the topic view; positions within
    that list are the columns of the topic bag-of-words.
    """

    def __init__(self, counts: Counter):
        self.freq = dict(counts)
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        self.index_to_token = [PAD_TOKEN, UNK_TOKEN] + ordered
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        topic_idx = [self.token_to_index[t] for t in ordered
                     if t != URL_TOKEN and _has_letter(t) and t not in STOPWORDS]
        self.topic_indices = np.array(sorted(topic_idx), dtype=np.int64)
        self._topic_pos = {int(v): i for i, v in enumerate(self.topic_indices)}

    @property
    def size(self) -> int:
        return len(self.index_to_token)

    @property
    def topic_size(self) -> int:
        return len(self.topic_indices)

    @property
    def pad_index(self) -> int:
        return 0

    def encode(self, tokens: list[str]) -> np.ndarray:
        unk = self.token_to_index[UNK_TOKEN]
        return np.array([self.token_to_index.get(t, unk) for t in tokens],
                        dtype=np.int64)

    def bow(self, tokens: list[str]) -> np.ndarray:
        """Dense full-vocabulary counts (padding excluded by construction)."""
        v = np.zeros(self.size, dtype=np.float64)
        ids = self.encode(tokens)
        np.add.at(v, ids, 1.0)
        return v

    def topic_bow(self, topic_tokens: list[str]) -> np.ndarray:
        """Dense counts over the topic sub-vocabulary; unknown tokens dropped."""
        v = np.zeros(self.topic_size, dtype=np.float64)
        for t in topic_tokens:
            idx = self.token_to_index.get(t)
            pos = self._topic_pos.get(idx) if idx is not None else None
            if pos is not None:
                v[pos] += 1.0
        return v

    def topic_token(self, col: int) -> str:
        return self.index_to_token[int(self.topic_indices[col])]

    @staticmethod
    def build(train_conversations: list[Conversation]) -> "Vocab":
        counts: Counter = Counter()
        for conv in train_conversations:
            for turn in conv.turns:
                counts.update(turn.tokens)
        return Vocab(counts)


@dataclass
class UserHistoryIndex:
    """user -> sorted ids of training conversations where the user spoke."""

    history: dict[str, list[str]] = field(default_factory=dict)

    def conversations_for(self, user: str, exclude: str | None = None) -> list[str]:
        return [c for c in self.history.get(user, []) if c != exclude]

    @staticmethod
    def build(train_conversations: list[Conversation]) -> "UserHistoryIndex":
        hist: dict[str, set[str]] = {}
        for conv in train_conversations:
            for author in conv.participants:
                hist.setdefault(author, set()).add(conv.conversation_id)
        return UserHistoryIndex({u: sorted(v) for u, v in sorted(hist.items())})


# ---------------------------------------------------------------------------
# Bundle: everything the trainer needs
# ---------------------------------------------------------------------------


@dataclass
class DataBundle:
    conversations: dict[str, Conversation]
    train: list[NewEntryInstance]
    valid: list[NewEntryInstance]
    test: list[NewEntryInstance]
    vocab: Vocab
    history: UserHistoryIndex
    train_conversation_ids: list[str]

    def conversation(self, conv_id: str) -> Conversation:
        return self.conversations[conv_id]


def build_bundle(raws: list[RawConversation],
                 ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                 seed: int = 0) -> DataBundle:
    """Full pipeline: preprocess, filter, extract, split, index.

    Conversations that pass the filter but yield no instance are assigned to
    the training side, where they can only contribute vocabulary and history.
    """
    conversations = filter_conversations([preprocess_conversation(r) for r in raws])
    by_id = {c.conversation_id: c for c in conversations}
    if len(by_id) != len(conversations):
        raise CorpusError("duplicate conversation ids in corpus")
    instances: list[NewEntryInstance] = []
    for conv in conversations:
        instances.extend(extract_instances(conv))
    splits = split_instances(instances, ratios, seed)
    with_instances = {i.conversation_id for i in instances}
    train_conv_ids = sorted({i.conversation_id for i in splits.train}
                            | {c for c in by_id if c not in with_instances})
    train_convs = [by_id[c] for c in train_conv_ids]
    vocab = Vocab.build(train_convs)
    history = UserHistoryIndex.build(train_convs)
    return DataBundle(by_id, splits.train, splits.valid, splits.test,
                      vocab, history, train_conv_ids)


def corpus_stats(bundle: DataBundle) -> dict[str, float]:
    """Summary statistics in the style of a dataset table."""
    convs = bundle.conversations.values()
    n_turns = sum(len(c.turns) for c in convs)
    instances = bundle.train + bundle.valid + bundle.test
    n_pos = sum(i.label for i in instances)
    with_history = sum(
        1 for i in instances
        if bundle.history.conversations_for(i.newcomer_id, exclude=i.conversation_id))
    return {
        "conversations": len(bundle.conversations),
        "turns": n_turns,
        "avg_turns_per_conversation": round(n_turns / max(len(bundle.conversations), 1), 3),
        "instances": len(instances),
        "successful": n_pos,
        "failed": len(instances) - n_pos,
        "train_instances": len(bundle.train),
        "valid_instances": len(bundle.valid),
        "test_instances": len(bundle.test),
        "vocabulary": bundle.vocab.size,
        "topic_vocabulary": bundle.vocab.topic_size,
        "ratio_with_history": round(with_history / max(len(instances), 1), 4),
    }


# ---------------------------------------------------------------------------
# JSONL input/output
# ---------------------------------------------------------------------------


def read_conversations(path: str) -> list[RawConversation]:
    raws = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                turns = tuple(RawTurn(t["turn_id"], t["author_id"], t["text"],
                                      t.get("reply_to"))
                              for t in rec["turns"])
                raws.append(RawConversation(rec["conversation_id"], turns))
            except (KeyError, TypeError, json.JSONDecodeError) as e:
                raise CorpusError(f"{path}:{lineno}: bad conversation record: {e}") from e
    return raws


def write_conversations(path: str, raws: list[RawConversation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for raw in raws:
            rec = {"conversation_id": raw.conversation_id,
                   "turns": [{"turn_id": t.turn_id, "author_id": t.author_id,
                              "text": t.text, "reply_to": t.reply_to}
                             for t in raw.turns]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_instances(path: str, instances: list[NewEntryInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps({
                "conversation_id": inst.conversation_id,
                "query_turn_id": inst.query_turn_id,
                "newcomer_id": inst.newcomer_id,
                "label": inst.label,
                "query_raw_index": inst.query_raw_index,
            }, sort_keys=True) + "\n")


def read_instances(path: str) -> list[NewEntryInstance]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(NewEntryInstance(rec["conversation_id"], rec["query_turn_id"],
                                            rec["newcomer_id"], int(rec["label"]),
                                            int(rec["query_raw_index"])))
            except (KeyError, TypeError, ValueError) as e:
                raise CorpusError(f"{path}:{lineno}: bad instance record: {e}") from e
    return out
