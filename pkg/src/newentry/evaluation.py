"""Evaluation metrics and analysis helpers.

AUC follows the Mann-Whitney statistic with half credit for ties.  Topic
coherence is NPMI over document co-occurrence (a conversation is one
document).  The bag-of-words logistic baseline provides the comparison floor
for the full model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .autodiff import Tensor
from .corpus import DataBundle, NewEntryInstance, instance_context, query_turn
from .rng import stream


class EvalError(ValueError):
    """Metric asked on degenerate input (single class, zero vector, ...)."""


def auc_score(scores, labels) -> float:
    """Area under the ROC curve; tied scores contribute half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvalError(f"auc: scores {scores.shape} vs labels {labels.shape}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvalError("auc: need both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pair_oracle(scores, labels) -> float:
    """O(n^2) definition used to cross-check auc_score in tests."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise EvalError("auc: need both classes present")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


@dataclass
class MetricsReport:
    auc: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    threshold: float = 0.5
    n: int = 0
    zero_division_flags: list[str] = field(default_factory=list)

    def as_text(self) -> str:
        lines = [f"auc={self.auc:.6f}", f"accuracy={self.accuracy:.6f}",
                 f"precision={self.precision:.6f}", f"recall={self.recall:.6f}",
                 f"f1={self.f1:.6f}", f"threshold={self.threshold:g}", f"n={self.n}"]
        if self.zero_division_flags:
            lines.append("zero_division=" + ",".join(self.zero_division_flags))
        return "\n".join(lines) + "\n"


def classification_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Threshold the scores and report accuracy/precision/recall/F1 plus AUC.

    Zero-denominator cases yield 0 and are flagged rather than raising.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = (scores >= threshold).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("precision")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("recall")
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0:
        f1 = 0.0
        flags.append("f1")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    accuracy = (tp + tn) / max(len(labels), 1)
    try:
        auc = auc_score(scores, labels)
    except EvalError:
        auc = 0.0
        flags.append("auc")
    return MetricsReport(auc=auc, accuracy=accuracy, precision=precision,
                         recall=recall, f1=f1, threshold=threshold,
                         n=len(labels), zero_division_flags=flags)


def positive_class_weight(labels) -> float:
    """N_negative / N_positive over the given labels."""
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0:
        raise EvalError("class weight undefined without positive instances")
    return n_neg / n_pos


# ---------------------------------------------------------------------------
# Topic coherence
# ---------------------------------------------------------------------------


@dataclass
class CoherenceReport:
    """Average pairwise NPMI of topic top words over document co-occurrence."""

    measure: str
    window: str
    eps: float
    per_topic_top5: list[float]
    per_topic_top10: list[float]
    mean_top5: float
    mean_top10: float
    skipped_pairs: int = 0


def npmi_coherence(topics_top_words: list[list[str]],
                   documents: list[list[str]],
                   eps: float = 1e-12) -> CoherenceReport:
    """NPMI coherence with documents as the co-occurrence window.

    This is NPMI, not the sliding-window C_v measure some toolkits report;
    the report says so explicitly.  Pairs involving a word that never occurs
    in the reference corpus are skipped and counted.
    """
    if not documents:
        raise EvalError("npmi: need a non-empty reference corpus")
    doc_sets = [set(d) for d in documents]
    vocab = set()
    for tw in topics_top_words:
        vocab.update(tw[:10])
    contains = {w: np.array([w in ds for ds in doc_sets]) for w in vocab}
    skipped = 0

    def npmi_pair(a: str, b: str) -> float:
        pa = contains[a].mean()
        pb = contains[b].mean()
        pab = (contains[a] & contains[b]).mean()
        pa, pb, pab = pa + eps, pb + eps, pab + eps
        pmi = np.log(pab / (pa * pb))
        return float(pmi / -np.log(pab))

    def topic_npmi(words: list[str]) -> float:
        nonlocal skipped
        present = [w for w in words if contains[w].any()]
        skipped += (len(words) * (len(words) - 1)
                    - len(present) * (len(present) - 1)) // 2
        pairs = [(present[i], present[j])
                 for i in range(len(present)) for j in range(i + 1, len(present))]
        if not pairs:
            return 0.0
        return float(np.mean([npmi_pair(a, b) for a, b in pairs]))

    top5 = [topic_npmi(tw[:5]) for tw in topics_top_words]
    top10 = [topic_npmi(tw[:10]) for tw in topics_top_words]
    return CoherenceReport(measure="npmi", window="document", eps=eps,
                           per_topic_top5=top5, per_topic_top10=top10,
                           mean_top5=float(np.mean(top5)) if top5 else 0.0,
                           mean_top10=float(np.mean(top10)) if top10 else 0.0,
                           skipped_pairs=skipped)


# ---------------------------------------------------------------------------
# Topic similarity and discourse distribution analyses
# ---------------------------------------------------------------------------


def topic_similarity(a, b) -> float:
    """Cosine similarity mapped to [0, 100]; orthogonal vectors score 50."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise EvalError("topic similarity undefined for a zero vector")
    cos = float(a @ b / (na * nb))
    return 50.0 * (cos + 1.0)


def discourse_distribution(top2_behaviors: list[tuple[int, ...]],
                           labels, n_behaviors: int) -> dict[int, np.ndarray]:
    """Frequency of top-2 predicted behaviors per outcome class.

    Each query turn contributes its two highest-probability behaviors (or one
    if only one exists); counts are normalized within each outcome class.
    """
    labels = np.asarray(labels)
    if len(top2_behaviors) != len(labels):
        raise EvalError("discourse distribution: length mismatch")
    out = {}
    for cls in (0, 1):
        counts = np.zeros(n_behaviors, dtype=np.float64)
        for picks, y in zip(top2_behaviors, labels):
            if y != cls:
                continue
            for b in picks:
                counts[b] += 1.0
        total = counts.sum()
        out[cls] = counts / total if total > 0 else counts
    return out


def top2(vector: np.ndarray) -> tuple[int, ...]:
    """Indices of the two largest entries (ties broken by lower index)."""
    v = np.asarray(vector)
    if v.size == 1:
        return (0,)
    order = np.argsort(-v, kind="stable")
    return (int(order[0]), int(order[1]))


def discourse_distribution_from_pi(pis, labels, n_behaviors: int) -> dict[int, np.ndarray]:
    """Top-2 behavior frequencies per outcome class from raw π vectors."""
    return discourse_distribution([top2(p) for p in pis], labels, n_behaviors)


# ---------------------------------------------------------------------------
# Embedding-space diagnostics
# ---------------------------------------------------------------------------


def pca_project(points, dims: int = 2) -> np.ndarray:
    """Project rows onto the top principal components (plain SVD, centered)."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EvalError("pca: need a (n, d) matrix with n >= 2")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:dims].T


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient with Euclidean distances, O(n^2)."""
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise EvalError("silhouette: need at least two clusters")
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    scores = []
    for i in range(len(x)):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own == 1:
            scores.append(0.0)
            continue
        a = d[i][own].sum() / (n_own - 1)
        b = min(d[i][labels == c].mean() for c in classes if c != labels[i])
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores))


def paired_bootstrap_auc_delta(scores_a, scores_b, labels,
                               n_resamples: int = 1000, seed: int = 0) -> dict:
    """Bootstrap distribution of AUC(a) - AUC(b) over shared instances."""
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    labels = np.asarray(labels)
    rng = stream(seed, "sampling")
    deltas = []
    n = len(labels)
    while len(deltas) < n_resamples:
        idx = rng.integers(0, n, size=n)
        y = labels[idx]
        if y.min() == y.max():
            continue
        deltas.append(auc_score(scores_a[idx], y) - auc_score(scores_b[idx], y))
    deltas = np.sort(np.array(deltas))
    point = auc_score(scores_a, labels) - auc_score(scores_b, labels)
    return {"delta": point,
            "ci_low": float(deltas[int(0.025 * n_resamples)]),
            "ci_high": float(deltas[int(0.975 * n_resamples) - 1]),
            "p_delta_le_0": float((deltas <= 0).mean())}


# ---------------------------------------------------------------------------
# Bag-of-words logistic baseline
# ---------------------------------------------------------------------------


@dataclass
class BaselineResult:
    test_scores: np.ndarray
    test_auc: float
    valid_auc: float
    metrics: MetricsReport


def _bow_features(bundle: DataBundle, instances: list[NewEntryInstance]) -> np.ndarray:
    vocab = bundle.vocab
    feats = np.zeros((len(instances), 2 * vocab.size), dtype=np.float64)
    for i, inst in enumerate(instances):
        conv = bundle.conversation(inst.conversation_id)
        q = vocab.bow(query_turn(conv, inst).tokens)
        c = np.zeros(vocab.size, dtype=np.float64)
        for t in instance_context(conv, inst):
            c += vocab.bow(t.tokens)
        feats[i, :vocab.size] = np.log1p(q)
        feats[i, vocab.size:] = np.log1p(c)
    return feats


def bow_logistic_baseline(bundle: DataBundle, epochs: int = 40, lr: float = 1e-2,
                          batch_size: int = 64, seed: int = 0) -> BaselineResult:
    """Class-weighted logistic regression on query + context bag-of-words."""
    x_train = _bow_features(bundle, bundle.train)
    y_train = np.array([i.label for i in bundle.train], dtype=np.float64)
    x_valid = _bow_features(bundle, bundle.valid)
    y_valid = np.array([i.label for i in bundle.valid])
    x_test = _bow_features(bundle, bundle.test)
    y_test = np.array([i.label for i in bundle.test])

    mu = positive_class_weight(y_train)
    rng = stream(seed, "baseline")
    dim = x_train.shape[1]
    with ad.precision(64):
        w = Tensor(np.zeros((1, dim)), requires_grad=True, name="baseline.w")
        b = Tensor(np.zeros(1), requires_grad=True, name="baseline.b")
        params = {"w": w, "b": b}
        opt = ly.Adam(params, lr=lr)
        n = len(y_train)
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                xb = Tensor(x_train[idx], dtype=np.float64)
                yb = y_train[idx]
                with ad.Tape() as tape:
                    logits = ad.linear(xb, w, b)
                    p = ad.clip(ad.sigmoid(logits), 1e-7, 1.0 - 1e-7)
                    yt = Tensor(yb.reshape(-1, 1), dtype=np.float64)
                    one_minus = ad.add_scalar(ad.neg(yt), 1.0)
                    loss = ad.neg(ad.reduce_sum(ad.add(
                        ad.scale(ad.mul(yt, ad.log(p)), mu),
                        ad.mul(one_minus, ad.log(ad.add_scalar(ad.neg(p), 1.0))))))
                    loss = ad.scale(loss, 1.0 / len(idx))
                grads = ly.grads_by_name(params, ad.backward(tape, loss))
                ly.clip_global_norm(grads, 5.0)
                opt.step(grads)

        def score(x):
            return ad.sigmoid(ad.linear(Tensor(x, dtype=np.float64), w, b)).data.reshape(-1)

        valid_auc = auc_score(score(x_valid), y_valid)
        test_scores = score(x_test)
        test_auc = auc_score(test_scores, y_test)
    return BaselineResult(test_scores=test_scores, test_auc=test_auc,
                          valid_auc=valid_auc,
                          metrics=classification_metrics(test_scores, y_test))
