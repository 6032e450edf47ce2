"""Filtered link-prediction ranking, substitution-based entity linkage
scores, AUPRC and the second-stage pair classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .context import ContextCache
from .model import ParamSet, encode_entities, forward
from .numerics import AdamState, SparseRows, adam_step, relu, relu_grad, rng_stream, sigmoid
from .store import MultiGraphStore


class UndefinedVerdict(ValueError):
    pass


@dataclass
class RankResult:
    triple: tuple[int, int, int]
    filtered_rank: int
    reciprocal_rank: float
    n_candidates: int


def ranking_candidates(triple, store: MultiGraphStore, side: str = "object") -> np.ndarray:
    """Replacement entities for the filtered protocol.

    Candidates come from the triple's own graph, exclude the kept endpoint
    (no self-loops) and every entity whose replacement is an observed
    triple; the ground truth is always included.
    """
    s, r, o = (int(x) for x in triple)
    graph = store.entity_graph
    truth, kept = (o, s) if side == "object" else (s, o)
    ents = np.flatnonzero(graph == graph[s])
    ents = ents[ents != kept]
    rows = np.empty((ents.size, 3), dtype=np.int64)
    rows[:, 1] = r
    if side == "object":
        rows[:, 0], rows[:, 2] = s, ents
    else:
        rows[:, 0], rows[:, 2] = ents, o
    observed = store.contains_many(rows)
    keep = ~observed | (ents == truth)
    return ents[keep]


def _rank(scores: np.ndarray, truth_pos: int) -> int:
    # ties go against the ground truth
    g = scores[truth_pos]
    others = np.delete(scores, truth_pos)
    return 1 + int(np.sum(others >= g))


def filtered_rank(triple, store: MultiGraphStore, params: ParamSet, cache: ContextCache,
                  side: str = "object") -> RankResult:
    s, r, o = (int(x) for x in triple)
    cands = ranking_candidates(triple, store, side)
    rows = np.empty((cands.size, 3), dtype=np.int64)
    rows[:, 1] = r
    if side == "object":
        rows[:, 0], rows[:, 2] = s, cands
        truth = o
    else:
        rows[:, 0], rows[:, 2] = cands, o
        truth = s
    scores, _ = forward(params, cache, rows)
    rank = _rank(scores, int(np.flatnonzero(cands == truth)[0]))
    return RankResult((s, r, o), rank, 1.0 / rank, int(cands.size))


def link_prediction_metrics(test_triples, store: MultiGraphStore, params: ParamSet, cache: ContextCache,
                            both_sides: bool = False) -> dict[str, dict]:
    """HITS@10 and MRR per graph (keyed by graph name)."""
    t = np.asarray(test_triples, dtype=np.int64).reshape(-1, 3)
    if t.shape[0] == 0:
        raise ValueError("link prediction needs at least one test triple")
    sides = ("object", "subject") if both_sides else ("object",)
    per: dict[int, list[int]] = {}
    for row in t:
        g = int(store.entity_graph[row[0]])
        for side in sides:
            per.setdefault(g, []).append(filtered_rank(row, store, params, cache, side).filtered_rank)
    out = {}
    for g in sorted(per):
        ranks = np.asarray(per[g], dtype=np.float64)
        out[store.vocab.graphs.name(g)] = {"hits10": float(np.mean(ranks <= 10)),
                                           "mrr": float(np.mean(1.0 / ranks)), "n": int(ranks.size)}
    return out


def hits_and_mrr(ranks) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no ranks")
    return {"hits10": float(np.mean(ranks <= 10)), "mrr": float(np.mean(1.0 / ranks))}


# ---------------------------------------------------------------------------
# entity linkage by substitution
# ---------------------------------------------------------------------------

@dataclass
class LinkageVerdict:
    pair: tuple[int, int]
    q: float
    k: int


def substitution_triples(e_x: int, e_y: int, store: MultiGraphStore) -> tuple[np.ndarray, np.ndarray]:
    """Triples mentioning either entity, in a canonical order, and the same
    triples with each entity swapped for the other."""
    idx = np.union1d(store.triples_of(e_x), store.triples_of(e_y))
    orig = store.triples[idx]
    repl = orig.copy()
    for col in (0, 2):
        a = orig[:, col] == e_x
        b = orig[:, col] == e_y
        repl[a, col] = e_y
        repl[b, col] = e_x
    return orig, repl


def linkage_score(e_x: int, e_y: int, store: MultiGraphStore, params: ParamSet, cache: ContextCache
                  ) -> LinkageVerdict:
    """Mean absolute score change when the two entities trade places in all
    their triples.  Lower means more likely the same real-world entity."""
    if store.entity_graph[e_x] == store.entity_graph[e_y]:
        raise ValueError(f"entities {e_x} and {e_y} belong to the same graph")
    orig, repl = substitution_triples(e_x, e_y, store)
    k = orig.shape[0]
    if k == 0:
        raise UndefinedVerdict(f"neither entity {e_x} nor {e_y} appears in any triple")
    scores, _ = forward(params, cache, np.concatenate([orig, repl]))
    q = math.fsum(np.abs(scores[:k] - scores[k:]).tolist()) / k
    return LinkageVerdict((int(e_x), int(e_y)), q, k)


# ---------------------------------------------------------------------------
# AUPRC
# ---------------------------------------------------------------------------

def auprc(scores, labels) -> float:
    """Area under the precision-recall curve, step-wise: the mean of the
    precision reached at each distinct score threshold, weighted by the
    positives that threshold admits.  Higher scores mean more positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.sum() == 0:
        raise ValueError("AUPRC is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # close each run of tied scores
    last = np.r_[s[1:] != s[:-1], True]
    tp_at, n_at = tp[last], (np.arange(1, s.size + 1))[last]
    new_tp = np.diff(np.r_[0, tp_at])
    precision = tp_at / n_at
    return float(np.sum(precision * new_tp) / tp_at[-1])


# ---------------------------------------------------------------------------
# second-stage classifier
# ---------------------------------------------------------------------------

def entity_representations(params: ParamSet, cache: ContextCache, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    z, _ = encode_entities(params, cache, ids, np.full(ids.size, -1))
    return z


def pair_features(z_a: np.ndarray, z_b: np.ndarray) -> np.ndarray:
    return np.concatenate([np.abs(z_a - z_b), z_a * z_b], axis=-1)


class PairClassifier:
    """One-hidden-layer network with a sigmoid output, trained by Adam on
    binary cross-entropy."""

    def __init__(self, hidden: int = 64, epochs: int = 300, lr: float = 0.01, batch_size: int = 128,
                 seed: int = 0):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}

    def _forward(self, X):
        P = self.params
        pre = X @ P["W1"].T + P["b1"]
        h = relu(pre)
        logit = h @ P["w2"] + P["b2"][0]
        return pre, h, logit

    def fit(self, X, y) -> "PairClassifier":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if np.unique(y).size < 2:
            raise ValueError("classifier training needs both positive and negative pairs")
        rng = rng_stream(self.seed, "classifier")
        f = X.shape[1]
        self.params = {"W1": rng.uniform(-1, 1, (self.hidden, f)) / np.sqrt(f),
                       "b1": np.zeros(self.hidden),
                       "w2": rng.uniform(-1, 1, self.hidden) / np.sqrt(self.hidden),
                       "b2": np.zeros(1)}
        adam = AdamState.for_params(self.params, lr=self.lr)
        for _ in range(self.epochs):
            order = rng.permutation(X.shape[0])
            for start in range(0, X.shape[0], self.batch_size):
                idx = order[start:start + self.batch_size]
                xb, yb = X[idx], y[idx]
                pre, h, logit = self._forward(xb)
                dlogit = (sigmoid(logit) - yb) / idx.size
                dh = np.outer(dlogit, self.params["w2"]) * relu_grad(pre)
                grads = {"W1": dh.T @ xb, "b1": dh.sum(0), "w2": h.T @ dlogit, "b2": np.array([dlogit.sum()])}
                adam_step(adam, self.params, {k: SparseRows.dense(g) for k, g in grads.items()})
        return self

    def loss(self, X, y) -> float:
        p = np.clip(self.predict_proba(X), 1e-12, 1 - 1e-12)
        y = np.asarray(y, dtype=np.float64)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))

    def predict_proba(self, X) -> np.ndarray:
        return np.atleast_1d(sigmoid(self._forward(np.asarray(X, dtype=np.float64))[2]))


def second_stage_classifier_train(pairs, labels, params: ParamSet, cache: ContextCache, hidden: int = 64,
                                  seed: int = 0, **kw) -> PairClassifier:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    z = entity_representations(params, cache, pairs.ravel()).reshape(pairs.shape[0], 2, -1)
    return PairClassifier(hidden=hidden, seed=seed, **kw).fit(pair_features(z[:, 0], z[:, 1]), labels)


def second_stage_classifier_score(clf: PairClassifier, pairs, params: ParamSet, cache: ContextCache
                                  ) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    z = entity_representations(params, cache, pairs.ravel()).reshape(pairs.shape[0], 2, -1)
    return clf.predict_proba(pair_features(z[:, 0], z[:, 1]))
