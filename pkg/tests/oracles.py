"""Independent reference implementations used by the tests."""

import numpy as np

from linknbed.model import represent, score


def item_score(t, params, cache) -> float:
    zs, zo, zr = represent(t, params, cache)
    return score(zs, zr, zo)


def brute_force_rank(triple, store, params, cache) -> int:
    """Filtered object rank by exhaustive enumeration: every entity of the
    subject's graph except the subject, minus replacements that are known
    triples; ties count against the ground truth."""
    s, r, o = (int(x) for x in triple)
    known = {tuple(t) for t in store.triples.tolist()}
    graph = store.vocab.entity_graph
    truth = item_score((s, r, o), params, cache)
    rank = 1
    for e in range(len(graph)):
        if e in (s, o) or graph[e] != graph[s] or (s, r, e) in known:
            continue
        if item_score((s, r, e), params, cache) >= truth:
            rank += 1
    return rank


def substitution_q(e_x, e_y, store, params, cache) -> float:
    """Mean absolute score change over the triples of either entity when
    the two are swapped."""
    O = [t for t in store.triples.tolist() if e_x in (t[0], t[2]) or e_y in (t[0], t[2])]
    swap = {e_x: e_y, e_y: e_x}
    diffs = []
    for s, r, o in O:
        a = item_score((s, r, o), params, cache)
        b = item_score((swap.get(s, s), r, swap.get(o, o)), params, cache)
        diffs.append(abs(a - b))
    return sum(diffs) / len(diffs)


def random_graph_instance(rng, max_entities=50, max_triples=300):
    """Random two-graph store with types and attributes, plus a float64
    embed_all_attention parameter draw and its context cache."""
    from linknbed.context import ContextCache
    from linknbed.model import ModelConfig, ParamSet
    from linknbed.store import AttributeRecord, MultiGraphStore, Vocab

    n = int(rng.integers(6, max_entities + 1))
    n_x = int(rng.integers(3, n - 2))
    m = int(rng.integers(1, 5))
    vocab = Vocab()
    for g in ("X", "Y"):
        vocab.graphs.add(g)
    for i in range(n):
        vocab.entities.add(f"e{i}")
        vocab.entity_graph.append(0 if i < n_x else 1)
    for r in range(m):
        vocab.relations.add(f"r{r}")
    for t in range(3):
        vocab.types.add(f"t{t}")
    vocab.attr_keys.add("k0")
    vocab.attr_keys.add("k1")
    for v in range(4):
        vocab.attr_tokens.add(f"v{v}")
    target = int(rng.integers(n, max_triples + 1))
    rows = set()
    for _ in range(4 * target):
        if len(rows) >= target:
            break
        g = rng.integers(2)
        lo, hi = (0, n_x) if g == 0 else (n_x, n)
        s, o = rng.integers(lo, hi, size=2)
        if s != o:
            rows.add((int(s), int(rng.integers(m)), int(o)))
    triples = np.asarray(sorted(rows), dtype=np.int64).reshape(-1, 3)
    attrs = [AttributeRecord(e, int(rng.integers(2)), tuple(int(x) for x in rng.integers(4, size=2)))
             for e in range(n) if rng.random() < 0.6]
    types = {e: [int(rng.integers(3))] for e in range(n)}
    store = MultiGraphStore(vocab, triples, attrs, types)
    cache = ContextCache.build(store, walks_per_node=4, walk_length=2, seed=int(rng.integers(1000)))
    cfg = ModelConfig.for_variant("embed_all_attention", d=4, k=3, q=2, y=3, dtype="float64")
    params = ParamSet.init(cfg, **vocab.sizes, seed=int(rng.integers(1000)))
    for a in params.arrays.values():
        a[:] = rng.normal(size=a.shape)
    return store, params, cache
