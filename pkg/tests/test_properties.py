"""Property suites: each runs over at least 1000 generated cases."""

from collections import Counter
from functools import lru_cache

import numpy as np
from hypothesis import assume, given
from hypothesis import strategies as hs

from conftest import FIXTURE, THOROUGH
from linknbed.context import ContextCache
from linknbed.evaluate import linkage_score
from linknbed.model import ModelConfig, ParamSet, aggregate_context, encode_entities, neighborhood_context
from linknbed.numerics import activation, rng_stream, softmax
from linknbed.store import LinkageLabelSet, load_graphs
from linknbed.trainer import linkage_loss, relational_loss, sample_negative_triples
from oracles import random_graph_instance

CASES: Counter = Counter()

_STORE, _VOCAB, _LABELS = load_graphs(*(FIXTURE / f"{k}.tsv" for k in ("triples", "attributes", "types", "labels")))
_CACHE = ContextCache.build(_STORE, walks_per_node=5, walk_length=3)
_PARAMS = ParamSet.init(ModelConfig.for_variant("embed_all_attention", d=6, k=4, q=3, y=4, dtype="float64"),
                        **_VOCAB.sizes, seed=1)
for _a in _PARAMS.arrays.values():
    _a[:] = rng_stream(9, "props").normal(size=_a.shape)


@lru_cache(maxsize=None)
def _graph(i):
    return random_graph_instance(np.random.default_rng(100 + i), max_entities=40, max_triples=150)

finite = hs.floats(-60, 60, allow_nan=False)


@THOROUGH
@given(hs.lists(finite, min_size=1, max_size=30), hs.randoms(use_true_random=False))
def test_softmax_normalization(theta, rnd):
    CASES["softmax"] += 1
    p = softmax(theta)
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-6
    perm = list(range(len(theta)))
    rnd.shuffle(perm)
    assert np.allclose(softmax([theta[i] for i in perm]), p[perm], rtol=1e-12, atol=1e-300)


@THOROUGH
@given(hs.floats(0, 1), hs.lists(hs.floats(0, 1), max_size=40), hs.floats(0.01, 3),
       hs.integers(0, len(_STORE.triples) - 1), hs.integers(0, 2 ** 16), hs.integers(0, 20))
def test_hinge_nonnegativity(pos, negs, margin, ti, seed, Z):
    CASES["hinge"] += 1
    rel = relational_loss(pos, negs, margin)
    assert rel >= 0.0
    assert (rel == 0.0) == all(margin - pos + n <= 0.0 for n in negs)
    t = tuple(int(x) for x in _STORE.triples[ti])
    lab = linkage_loss(t, _LABELS, _PARAMS, _CACHE, margin, Z, rng_stream(seed, "prop"))
    assert lab >= 0.0


@THOROUGH
@given(hs.integers(0, len(_STORE.triples) - 1), hs.integers(0, 60), hs.sampled_from(["head", "tail", "both"]),
       hs.integers(0, 2 ** 16))
def test_negative_sample_validity(ti, C, mode, seed):
    CASES["negatives"] += 1
    s, r, o = (int(x) for x in _STORE.triples[ti])
    out, short = sample_negative_triples((s, r, o), _STORE, C, mode, rng_stream(seed, "prop"))
    assert len(out) + short == C
    for cs, cr, co in out:
        assert cr == r
        assert (cs == s) != (co == o)                    # exactly one endpoint replaced
        new = cs if co == o else co
        assert new not in (s, o)
        assert not _STORE.contains(cs, cr, co)


@THOROUGH
@given(hs.data())
def test_linkage_symmetry(data):
    CASES["symmetry"] += 1
    store, params, cache = _graph(data.draw(hs.integers(0, 19)))
    params = params.copy()
    rng = rng_stream(data.draw(hs.integers(0, 2 ** 32 - 1)), "prop-params")
    for a in params.arrays.values():
        a[:] = rng.normal(size=a.shape)
    g = store.entity_graph
    a = data.draw(hs.sampled_from(np.flatnonzero(g == 0).tolist()))
    b = data.draw(hs.sampled_from(np.flatnonzero(g == 1).tolist()))
    assume(store.triples_of(a).size + store.triples_of(b).size > 0)
    ab = linkage_score(a, b, store, params, cache)
    ba = linkage_score(b, a, store, params, cache)
    assert ab.q == ba.q and ab.k == ba.k
    assert 0.0 <= ab.q < 1.0


@THOROUGH
@given(hs.integers(1, 12), hs.sampled_from(["mean", "max"]), hs.booleans(), hs.integers(0, 2 ** 16),
       hs.sampled_from(["embed_all", "embed_all_attention", "embed_nhbr", "embed_attr"]))
def test_empty_context_is_zero_vector(dim, agg, att, seed, variant):
    CASES["empty_context"] += 1
    theta = np.ones(3) if att else None
    assert not aggregate_context([], [], theta, agg, dim).any()
    assert aggregate_context([], [], theta, agg, dim).shape == (dim,)
    # an entity whose only neighbor is the other endpoint, with no attributes,
    # encodes from its own row alone
    cfg = ModelConfig.for_variant(variant, d=dim, k=2, q=2, y=3, dtype="float64", attr_aggregator=agg)
    p = ParamSet.init(cfg, 3, 1, 1, 1, 1, seed=seed)
    cache = ContextCache([np.array([1]), np.array([0]), np.array([], dtype=np.int64)], [[], [], []],
                         [np.array([], dtype=np.int64)])
    assert not neighborhood_context(0, 1, cache, p).any()
    z, _ = encode_entities(p, cache, np.array([0, 2]), np.array([1, -1]))
    f = activation(cfg.atomic_activation)[0]
    expect = np.tanh(f(p["ent"][[0, 2]].astype(np.float64)) @ p["W1"].astype(np.float64).T)
    assert np.array_equal(z, expect)
