import dataclasses

import numpy as np
import pytest

from conftest import FIXTURE, make_store
from linknbed.cli import gradcheck_instance
from linknbed.context import ContextCache
from linknbed.model import ModelConfig, ParamSet, forward
from linknbed.numerics import rng_stream
from linknbed.store import LinkageLabelSet, load_graphs
from linknbed.trainer import (NumericalAbort, TrainConfig, build_plan, batch_loss, linkage_loss, plan_loss,
                              relational_loss, sample_negative_triples, train, write_trace)


@pytest.fixture(scope="module")
def world():
    store, vocab, labels = load_graphs(*(FIXTURE / f"{k}.tsv" for k in ("triples", "attributes", "types",
                                                                       "labels")))
    cache = ContextCache.build(store, walks_per_node=5, walk_length=3)
    return store, vocab, labels, cache


def _params(vocab, variant="embed_all", dtype="float32", seed=0):
    return ParamSet.init(ModelConfig.for_variant(variant, d=8, k=4, q=4, y=4, dtype=dtype), **vocab.sizes,
                         seed=seed)


class Untouchable:
    """Stand-in label set that fails on any use."""

    def __getattr__(self, name):
        raise AssertionError(f"labels were read ({name})")


# negative sampling

def test_sampling_default_count(world):
    store = world[0]
    out, short = sample_negative_triples(store.triples[0], store, 50, "both", rng_stream(0, "t"))
    assert len(out) == 50 and short == 0
    assert sample_negative_triples(store.triples[0], store, 0, "both", rng_stream(0, "t")) == ([], 0)


def test_sampling_on_complete_graph_comes_up_empty():
    store = make_store(3, 0, [("X", a, 0, b) for a in range(3) for b in range(3) if a != b])
    out, short = sample_negative_triples((0, 0, 1), store, 5, "both", rng_stream(0, "t"))
    assert out == [] and short == 5


def test_sampling_modes(world):
    store = world[0]
    s, r, o = store.triples[3].tolist()
    head, _ = sample_negative_triples((s, r, o), store, 30, "head", rng_stream(1, "t"))
    tail, _ = sample_negative_triples((s, r, o), store, 30, "tail", rng_stream(1, "t"))
    assert all(t[1:] == (r, o) for t in head) and all(t[:2] == (s, r) for t in tail)


# losses

def test_relational_loss_examples():
    assert relational_loss(0.9, [0.2, 0.95]) == pytest.approx(1.35)
    assert relational_loss(0.8, [0.1, 0.9]) == pytest.approx(1.4)
    assert relational_loss(2.5, [0.2, 1.5]) == 0.0
    assert relational_loss(0.5, []) == 0.0


def _one_sided(store, labels):
    """A positively labeled entity and one of its triples whose other endpoint has no labels."""
    for e in sorted(labels.positives):
        for i in store.triples_of(e):
            s, r, o = store.triples[i].tolist()
            if not labels.participates(o if s == e else s):
                return e, (s, r, o)
    raise AssertionError("fixture has no one-sided labeled triple")


def _scores(params, cache, rows):
    return forward(params, cache, np.asarray(rows))[0]


def test_linkage_loss_matches_hand_evaluation(world):
    store, vocab, labels, cache = world
    p = _params(vocab, dtype="float64", seed=3)
    # X entity with a partner, Y object without any labels
    e, (s, r, o) = _one_sided(store, labels)
    slot = 0 if s == e else 2
    sub = LinkageLabelSet(positives=dict(labels.positives), negatives={e: labels.negatives[e][:3]})
    rows = []
    for c in [labels.positives[e]] + sub.negatives[e]:
        t = [s, r, o]
        t[slot] = c
        rows.append(t)
    g = _scores(p, cache, rows)
    expect = relational_loss(g[0], g[1:])
    assert linkage_loss((s, r, o), sub, p, cache, Z=20) == pytest.approx(expect, rel=1e-12)


def test_linkage_loss_fallback_uses_original_triple(world):
    store, vocab, _, cache = world
    p = _params(vocab, dtype="float64", seed=4)
    s, r, o = store.triples[0].tolist()
    negs = [e for e in range(vocab.sizes["n"]) if store.entity_graph[e] != store.entity_graph[s]][:2]
    lab = LinkageLabelSet(negatives={s: negs})
    g = _scores(p, cache, [[s, r, o], [negs[0], r, o], [negs[1], r, o]])
    assert linkage_loss((s, r, o), lab, p, cache) == pytest.approx(relational_loss(g[0], g[1:]), rel=1e-12)


def test_linkage_loss_without_negatives_is_zero(world):
    store, vocab, _, cache = world
    s, r, o = store.triples[0].tolist()
    assert linkage_loss((s, r, o), LinkageLabelSet(positives={s: o}), _params(vocab), cache) == 0.0


def test_linkage_sums_both_labeled_endpoints(world):
    store, vocab, _, cache = world
    p = _params(vocab, dtype="float64")
    s, r, o = store.triples[0].tolist()
    ys = [e for e in range(vocab.sizes["n"]) if store.entity_graph[e] != store.entity_graph[s]][:2]
    both = LinkageLabelSet(negatives={s: [ys[0]], o: [ys[1]]})
    only_s = LinkageLabelSet(negatives={s: [ys[0]]})
    only_o = LinkageLabelSet(negatives={o: [ys[1]]})
    assert linkage_loss((s, r, o), both, p, cache) == pytest.approx(
        linkage_loss((s, r, o), only_s, p, cache) + linkage_loss((s, r, o), only_o, p, cache), rel=1e-12)


def test_z_caps_negative_terms(world):
    store, vocab, labels, cache = world
    e, t = _one_sided(store, labels)
    t = np.asarray(t)
    plan = build_plan(t[None], store, labels, TrainConfig(C=0, Z=5, b=0.0), rng_stream(0, "t"))
    assert np.sum(plan.task == 1) == 5 and len(labels.negatives[e]) > 5


def test_batch_weights(world):
    store, vocab, labels, cache = world
    p = _params(vocab, dtype="float64")
    cfg = TrainConfig(C=5, Z=5, b=0.6)
    labeled = [i for i, (s, _, o) in enumerate(store.triples.tolist()) if labels.participates(s)][:20]
    plan = build_plan(store.triples[labeled], store, labels, cfg, rng_stream(0, "t"))
    loss, _, info = plan_loss(plan, p, cache, cfg)
    unit = dataclasses.replace(plan, weight=np.ones_like(plan.weight))
    _, _, raw = plan_loss(unit, p, cache, cfg)
    assert raw["rel"] > 0 and raw["lab"] > 0
    assert loss == pytest.approx(0.6 * raw["rel"] + 0.4 * raw["lab"], rel=1e-12)
    assert info["rel"] >= 0 and info["lab"] >= 0


def test_empty_batch_is_regularization_only(world):
    store, vocab, labels, cache = world
    loss, grads, plan = batch_loss(np.zeros((0, 3)), store, labels, _params(vocab), cache, TrainConfig(lam=0.1))
    assert loss == 0.0 and grads == {} and plan.n_items == 0


def test_l2_term_covers_touched_rows(world):
    store, vocab, labels, cache = world
    p = _params(vocab, dtype="float64")
    cfg0, cfg1 = TrainConfig(C=3, Z=3, lam=0.0), TrainConfig(C=3, Z=3, lam=0.01)
    plan = build_plan(store.triples[:10], store, labels, cfg0, rng_stream(0, "t"))
    l0, grads, _ = plan_loss(plan, p, cache, cfg0)
    l1, _, info = plan_loss(plan, p, cache, cfg1)
    reg = sum(float(np.sum(p[n][g.rows] ** 2)) for n, g in grads.items())
    assert l1 - l0 == pytest.approx(0.01 * reg, rel=1e-9) and info["reg"] == pytest.approx(0.01 * reg)


@pytest.mark.parametrize("b", [0.0, 0.6, 1.0])
def test_objective_gradient(b):
    gradcheck_instance("embed_all_attention", b, probes=30).raise_for_failure()


def test_config_validation():
    for kw in ({"C": -1}, {"b": 1.2}, {"margin": 0}, {"corrupt_mode": "middle"}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


# training loop

def _small_train(world, **kw):
    store, vocab, labels, cache = world
    p = _params(vocab)
    cfg = TrainConfig(**{"C": 3, "Z": 3, "batch_size": 256, "epochs": 2, **kw})
    return p, train(store, store.triples, labels, cache, p, cfg)


def test_zero_learning_rate_leaves_parameters_unchanged(world):
    before = _params(world[1])
    p, res = _small_train(world, lr=0.0, lam=0.1)
    for k in before.arrays:
        assert np.array_equal(before[k], p[k])
    a, b = res.epoch_means
    assert abs(a - b) / a < 0.05


def test_training_is_deterministic(world):
    p1, r1 = _small_train(world)
    p2, r2 = _small_train(world)
    assert [t.loss for t in r1.trace] == [t.loss for t in r2.trace]
    assert all(np.array_equal(p1[k], p2[k]) for k in p1.arrays)


def test_resume_equals_uninterrupted_run(world):
    store, vocab, labels, cache = world
    cfg = TrainConfig(C=3, Z=3, batch_size=256, epochs=3)
    full = _params(vocab)
    train(store, store.triples, labels, cache, full, cfg)
    part = _params(vocab)
    first = train(store, store.triples, labels, cache, part, dataclasses.replace(cfg, epochs=1))
    train(store, store.triples, labels, cache, part, cfg, adam=first.adam, start_epoch=1)
    assert all(np.array_equal(full[k], part[k]) for k in full.arrays)


def test_learning_rate_decays_per_epoch(world):
    _, res = _small_train(world, epochs=3)
    assert res.adam.lr == pytest.approx(0.01 * 0.95 ** 2)


def test_unsupervised_training_never_reads_labels(world):
    store, vocab, _, cache = world
    p = _params(vocab)
    res = train(store, store.triples[:300], Untouchable(), cache, p, TrainConfig(C=3, b=1.0, epochs=1))
    assert res.epochs_done == 1


def test_nan_aborts_with_diagnostic(world):
    store, vocab, labels, cache = world
    p = _params(vocab)
    p["W1"][0, 0] = np.nan
    with pytest.raises(NumericalAbort, match="batch 0"):
        train(store, store.triples, labels, cache, p, TrainConfig(C=3, Z=3, epochs=1))


def test_trace_csv(world, tmp_path):
    _, res = _small_train(world)
    path = tmp_path / "trace.csv"
    write_trace(res.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,batch,loss,wall_ms"
    assert len(lines) == 1 + len(res.trace)
    e, b, loss, ms = lines[1].split(",")
    assert (int(e), int(b)) == (0, 0) and float(loss) > 0 and float(ms) >= 0
