"""Synthetic dual-graph generator.

Graph X is drawn from a small latent-cluster relational model: every
relation has a (subject type, object type) signature and maps subject
clusters to object clusters, so links are learnable.  Graph Y renames a
random subset of X's entities, copies the X edges among them and their
attributes with independent drops, then adds fresh entities and edges from
the same model.  The renamed subset is the ground-truth positive linkage.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import rng_stream
from .store import LinkageLabelSet, _write_rows, generate_negative_labels, load_graphs


@dataclass
class SynthSummary:
    paths: dict[str, Path]
    n_x: int
    n_y: int
    n_triples_x: int
    n_triples_y: int
    n_positive: int
    n_negative: int


class _Model:
    def __init__(self, n_relations, n_types, n_clusters, rng):
        self.n_clusters = n_clusters
        # subject types cycle so every type is the subject of several relations
        order = rng.permutation(n_types)
        self.sig = [(int(order[r % n_types]), int(rng.integers(n_types))) for r in range(n_relations)]
        self.cmap = [rng.permutation(n_clusters) for _ in range(n_relations)]

    def draw_edge(self, rng, etype, eclust, pool, fidelity=0.85, forced_subject=None):
        """One (s, r, o) over entity ids in ``pool``; None if no compatible pair."""
        for _ in range(20):
            r = int(rng.integers(len(self.sig)))
            ts, to = self.sig[r]
            if forced_subject is not None:
                s = forced_subject
                if etype[s] != ts:
                    continue
            else:
                subs = pool[etype[pool] == ts]
                if subs.size == 0:
                    continue
                s = int(rng.choice(subs))
            objs = pool[(etype[pool] == to) & (pool != s)]
            if objs.size == 0:
                continue
            if rng.random() < fidelity:
                hit = objs[eclust[objs] == self.cmap[r][eclust[s]]]
                if hit.size:
                    objs = hit
            return s, r, int(rng.choice(objs))
        return None


def _grow_edges(model, rng, etype, eclust, pool, target, edges: set, must_cover=()):
    for e in must_cover:
        if any(e in (s, o) for s, _, o in edges):
            continue
        t = model.draw_edge(rng, etype, eclust, pool, forced_subject=e)
        if t is None:
            # e cannot be a subject; attach it as an object instead
            others = pool[pool != e]
            t = (int(rng.choice(others)), int(rng.integers(len(model.sig))), e)
        edges.add(t)
    tries = 0
    while len(edges) < target and tries < 50 * max(target, 1):
        tries += 1
        t = model.draw_edge(rng, etype, eclust, pool)
        if t is not None:
            edges.add(t)
    return edges


def generate_synthetic_pair(out_dir, n_entities: int = 200, n_relations: int = 8, n_types: int = 4,
                            n_attr_keys: int = 4, density: float = 6.0, duplicate_fraction: float = 0.2,
                            edge_drop: float = 0.1, attr_drop: float = 0.1, seed: int = 0,
                            neg_per_type: int = 10, neg_cross_type: int = 10,
                            negatives_for: str = "labeled", n_clusters: int = 8,
                            name_pool: int | None = None) -> SynthSummary:
    """Write ``triples.tsv``, ``attributes.tsv``, ``types.tsv``, ``labels.tsv``
    and ``rename_map.tsv`` under ``out_dir``.

    ``n_entities`` is the size of X; Y has the same size, made of the
    ``round(duplicate_fraction * n_entities)`` renamed duplicates plus fresh
    entities.  Negative labels are drawn for the positively labeled entities
    (``negatives_for="labeled"``) or for every entity (``"all"``).
    """
    for name, val in (("duplicate_fraction", duplicate_fraction), ("edge_drop", edge_drop),
                      ("attr_drop", attr_drop)):
        if not 0.0 <= val <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {val}")
    if density < 1.0:
        raise ValueError("density must give at least one triple per entity")
    if negatives_for not in ("labeled", "all"):
        raise ValueError(f"negatives_for must be 'labeled' or 'all', got {negatives_for!r}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = rng_stream(seed, "synth")
    n = n_entities
    n_dup = int(round(duplicate_fraction * n))
    n_y = n
    name_pool = name_pool or max(n, 4)

    model = _Model(n_relations, n_types, n_clusters, rng)
    # ids 0..n-1 are X, n..n+n_y-1 are Y; the first n_dup Y ids copy X entities dup[k]
    N = n + n_y
    etype = np.zeros(N, dtype=np.int64)
    eclust = np.zeros(N, dtype=np.int64)
    etype[:n] = rng.integers(n_types, size=n)
    eclust[:n] = rng.integers(n_clusters, size=n)

    # attributes: a two-token name plus cluster-dependent descriptive keys
    attrs: dict[int, list[tuple[str, str]]] = {}
    for e in range(n):
        recs = [("name", f"w{int(rng.integers(name_pool))} w{int(rng.integers(name_pool))}")]
        for k in range(1, n_attr_keys):
            if rng.random() < 0.7:
                tok = (eclust[e] * 3 + k + int(rng.integers(2))) % (2 * n_clusters)
                recs.append((f"key{k}", f"k{k}v{tok}"))
        attrs[e] = recs

    x_pool = np.arange(n)
    x_edges = _grow_edges(model, rng, etype, eclust, x_pool, int(round(density * n)), set(),
                          must_cover=range(n))

    dup = np.sort(rng.choice(n, size=n_dup, replace=False)) if n_dup else np.zeros(0, dtype=np.int64)
    y_of = {int(x): n + k for k, x in enumerate(dup)}
    etype[n:n + n_dup] = etype[dup]
    eclust[n:n + n_dup] = eclust[dup]
    etype[n + n_dup:] = rng.integers(n_types, size=n_y - n_dup)
    eclust[n + n_dup:] = rng.integers(n_clusters, size=n_y - n_dup)

    y_edges: set = set()
    for s, r, o in sorted(x_edges):
        if s in y_of and o in y_of and rng.random() >= edge_drop:
            y_edges.add((y_of[s], r, y_of[o]))
    for x, y in y_of.items():
        attrs[y] = [rec for rec in attrs[x] if rng.random() >= attr_drop]
    for e in range(n + n_dup, N):
        recs = [("name", f"w{int(rng.integers(name_pool))} w{int(rng.integers(name_pool))}")]
        for k in range(1, n_attr_keys):
            if rng.random() < 0.7:
                tok = (eclust[e] * 3 + k + int(rng.integers(2))) % (2 * n_clusters)
                recs.append((f"key{k}", f"k{k}v{tok}"))
        attrs[e] = recs
    y_pool = np.arange(n, N)
    y_target = int(round(density * n_y))
    if duplicate_fraction >= 1.0 and edge_drop == 0.0:
        y_target = len(y_edges)
    y_edges = _grow_edges(model, rng, etype, eclust, y_pool, y_target, y_edges, must_cover=range(n, N))

    # Y names are shuffled so nothing in a name leaks the alignment
    y_names = {e: f"y:e{k:05d}" for k, e in enumerate(rng.permutation(np.arange(n, N)).tolist())}
    names = {e: f"x:e{e:05d}" for e in range(n)}
    names.update(y_names)

    paths = {k: out / f"{k}.tsv" for k in ("triples", "attributes", "types", "labels", "rename_map")}
    trows = [("X", names[s], f"r{r}", names[o]) for s, r, o in sorted(x_edges)]
    trows += [("Y", names[s], f"r{r}", names[o]) for s, r, o in sorted(y_edges)]
    _write_rows(paths["triples"], trows)
    _write_rows(paths["attributes"], [(names[e], k, v) for e in range(N) for k, v in attrs[e]])
    _write_rows(paths["types"], [(names[e], f"t{etype[e]}") for e in range(N)])
    _write_rows(paths["rename_map"], [(names[x], names[y]) for x, y in sorted(y_of.items())])

    store, vocab, _ = load_graphs(paths["triples"], paths["attributes"], paths["types"])
    ent = vocab.entities
    labels = LinkageLabelSet()
    for x, y in y_of.items():
        labels.add_positive(ent[names[x]], ent[names[y]])
    targets = None if negatives_for == "all" else sorted(labels.positives)
    labels = generate_negative_labels(store, labels, neg_per_type, neg_cross_type, seed, entities=targets)
    lrows = []
    for a, b, l in labels.pairs():
        if vocab.entity_graph[a] != vocab.graphs["X"]:
            a, b = b, a
        lrows.append((ent.name(a), ent.name(b), str(l)))
    _write_rows(paths["labels"], sorted(lrows))

    n_pos = sum(1 for *_, l in labels.pairs() if l == 1)
    return SynthSummary(paths, n, n_y, len(x_edges), len(y_edges), n_pos, len(labels.pairs()) - n_pos)
