"""Multi-graph triple store: vocabularies, TSV ingestion, linkage labels and
train/test splitting.

Entities from every graph share one dense id space; each entity carries the
tag of the graph it came from, so the combined triple set is the primitive
and a single graph is a view over it.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .numerics import rng_stream

log = logging.getLogger(__name__)

OOV_TOKEN = "<oov>"


class ParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class ValidationError(ValueError):
    pass


class Index:
    """Bidirectional string <-> dense id map."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.ids: dict[str, int] = {}
        for n in names:
            self.add(n)

    def add(self, name: str) -> int:
        i = self.ids.get(name)
        if i is None:
            i = len(self.names)
            self.ids[name] = i
            self.names.append(name)
        return i

    def __getitem__(self, name: str) -> int:
        return self.ids[name]

    def __contains__(self, name: str) -> bool:
        return name in self.ids

    def __len__(self) -> int:
        return len(self.names)

    def name(self, i: int) -> str:
        return self.names[i]


@dataclass
class Vocab:
    entities: Index = field(default_factory=Index)
    relations: Index = field(default_factory=Index)
    types: Index = field(default_factory=Index)
    attr_keys: Index = field(default_factory=Index)
    attr_tokens: Index = field(default_factory=Index)
    graphs: Index = field(default_factory=Index)
    entity_graph: list[int] = field(default_factory=list)

    @property
    def sizes(self) -> dict[str, int]:
        return {"n": len(self.entities), "m": len(self.relations), "z": len(self.types),
                "u": len(self.attr_keys), "v": len(self.attr_tokens)}

    def digest(self) -> str:
        h = hashlib.sha256()
        for label, idx in (("E", self.entities), ("R", self.relations), ("T", self.types),
                           ("K", self.attr_keys), ("V", self.attr_tokens), ("G", self.graphs)):
            h.update(label.encode())
            for n in idx.names:
                h.update(n.encode("utf-8") + b"\x00")
        h.update(np.asarray(self.entity_graph, dtype="<i8").tobytes())
        return h.hexdigest()


class Triple(NamedTuple):
    subject: int
    relation: int
    object: int


@dataclass(frozen=True)
class AttributeRecord:
    entity: int
    key: int
    value_tokens: tuple[int, ...]


class MultiGraphStore:
    """Combined triple set across graphs, plus attributes and entity types.

    ``triples`` is an ``(P, 3)`` int64 array of (subject, relation, object);
    the graph of a triple is the graph of its subject.
    """

    def __init__(self, vocab: Vocab, triples: np.ndarray, attributes: list[AttributeRecord],
                 entity_types: dict[int, list[int]], warnings: Counter | None = None):
        self.vocab = vocab
        self.triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self.attributes = attributes
        self.entity_types = entity_types
        self.warnings = warnings if warnings is not None else Counter()
        self._keys = set(self._encode(self.triples).tolist())
        self._by_entity: dict[int, np.ndarray] | None = None

    @property
    def n_entities(self) -> int:
        return len(self.vocab.entities)

    @property
    def entity_graph(self) -> np.ndarray:
        return np.asarray(self.vocab.entity_graph, dtype=np.int64)

    def _encode(self, t: np.ndarray) -> np.ndarray:
        n = max(self.n_entities, 1)
        m = max(len(self.vocab.relations), 1)
        t = np.asarray(t, dtype=np.int64).reshape(-1, 3)
        return (t[:, 0] * m + t[:, 1]) * n + t[:, 2]

    def contains(self, s: int, r: int, o: int) -> bool:
        n = max(self.n_entities, 1)
        m = max(len(self.vocab.relations), 1)
        return ((s * m + r) * n + o) in self._keys

    def contains_many(self, t: np.ndarray) -> np.ndarray:
        keys = self._encode(t)
        return np.fromiter((k in self._keys for k in keys.tolist()), dtype=bool, count=keys.size)

    def triple_graph(self, t: np.ndarray) -> np.ndarray:
        return self.entity_graph[np.asarray(t, dtype=np.int64).reshape(-1, 3)[:, 0]]

    def primary_type(self, e: int) -> int | None:
        ts = self.entity_types.get(e)
        return ts[0] if ts else None

    def triples_of(self, e: int) -> np.ndarray:
        """Indices of triples mentioning ``e`` as subject or object."""
        if self._by_entity is None:
            idx: dict[int, list[int]] = {}
            for i, (s, _, o) in enumerate(self.triples.tolist()):
                idx.setdefault(s, []).append(i)
                if o != s:
                    idx.setdefault(o, []).append(i)
            self._by_entity = {e: np.asarray(v, dtype=np.int64) for e, v in idx.items()}
        return self._by_entity.get(e, np.zeros(0, dtype=np.int64))

    def with_triples(self, triples: np.ndarray) -> "MultiGraphStore":
        """Same vocabulary and side information over a different triple set."""
        return MultiGraphStore(self.vocab, triples, self.attributes, self.entity_types, Counter())


# ---------------------------------------------------------------------------
# linkage labels
# ---------------------------------------------------------------------------

@dataclass
class LinkageLabelSet:
    positives: dict[int, int] = field(default_factory=dict)
    negatives: dict[int, list[int]] = field(default_factory=dict)

    def add_positive(self, a: int, b: int) -> None:
        for x, y in ((a, b), (b, a)):
            cur = self.positives.get(x)
            if cur is not None and cur != y:
                raise ValidationError(f"entity {x} already has positive partner {cur}, cannot add {y}")
        if b in self.negatives.get(a, ()):
            raise ValidationError(f"pair ({a}, {b}) is labeled both positive and negative")
        self.positives[a] = b
        self.positives[b] = a

    def add_negative(self, a: int, b: int) -> None:
        if self.positives.get(a) == b:
            raise ValidationError(f"pair ({a}, {b}) is labeled both positive and negative")
        for x, y in ((a, b), (b, a)):
            lst = self.negatives.setdefault(x, [])
            if y not in lst:
                lst.append(y)

    def pairs(self) -> list[tuple[int, int, int]]:
        """Unique unordered pairs as ``(low id, high id, label)``, sorted."""
        out = {(min(a, b), max(a, b)): 1 for a, b in self.positives.items()}
        for a, lst in self.negatives.items():
            for b in lst:
                out.setdefault((min(a, b), max(a, b)), 0)
        return sorted((a, b, l) for (a, b), l in out.items())

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int, int]]) -> "LinkageLabelSet":
        ls = cls()
        pairs = list(pairs)
        for a, b, l in pairs:
            if l == 1:
                ls.add_positive(a, b)
        for a, b, l in pairs:
            if l == 0:
                ls.add_negative(a, b)
        return ls

    def participates(self, e: int) -> bool:
        return e in self.positives or bool(self.negatives.get(e))

    def __len__(self) -> int:
        return len(self.pairs())


def _check_cross_graph(vocab: Vocab, a: int, b: int) -> None:
    if vocab.entity_graph[a] == vocab.entity_graph[b]:
        raise ValidationError(
            f"label pair ({vocab.entities.name(a)}, {vocab.entities.name(b)}) lies within one graph")


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def tokenize(value: str) -> list[str]:
    return value.lower().split()


def _rows(path, n_fields: int):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != n_fields or any(p == "" for p in parts):
                raise ParseError(path, lineno, f"expected {n_fields} tab-separated fields, got {line!r}")
            yield lineno, parts


def load_graphs(triples_path, attrs_path=None, types_path=None, labels_path=None,
                strict: bool = False, max_value_tokens: int | None = None):
    """Read the four TSV files into ``(store, vocab, labels)``.

    Self-loops and duplicate triples are dropped and counted in
    ``store.warnings`` unless ``strict`` is set, in which case they raise.
    Attribute values are lowercased and split on whitespace; when
    ``max_value_tokens`` is given only the most frequent tokens are kept and
    the rest map to ``<oov>``.
    """
    vocab = Vocab()
    warnings: Counter = Counter()
    triples: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()

    for lineno, (g, s, r, o) in _rows(triples_path, 4):
        gid = vocab.graphs.add(g)
        ids = []
        for name in (s, o):
            if name in vocab.entities:
                e = vocab.entities[name]
                if vocab.entity_graph[e] != gid:
                    raise ParseError(triples_path, lineno,
                                     f"entity {name!r} already belongs to graph "
                                     f"{vocab.graphs.name(vocab.entity_graph[e])!r}")
            else:
                e = vocab.entities.add(name)
                vocab.entity_graph.append(gid)
            ids.append(e)
        si, oi = ids
        if si == oi:
            if strict:
                raise ParseError(triples_path, lineno, f"self-loop on {s!r}")
            warnings["self_loop"] += 1
            continue
        t = (si, vocab.relations.add(r), oi)
        if t in seen:
            if strict:
                raise ParseError(triples_path, lineno, "duplicate triple")
            warnings["duplicate_triple"] += 1
            continue
        seen.add(t)
        triples.append(t)

    def entity_id(path, lineno, name):
        if name not in vocab.entities:
            raise ValidationError(f"{path}:{lineno}: unknown entity {name!r}")
        return vocab.entities[name]

    raw_attrs = []
    for lineno, (e, k, val) in _rows(attrs_path, 3) if attrs_path else ():
        toks = tokenize(val)
        if not toks:
            continue
        raw_attrs.append((entity_id(attrs_path, lineno, e), vocab.attr_keys.add(k), toks))

    counts = Counter(t for _, _, toks in raw_attrs for t in toks)
    keep = None
    if max_value_tokens is not None and len(counts) > max_value_tokens:
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        keep = {t for t, _ in ranked[:max_value_tokens]}
    attributes = []
    for e, k, toks in raw_attrs:
        ids = tuple(vocab.attr_tokens.add(t if keep is None or t in keep else OOV_TOKEN) for t in toks)
        attributes.append(AttributeRecord(e, k, ids))

    entity_types: dict[int, list[int]] = {}
    for lineno, (e, t) in _rows(types_path, 2) if types_path else ():
        eid = entity_id(types_path, lineno, e)
        tid = vocab.types.add(t)
        lst = entity_types.setdefault(eid, [])
        if tid not in lst:
            lst.append(tid)

    labels = LinkageLabelSet()
    label_rows = []
    for lineno, (a, b, l) in _rows(labels_path, 3) if labels_path else ():
        if l not in ("0", "1"):
            raise ParseError(labels_path, lineno, f"label must be 0 or 1, got {l!r}")
        ai, bi = entity_id(labels_path, lineno, a), entity_id(labels_path, lineno, b)
        _check_cross_graph(vocab, ai, bi)
        label_rows.append((ai, bi, int(l)))
    labels = LinkageLabelSet.from_pairs(label_rows)

    if warnings:
        log.warning("dropped input lines: %s", dict(warnings))
    store = MultiGraphStore(vocab, np.asarray(triples, dtype=np.int64), attributes, entity_types, warnings)
    return store, vocab, labels


def write_graphs(store: MultiGraphStore, labels: LinkageLabelSet | None, out_dir) -> dict[str, Path]:
    """Serialize in canonical form: rows sorted by names, per-entity order kept
    for attributes and types."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    v = store.vocab
    E, R = v.entities.names, v.relations.names
    paths = {k: out_dir / f"{k}.tsv" for k in ("triples", "attributes", "types", "labels")}

    rows = sorted((v.graphs.name(v.entity_graph[s]), E[s], R[r], E[o]) for s, r, o in store.triples.tolist())
    _write_rows(paths["triples"], rows)

    by_ent: dict[int, list[AttributeRecord]] = {}
    for rec in store.attributes:
        by_ent.setdefault(rec.entity, []).append(rec)
    arows = [(E[e], v.attr_keys.name(rec.key), " ".join(v.attr_tokens.name(t) for t in rec.value_tokens))
             for e in sorted(by_ent, key=lambda i: E[i]) for rec in by_ent[e]]
    _write_rows(paths["attributes"], arows)

    trows = [(E[e], v.types.name(t)) for e in sorted(store.entity_types, key=lambda i: E[i])
             for t in store.entity_types[e]]
    _write_rows(paths["types"], trows)

    lrows = []
    if labels is not None:
        for a, b, l in labels.pairs():
            if v.graphs.name(v.entity_graph[a]) > v.graphs.name(v.entity_graph[b]):
                a, b = b, a
            lrows.append((E[a], E[b], str(l)))
        lrows.sort()
    _write_rows(paths["labels"], lrows)
    return paths


def _write_rows(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write("\t".join(row) + "\n")


# ---------------------------------------------------------------------------
# negative labels and splits
# ---------------------------------------------------------------------------

def generate_negative_labels(store: MultiGraphStore, positives: dict[int, int] | LinkageLabelSet,
                             per_type: int = 10, cross_type: int = 10, seed: int = 0,
                             entities: Iterable[int] | None = None) -> LinkageLabelSet:
    """Sample negative linkage labels from the other graph(s).

    For every entity (or every id in ``entities``) draw, without
    replacement, up to ``per_type`` entities sharing its primary type and up
    to ``cross_type`` entities of a different type, never its positive
    partner.  Short pools are emitted whole.
    """
    if isinstance(positives, LinkageLabelSet):
        positives = positives.positives
    out = LinkageLabelSet()
    for a, b in positives.items():
        if a < b:
            out.add_positive(a, b)

    graph = store.entity_graph
    ptype = np.array([store.primary_type(e) if store.primary_type(e) is not None else -1
                      for e in range(store.n_entities)], dtype=np.int64)
    targets = range(store.n_entities) if entities is None else sorted(set(entities))
    for e in targets:
        other = graph != graph[e]
        partner = positives.get(e, -1)
        if partner >= 0:
            other[partner] = False
        if ptype[e] >= 0:
            same = np.flatnonzero(other & (ptype == ptype[e]))
            diff = np.flatnonzero(other & (ptype != ptype[e]))
        else:
            same = np.zeros(0, dtype=np.int64)
            diff = np.flatnonzero(other)
        rng = rng_stream(seed, "negative-labels", e)
        chosen = []
        if per_type > 0 and same.size:
            chosen.extend(rng.choice(same, size=min(per_type, same.size), replace=False).tolist())
        if cross_type > 0 and diff.size:
            chosen.extend(rng.choice(diff, size=min(cross_type, diff.size), replace=False).tolist())
        for c in chosen:
            out.add_negative(e, int(c))
    return out


@dataclass
class DatasetSplit:
    train_triples: np.ndarray
    test_triples: np.ndarray
    train_labels: LinkageLabelSet
    test_labels: LinkageLabelSet


def _n_train(n: int, frac: float) -> int:
    return min(n, int(math.floor(frac * n + 0.5)))


def split_dataset(store: MultiGraphStore, labels: LinkageLabelSet, train_fraction: float = 0.6,
                  seed: int = 0) -> DatasetSplit:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = rng_stream(seed, "split-triples")
    perm = rng.permutation(len(store.triples))
    k = _n_train(len(perm), train_fraction)
    train_t = store.triples[np.sort(perm[:k])]
    test_t = store.triples[np.sort(perm[k:])]

    pairs = labels.pairs()
    rng = rng_stream(seed, "split-labels")
    lperm = rng.permutation(len(pairs))
    kl = _n_train(len(pairs), train_fraction)
    train_l = LinkageLabelSet.from_pairs(pairs[i] for i in sorted(lperm[:kl]))
    test_l = LinkageLabelSet.from_pairs(pairs[i] for i in sorted(lperm[kl:]))
    return DatasetSplit(train_t, test_t, train_l, test_l)
