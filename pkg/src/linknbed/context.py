"""Precomputed context: random-walk neighborhoods, per-entity attribute
lists and per-relation participating types, with a binary sidecar format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .numerics import rng_stream
from .store import AttributeRecord, MultiGraphStore

MAGIC = b"LNBC"
VERSION = 1


def _csr(lists: list[np.ndarray] | list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
    indptr = np.zeros(len(lists) + 1, dtype=np.int64)
    np.cumsum(lens, out=indptr[1:])
    flat = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists]) if lists and indptr[-1] else \
        np.zeros(0, dtype=np.int64)
    return indptr, flat


def undirected_adjacency(triples: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """CSR adjacency of the unlabeled undirected graph, neighbors sorted and unique."""
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    a = np.concatenate([t[:, 0], t[:, 2]])
    b = np.concatenate([t[:, 2], t[:, 0]])
    keys = np.unique(a * max(n, 1) + b)
    src, dst = keys // max(n, 1), keys % max(n, 1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    return indptr, dst


def build_neighborhoods(store: MultiGraphStore, walks_per_node: int = 50, walk_length: int = 3,
                        seed: int = 0, cap: int | None = 512) -> list[np.ndarray]:
    """N(e) for every entity: unique nodes visited by ``walks_per_node``
    random walks of ``walk_length`` steps from e, without e itself.

    Walk i of entity e always consumes the same random numbers, so raising
    ``walks_per_node`` only adds nodes.  A walk that reaches a node without
    neighbors stops there.  When ``cap`` is set, only the ``cap`` most
    visited nodes are kept (ties go to the lower id).
    """
    if walks_per_node < 1 or walk_length < 1:
        raise ValueError("walks_per_node and walk_length must be >= 1")
    n = store.n_entities
    indptr, nbrs = undirected_adjacency(store.triples, n)
    deg = np.diff(indptr)
    out = []
    for e in range(n):
        if deg[e] == 0:
            out.append(np.zeros(0, dtype=np.int64))
            continue
        u = rng_stream(seed, "walk", e).random((walks_per_node, walk_length))
        cur = np.full(walks_per_node, e, dtype=np.int64)
        alive = np.ones(walks_per_node, dtype=bool)
        visits = []
        for step in range(walk_length):
            d = deg[cur]
            alive &= d > 0
            if not alive.any():
                break
            live = np.flatnonzero(alive)
            pick = np.minimum((u[live, step] * d[live]).astype(np.int64), d[live] - 1)
            cur[live] = nbrs[indptr[cur[live]] + pick]
            visits.append(cur[live])
        seen = np.concatenate(visits) if visits else np.zeros(0, dtype=np.int64)
        seen = seen[seen != e]
        ids, counts = np.unique(seen, return_counts=True)
        if cap is not None and ids.size > cap:
            order = np.lexsort((ids, -counts))[:cap]
            ids = np.sort(ids[order])
        out.append(ids)
    return out


def build_relation_type_context(store: MultiGraphStore, entity_types: dict[int, list[int]] | None = None
                                ) -> list[np.ndarray]:
    entity_types = store.entity_types if entity_types is None else entity_types
    m = len(store.vocab.relations)
    sets: list[set[int]] = [set() for _ in range(m)]
    for s, r, o in store.triples.tolist():
        sets[r].update(entity_types.get(s, ()))
        sets[r].update(entity_types.get(o, ()))
    return [np.asarray(sorted(x), dtype=np.int64) for x in sets]


def build_attribute_lists(store: MultiGraphStore) -> list[list[AttributeRecord]]:
    out: list[list[AttributeRecord]] = [[] for _ in range(store.n_entities)]
    for rec in store.attributes:
        out[rec.entity].append(rec)
    return out


@dataclass
class ContextCache:
    neighborhoods: list[np.ndarray]
    entity_attrs: list[list[AttributeRecord]]
    relation_types: list[np.ndarray]
    digest: str = ""

    @classmethod
    def build(cls, store: MultiGraphStore, walks_per_node: int = 50, walk_length: int = 3,
              seed: int = 0, cap: int | None = 512) -> "ContextCache":
        return cls(build_neighborhoods(store, walks_per_node, walk_length, seed, cap),
                   build_attribute_lists(store),
                   build_relation_type_context(store),
                   context_digest(store, walks_per_node, walk_length, seed, cap))

    @classmethod
    def empty(cls, n_entities: int, n_relations: int) -> "ContextCache":
        return cls([np.zeros(0, dtype=np.int64) for _ in range(n_entities)],
                   [[] for _ in range(n_entities)],
                   [np.zeros(0, dtype=np.int64) for _ in range(n_relations)])

    def invalidate(self) -> None:
        """Drop flattened views after the lists were edited in place."""
        for name in ("nbr_csr", "type_csr", "attr_csr"):
            self.__dict__.pop(name, None)

    # flattened views consumed by the encoder

    @cached_property
    def nbr_csr(self) -> tuple[np.ndarray, np.ndarray]:
        # sorted and unique per owner: the encoder binary-searches owner*n + member
        return _csr([np.unique(np.asarray(x, dtype=np.int64)) for x in self.neighborhoods])

    @cached_property
    def type_csr(self) -> tuple[np.ndarray, np.ndarray]:
        return _csr(self.relation_types)

    @cached_property
    def attr_csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(entity -> record indptr, record key, record -> token indptr, tokens)."""
        recs = [r for lst in self.entity_attrs for r in lst]
        ent_ptr = np.zeros(len(self.entity_attrs) + 1, dtype=np.int64)
        np.cumsum([len(x) for x in self.entity_attrs], out=ent_ptr[1:])
        keys = np.asarray([r.key for r in recs], dtype=np.int64)
        tok_ptr, toks = _csr([r.value_tokens for r in recs])
        return ent_ptr, keys, tok_ptr, toks

    def nbr_position(self, e: int, x: int) -> int:
        """Offset of ``x`` in the flattened neighbor list of ``e``, or -1."""
        indptr, flat = self.nbr_csr
        seg = flat[indptr[e]:indptr[e + 1]]
        j = int(np.searchsorted(seg, x))
        return int(indptr[e]) + j if j < seg.size and seg[j] == x else -1

    # sidecar file

    def save(self, path) -> None:
        recs = [r for lst in self.entity_attrs for r in lst]
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQQQ", VERSION, len(self.neighborhoods), len(self.relation_types), len(recs)))
            d = self.digest.encode("ascii")
            fh.write(struct.pack("<I", len(d)) + d)
            for ids in self.neighborhoods:
                _put_ids(fh, ids)
            for ids in self.relation_types:
                _put_ids(fh, ids)
            for r in recs:
                fh.write(struct.pack("<qq", r.entity, r.key))
                _put_ids(fh, r.value_tokens)

    @classmethod
    def load(cls, path) -> "ContextCache":
        with open(path, "rb") as fh:
            if fh.read(4) != MAGIC:
                raise ValueError(f"{path}: not a context cache file")
            version, n, m, n_rec = struct.unpack("<IQQQ", fh.read(28))
            if version != VERSION:
                raise ValueError(f"{path}: unsupported cache version {version}")
            (dl,) = struct.unpack("<I", fh.read(4))
            digest = fh.read(dl).decode("ascii")
            nbrs = [_get_ids(fh) for _ in range(n)]
            rtypes = [_get_ids(fh) for _ in range(m)]
            attrs: list[list[AttributeRecord]] = [[] for _ in range(n)]
            for _ in range(n_rec):
                e, k = struct.unpack("<qq", fh.read(16))
                attrs[e].append(AttributeRecord(e, k, tuple(_get_ids(fh).tolist())))
        return cls(nbrs, attrs, rtypes, digest)


def context_digest(store: MultiGraphStore, walks_per_node: int = 50, walk_length: int = 3, seed: int = 0,
                   cap: int | None = 512) -> str:
    """Fingerprint of everything a cache depends on: vocabulary, triple set
    and walk parameters."""
    h = hashlib.sha256(store.vocab.digest().encode("ascii"))
    t = store.triples
    t = t[np.lexsort((t[:, 2], t[:, 1], t[:, 0]))]
    h.update(np.ascontiguousarray(t, dtype="<i8").tobytes())
    h.update(f"{walks_per_node}/{walk_length}/{seed}/{cap}".encode("ascii"))
    return h.hexdigest()


def _put_ids(fh, ids) -> None:
    a = np.asarray(ids, dtype="<i8")
    fh.write(struct.pack("<Q", a.size))
    fh.write(a.tobytes())


def _get_ids(fh) -> np.ndarray:
    (k,) = struct.unpack("<Q", fh.read(8))
    return np.frombuffer(fh.read(8 * k), dtype="<i8").astype(np.int64)


def load_or_build(path, store: MultiGraphStore, **kw) -> ContextCache:
    """Reuse the sidecar at ``path`` when it was built from the same
    vocabulary, triples and walk parameters; rebuild it otherwise."""
    p = Path(path) if path else None
    if p is not None and p.exists():
        cache = ContextCache.load(p)
        if cache.digest == context_digest(store, **kw):
            return cache
    cache = ContextCache.build(store, **kw)
    if p is not None:
        cache.save(p)
    return cache
