"""Three-layer encoder and relational scorer with an exact backward pass.

Atomic layer: entity, relation and type rows pass through ``f``; an
attribute record embeds as ``f(key row + mean of its value-token rows)``.
Context layer: neighborhood (per triple, without the other endpoint),
attribute and relation-type contexts, aggregated by mean/max or by softmax
attention over one learned scalar per context member.  Representation
layer: ``z_e = s(W1 v_e + W2 N_c(e) + W3 A_c(e))`` and
``z_r = s(W4 v_r + W5 T_c(r))``.  Score: ``sigmoid(z_r . (z_s * z_o))``.

``forward`` evaluates a whole array of triples at once and returns a tape;
``backward`` turns per-triple score gradients into row-sparse parameter
gradients.  All arithmetic runs in float64 whatever the storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .context import ContextCache
from .numerics import ContractViolation, SparseRows, activation, rng_stream, sigmoid
from .store import AttributeRecord

VARIANTS: dict[str, dict[str, bool]] = {
    "embed_only": dict(use_embed=True, use_nhbrs=False, use_attrs=False, use_types=False, use_attention=False),
    "attr_only": dict(use_embed=False, use_nhbrs=False, use_attrs=True, use_types=False, use_attention=False),
    "nhbr_only": dict(use_embed=False, use_nhbrs=True, use_attrs=False, use_types=False, use_attention=False),
    "embed_attr": dict(use_embed=True, use_nhbrs=False, use_attrs=True, use_types=False, use_attention=False),
    "embed_nhbr": dict(use_embed=True, use_nhbrs=True, use_attrs=False, use_types=False, use_attention=False),
    "embed_all": dict(use_embed=True, use_nhbrs=True, use_attrs=True, use_types=True, use_attention=False),
    "embed_all_attention": dict(use_embed=True, use_nhbrs=True, use_attrs=True, use_types=True,
                                use_attention=True),
}


@dataclass
class ModelConfig:
    d: int = 256          # entity / representation size
    k: int = 64           # relation embedding size
    q: int = 16           # type embedding size
    y: int = 16           # attribute embedding size
    use_embed: bool = True
    use_nhbrs: bool = True
    use_attrs: bool = True
    use_types: bool = True
    use_attention: bool = False
    atomic_activation: str = "relu"
    repr_activation: str = "tanh"
    attr_aggregator: str = "max"
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("d", "k", "q", "y"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"dimension {name} must be >= 1")
        if self.attr_aggregator not in ("max", "mean"):
            raise ContractViolation(f"attr_aggregator must be 'max' or 'mean', got {self.attr_aggregator!r}")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        return cls(**{**VARIANTS[variant], **kw})

    @property
    def variant(self) -> str | None:
        flags = {k: getattr(self, k) for k in VARIANTS["embed_only"]}
        for name, f in VARIANTS.items():
            if f == flags:
                return name
        return None


@dataclass
class ParamSet:
    """Named parameter arrays.

    ``ent`` (n x d), ``rel`` (m x k), ``typ`` (z x q), ``key`` (u x y),
    ``val`` (v x y) hold one row per id; ``W1``..``W5`` are the
    representation matrices; ``th_nbr``/``th_attr``/``th_type`` are the
    attention scalars per neighbor entity, attribute key and type, present
    only with attention on.
    """
    arrays: dict[str, np.ndarray]
    config: ModelConfig

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @classmethod
    def init(cls, config: ModelConfig, n: int, m: int, z: int, u: int, v: int, seed: int = 0) -> "ParamSet":
        d, k, q, y = config.d, config.k, config.q, config.y
        shapes = {"ent": (n, d), "rel": (m, k), "typ": (z, q), "key": (u, y), "val": (v, y),
                  "W1": (d, d), "W2": (d, d), "W3": (d, y), "W4": (d, k), "W5": (d, q)}
        arrays = {}
        for name, shape in shapes.items():
            bound = 0.5 / np.sqrt(shape[1])
            arrays[name] = rng_stream(seed, "init", list(shapes).index(name)).uniform(
                -bound, bound, size=shape).astype(config.dtype)
        if config.use_attention:
            arrays["th_nbr"] = np.zeros(n, dtype=config.dtype)
            arrays["th_attr"] = np.zeros(u, dtype=config.dtype)
            arrays["th_type"] = np.zeros(z, dtype=config.dtype)
        return cls(arrays, config)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: a.astype(dtype) for k, a in self.arrays.items()},
                        replace(self.config, dtype=np.dtype(dtype).name))

    def copy(self) -> "ParamSet":
        return ParamSet({k: a.copy() for k, a in self.arrays.items()}, self.config)

    @property
    def allocated(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def param_count(n_e: int, h_e: int, n_r: int = 0, h_r: int = 0, n_t: int = 0, h_t: int = 0,
                n_k: int = 0, h_k: int = 0, n_v: int = 0, h_v: int = 0, h_b: int = 0) -> int:
    """Parameter complexity ``H_a * (H_b + 1)`` with
    ``H_a = 2 N_e H_e + N_r H_r + N_t H_t + N_k H_k + N_v H_v``."""
    h_a = 2 * n_e * h_e + n_r * h_r + n_t * h_t + n_k * h_k + n_v * h_v
    return h_a * (h_b + 1)


# ---------------------------------------------------------------------------
# per-item operations
# ---------------------------------------------------------------------------

def atomic_embed(table: np.ndarray, i: int, f: str = "relu") -> np.ndarray:
    if not 0 <= i < table.shape[0]:
        raise ContractViolation(f"id {i} outside table of {table.shape[0]} rows")
    return activation(f)[0](table[i].astype(np.float64))


def attribute_embed(rec: AttributeRecord, key: np.ndarray, val: np.ndarray, f: str = "relu") -> np.ndarray:
    toks = np.asarray(rec.value_tokens, dtype=np.int64)
    pre = key[rec.key].astype(np.float64) + val[toks].astype(np.float64).mean(axis=0)
    return activation(f)[0](pre)


def aggregate_context(members, member_ids=None, theta: np.ndarray | None = None,
                      aggregator: str = "mean", dim: int | None = None) -> np.ndarray:
    """Mean / max of ``members``, or their softmax(theta[member_ids])-weighted
    sum when ``theta`` is given.  No members gives a zero vector of ``dim``."""
    if len(members) == 0:
        if dim is None:
            raise ContractViolation("empty context needs an explicit dim")
        return np.zeros(dim)
    lens = {len(m) for m in members}
    if len(lens) != 1:
        raise ContractViolation(f"context members of mixed lengths {sorted(lens)}")
    M = np.asarray(members, dtype=np.float64)
    if theta is not None:
        th = np.asarray(theta, dtype=np.float64)[np.asarray(member_ids)]
        w = np.exp(th - th.max())
        return (w / w.sum()) @ M
    if aggregator == "max":
        return M.max(axis=0)
    return M.mean(axis=0)


def neighborhood_context(e: int, other: int, cache: ContextCache, params: ParamSet) -> np.ndarray:
    cfg = params.config
    ids = [int(x) for x in cache.neighborhoods[e] if x != other]
    vecs = [atomic_embed(params["ent"], x, cfg.atomic_activation) for x in ids]
    th = params["th_nbr"] if cfg.use_attention else None
    return aggregate_context(vecs, ids, th, "mean", cfg.d)


def attribute_context(e: int, cache: ContextCache, params: ParamSet) -> np.ndarray:
    cfg = params.config
    recs = cache.entity_attrs[e]
    vecs = [attribute_embed(r, params["key"], params["val"], cfg.atomic_activation) for r in recs]
    th = params["th_attr"] if cfg.use_attention else None
    return aggregate_context(vecs, [r.key for r in recs], th, cfg.attr_aggregator, cfg.y)


def type_context(r: int, cache: ContextCache, params: ParamSet) -> np.ndarray:
    cfg = params.config
    ids = [int(t) for t in cache.relation_types[r]]
    vecs = [atomic_embed(params["typ"], t, cfg.atomic_activation) for t in ids]
    th = params["th_type"] if cfg.use_attention else None
    return aggregate_context(vecs, ids, th, "mean", cfg.q)


def represent(triple, params: ParamSet, cache: ContextCache):
    """``(z_s, z_o, z_r)`` for one triple through the per-item path."""
    s, r, o = (int(x) for x in triple)
    cfg = params.config
    sg = activation(cfg.repr_activation)[0]
    W = {k: params[k].astype(np.float64) for k in ("W1", "W2", "W3", "W4", "W5")}

    def ent(e, other):
        h = np.zeros(cfg.d)
        if cfg.use_embed:
            h += W["W1"] @ atomic_embed(params["ent"], e, cfg.atomic_activation)
        if cfg.use_nhbrs:
            h += W["W2"] @ neighborhood_context(e, other, cache, params)
        if cfg.use_attrs:
            h += W["W3"] @ attribute_context(e, cache, params)
        return sg(h)

    hr = W["W4"] @ atomic_embed(params["rel"], r, cfg.atomic_activation)
    if cfg.use_types:
        hr = hr + W["W5"] @ type_context(r, cache, params)
    return ent(s, o), ent(o, s), sg(hr)


def score(z_s, z_r, z_o) -> float:
    z_s, z_r, z_o = (np.asarray(v, dtype=np.float64) for v in (z_s, z_r, z_o))
    if not z_s.shape == z_r.shape == z_o.shape:
        raise ContractViolation(f"score vectors differ in shape: {z_s.shape}, {z_r.shape}, {z_o.shape}")
    return float(sigmoid(np.dot(z_r, z_s * z_o)))


# ---------------------------------------------------------------------------
# batched forward / backward
# ---------------------------------------------------------------------------

def _segments(indptr: np.ndarray, flat: np.ndarray, owners: np.ndarray):
    """Members of each owner: (member ids, owner slot per member, flat offsets)."""
    starts, ends = indptr[owners], indptr[owners + 1]
    lens = ends - starts
    slot = np.repeat(np.arange(owners.size), lens)
    offs = np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens) + np.repeat(starts, lens)
    return flat[offs], slot, offs


def _segment_sum(vals: np.ndarray, slot: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + vals.shape[1:], dtype=np.float64)
    np.add.at(out, slot, vals)
    return out


def _segment_max_shift(th: np.ndarray, slot: np.ndarray, n: int) -> np.ndarray:
    c = np.full(n, -np.inf)
    np.maximum.at(c, slot, th)
    c[~np.isfinite(c)] = 0.0
    return c


@dataclass
class _Weighted:
    """Mean or attention aggregation over CSR members (owner-level)."""
    slot: np.ndarray
    ids: np.ndarray         # member ids (for theta)
    vec: np.ndarray         # member vectors
    w: np.ndarray           # unnormalized member weights
    num: np.ndarray         # sum w * vec per owner
    den: np.ndarray         # sum w per owner
    shift: np.ndarray       # per-owner max theta


def _weighted(slot, ids, vec, theta, n_owner) -> _Weighted:
    if theta is not None:
        th = theta[ids].astype(np.float64)
        shift = _segment_max_shift(th, slot, n_owner)
        w = np.exp(th - shift[slot])
    else:
        shift = np.zeros(n_owner)
        w = np.ones(ids.size)
    num = _segment_sum(w[:, None] * vec, slot, n_owner)
    den = _segment_sum(w, slot, n_owner)
    return _Weighted(slot, ids, vec, w, num, den, shift)


def _weighted_out(agg: _Weighted) -> np.ndarray:
    out = np.zeros_like(agg.num)
    ok = agg.den > 0
    out[ok] = agg.num[ok] / agg.den[ok, None]
    return out


def _weighted_backward(agg: _Weighted, out: np.ndarray, dout: np.ndarray):
    """Gradients w.r.t. member vectors and member thetas."""
    den = np.where(agg.den > 0, agg.den, 1.0)
    g = dout / den[:, None]
    dvec = agg.w[:, None] * g[agg.slot]
    dw = np.einsum("ij,ij->i", agg.vec - out[agg.slot], g[agg.slot])
    return dvec, agg.w * dw


@dataclass
class ForwardTape:
    s: np.ndarray
    r: np.ndarray
    o: np.ndarray
    scores: np.ndarray
    logits: np.ndarray
    z_ent: np.ndarray       # (2M, d): subject rows then object rows
    z_rel: np.ndarray       # (M, d)
    ent: dict = field(default_factory=dict)
    rel: dict = field(default_factory=dict)

    @property
    def z_s(self):
        return self.z_ent[: self.s.size]

    @property
    def z_o(self):
        return self.z_ent[self.s.size:]


def encode_entities(params: ParamSet, cache: ContextCache, ids: np.ndarray, others: np.ndarray):
    """Entity representations for occurrences ``ids``, each with the other
    endpoint ``others`` (-1 for none) removed from its neighborhood."""
    cfg = params.config
    f, fp = activation(cfg.atomic_activation)
    sg, _ = activation(cfg.repr_activation)
    A = params.arrays
    ids = np.asarray(ids, dtype=np.int64)
    others = np.asarray(others, dtype=np.int64)
    U, inv = np.unique(ids, return_inverse=True)
    nU = U.size
    t: dict = {"U": U, "inv": inv, "ids": ids, "others": others}
    d = cfg.d

    hU = np.zeros((nU, d))
    if cfg.use_embed:
        pre = A["ent"][U].astype(np.float64)
        t["v_pre"], t["v"] = pre, f(pre)
        hU += t["v"] @ A["W1"].astype(np.float64).T
    if cfg.use_attrs:
        t["attr"] = _attr_forward(params, cache, U)
        hU += t["attr"]["out"] @ A["W3"].astype(np.float64).T
    pre = hU[inv]
    if cfg.use_nhbrs:
        t["nbr"] = _nbr_forward(params, cache, U, inv, ids, others)
        pre = pre + t["nbr"]["out"] @ A["W2"].astype(np.float64).T
    t["pre"] = pre
    return sg(pre), t


def _nbr_forward(params, cache, U, inv, ids, others):
    cfg = params.config
    f, _ = activation(cfg.atomic_activation)
    A = params.arrays
    n = A["ent"].shape[0]
    indptr, flat = cache.nbr_csr
    mem, slot, offs = _segments(indptr, flat, U)
    mem_pre = A["ent"][mem].astype(np.float64)
    theta = A["th_nbr"] if cfg.use_attention else None
    agg = _weighted(slot, mem, f(mem_pre), theta, U.size)

    # exclusion of the other endpoint, located by searching owner*n + member keys
    deg = np.diff(indptr)
    owner = np.repeat(np.arange(len(cache.neighborhoods)), deg)
    keys = owner * n + flat
    q = ids * n + np.where(others >= 0, others, 0)
    pos = np.searchsorted(keys, q)
    hit = (others >= 0) & (pos < keys.size)
    hit[hit] = keys[pos[hit]] == q[hit]
    x = np.where(hit, others, 0)
    ex_pre = A["ent"][x].astype(np.float64)
    ex_v = f(ex_pre) * hit[:, None]
    if theta is not None:
        ex_w = np.exp(theta[x].astype(np.float64) - agg.shift[inv]) * hit
    else:
        ex_w = hit.astype(np.float64)
    num = agg.num[inv] - ex_w[:, None] * ex_v
    den = agg.den[inv] - ex_w
    live = (deg[ids] - hit) > 0
    out = np.zeros_like(num)
    out[live] = num[live] / den[live, None]
    return {"mem": mem, "mem_pre": mem_pre, "agg": agg, "hit": hit, "x": x, "ex_pre": ex_pre,
            "ex_v": ex_v, "ex_w": ex_w, "den": den, "live": live, "out": out}


def _attr_forward(params, cache, U):
    cfg = params.config
    f, _ = activation(cfg.atomic_activation)
    A = params.arrays
    ent_ptr, rec_key, tok_ptr, toks = cache.attr_csr
    recs = np.arange(rec_key.size, dtype=np.int64)
    rec, slot, _ = _segments(ent_ptr, recs, U)
    tok, tslot, _ = _segments(tok_ptr, toks, rec)
    ntok = np.diff(tok_ptr)[rec].astype(np.float64)
    valsum = _segment_sum(A["val"][tok].astype(np.float64), tslot, rec.size)
    pre = A["key"][rec_key[rec]].astype(np.float64) + valsum / np.maximum(ntok, 1.0)[:, None]
    a = f(pre)
    t = {"rec": rec, "keys": rec_key[rec], "slot": slot, "tok": tok, "tslot": tslot, "ntok": ntok,
         "pre": pre}
    y = cfg.y
    if cfg.use_attention or cfg.attr_aggregator == "mean":
        theta = A["th_attr"] if cfg.use_attention else None
        agg = _weighted(slot, rec_key[rec], a, theta, U.size)
        t["agg"] = agg
        t["out"] = _weighted_out(agg)
    else:
        counts = np.bincount(slot, minlength=U.size)
        width = int(counts.max()) if counts.size else 0
        out = np.zeros((U.size, y))
        arg = np.full((U.size, y), -1, dtype=np.int64)
        if width:
            starts = np.cumsum(counts) - counts
            col = np.arange(rec.size) - starts[slot]
            pad = np.full((U.size, width, y), -np.inf)
            pad[slot, col] = a
            j = pad.argmax(axis=1)                       # first max wins ties
            has = counts > 0
            out[has] = np.take_along_axis(pad, j[:, None, :], axis=1)[:, 0][has]
            arg[has] = (starts[:, None] + j)[has]
        t["a"] = a
        t["arg"] = arg
        t["out"] = out
    return t


def encode_relations(params: ParamSet, cache: ContextCache, rels: np.ndarray):
    cfg = params.config
    f, _ = activation(cfg.atomic_activation)
    sg, _ = activation(cfg.repr_activation)
    A = params.arrays
    R, inv = np.unique(np.asarray(rels, dtype=np.int64), return_inverse=True)
    v_pre = A["rel"][R].astype(np.float64)
    v = f(v_pre)
    h = v @ A["W4"].astype(np.float64).T
    t = {"R": R, "inv": inv, "v_pre": v_pre, "v": v}
    if cfg.use_types:
        indptr, flat = cache.type_csr
        mem, slot, _ = _segments(indptr, flat, R)
        mem_pre = A["typ"][mem].astype(np.float64)
        theta = A["th_type"] if cfg.use_attention else None
        agg = _weighted(slot, mem, f(mem_pre), theta, R.size)
        out = _weighted_out(agg)
        t.update(mem=mem, mem_pre=mem_pre, agg=agg, out=out)
        h = h + out @ A["W5"].astype(np.float64).T
    t["pre"] = h
    return sg(h)[inv], t


def forward(params: ParamSet, cache: ContextCache, triples) -> tuple[np.ndarray, ForwardTape]:
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    s, r, o = t[:, 0], t[:, 1], t[:, 2]
    z_ent, et = encode_entities(params, cache, np.concatenate([s, o]), np.concatenate([o, s]))
    z_rel, rt = encode_relations(params, cache, r)
    M = s.size
    logits = np.einsum("ij,ij->i", z_rel, z_ent[:M] * z_ent[M:])
    g = sigmoid(logits) if M else np.zeros(0)
    g = np.atleast_1d(g)
    return g, ForwardTape(s, r, o, g, logits, z_ent, z_rel, et, rt)


def score_triples(params: ParamSet, cache: ContextCache, triples) -> np.ndarray:
    return forward(params, cache, triples)[0]


class _Grads:
    def __init__(self):
        self.parts: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}

    def add(self, name, rows, vals):
        if len(rows):
            self.parts.setdefault(name, []).append((np.asarray(rows, dtype=np.int64), vals))

    def dense(self, name, grad):
        self.add(name, np.arange(grad.shape[0]), grad)

    def result(self) -> dict[str, SparseRows]:
        out = {}
        for name, parts in self.parts.items():
            sr = SparseRows.scatter(np.concatenate([p[0] for p in parts]),
                                    np.concatenate([p[1] for p in parts]))
            flat = sr.values.reshape(sr.rows.size, -1)
            nz = np.any(flat != 0.0, axis=1)
            if nz.any():
                out[name] = SparseRows(sr.rows[nz], sr.values[nz])
        return out


def backward(tape: ForwardTape, dscores: np.ndarray, params: ParamSet, cache: ContextCache
             ) -> dict[str, SparseRows]:
    """Row-sparse gradients of ``sum(dscores * scores)``.  Rows whose
    gradient is exactly zero are left out."""
    cfg = params.config
    A = params.arrays
    _, fp = activation(cfg.atomic_activation)
    _, sgp = activation(cfg.repr_activation)
    G = _Grads()
    dscores = np.asarray(dscores, dtype=np.float64)
    if not np.any(dscores):
        return {}
    g = tape.scores
    dlogit = dscores * g * (1.0 - g)
    M = tape.s.size
    zs, zo, zr = tape.z_ent[:M], tape.z_ent[M:], tape.z_rel
    dzr = dlogit[:, None] * zs * zo
    dz_ent = np.concatenate([dlogit[:, None] * zr * zo, dlogit[:, None] * zr * zs])

    # entities
    et = tape.ent
    U, inv = et["U"], et["inv"]
    dpre = dz_ent * sgp(et["pre"])
    dhU = _segment_sum(dpre, inv, U.size)
    if cfg.use_embed:
        G.dense("W1", dhU.T @ et["v"])
        dv = dhU @ A["W1"].astype(np.float64)
        G.add("ent", U, dv * fp(et["v_pre"]))
    if cfg.use_attrs:
        at = et["attr"]
        G.dense("W3", dhU.T @ at["out"])
        _attr_backward(at, dhU @ A["W3"].astype(np.float64), params, G)
    if cfg.use_nhbrs:
        nb = et["nbr"]
        G.dense("W2", dpre.T @ nb["out"])
        _nbr_backward(nb, dpre @ A["W2"].astype(np.float64), inv, U.size, params, G)

    # relations
    rt = tape.rel
    dzR = _segment_sum(dzr, rt["inv"], rt["R"].size)
    dpr = dzR * sgp(rt["pre"])
    G.dense("W4", dpr.T @ rt["v"])
    G.add("rel", rt["R"], (dpr @ A["W4"].astype(np.float64)) * fp(rt["v_pre"]))
    if cfg.use_types:
        G.dense("W5", dpr.T @ rt["out"])
        dT = dpr @ A["W5"].astype(np.float64)
        dvec, dth = _weighted_backward(rt["agg"], rt["out"], dT)
        G.add("typ", rt["mem"], dvec * fp(rt["mem_pre"]))
        if cfg.use_attention:
            G.add("th_type", rt["mem"], dth)
    return G.result()


def _nbr_backward(nb, dout, inv, nU, params, G):
    cfg = params.config
    _, fp = activation(cfg.atomic_activation)
    live = nb["live"]
    den = np.where(live, nb["den"], 1.0)
    dnum = np.where(live[:, None], dout / den[:, None], 0.0)
    dden = -np.einsum("ij,ij->i", dnum, nb["out"])
    agg = nb["agg"]
    Gn = _segment_sum(dnum, inv, nU)
    Gd = _segment_sum(dden, inv, nU)
    dvec = agg.w[:, None] * Gn[agg.slot]
    G.add("ent", nb["mem"], dvec * fp(nb["mem_pre"]))
    hit = nb["hit"] & live
    G.add("ent", nb["x"][hit], (-nb["ex_w"][hit, None] * dnum[hit]) * fp(nb["ex_pre"][hit]))
    if cfg.use_attention:
        dw = np.einsum("ij,ij->i", agg.vec, Gn[agg.slot]) + Gd[agg.slot]
        G.add("th_nbr", agg.ids, agg.w * dw)
        dex_w = -(np.einsum("ij,ij->i", nb["ex_v"], dnum) + dden)
        G.add("th_nbr", nb["x"][hit], (nb["ex_w"] * dex_w)[hit])


def _attr_backward(at, dout, params, G):
    cfg = params.config
    _, fp = activation(cfg.atomic_activation)
    if "agg" in at:
        da, dth = _weighted_backward(at["agg"], at["out"], dout)
        if cfg.use_attention:
            G.add("th_attr", at["agg"].ids, dth)
    else:
        da = np.zeros_like(at["a"])
        arg = at["arg"]
        ok = arg >= 0
        rows, cols = np.nonzero(ok)
        np.add.at(da, (arg[rows, cols], cols), dout[rows, cols])
    dpre = da * fp(at["pre"])
    G.add("key", at["keys"], dpre)
    G.add("val", at["tok"], (dpre / np.maximum(at["ntok"], 1.0)[:, None])[at["tslot"]])
