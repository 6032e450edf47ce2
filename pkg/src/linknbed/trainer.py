"""Negative sampling, relational and linkage hinge losses, the weighted
multi-task objective and the mini-batch Adam training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .context import ContextCache
from .model import ParamSet, backward, forward
from .numerics import AdamState, GradCheckReport, SparseRows, adam_step, decay_rows, finite_diff_check, rng_stream
from .store import LinkageLabelSet, MultiGraphStore

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    pass


@dataclass
class TrainConfig:
    C: int = 50                 # corrupted triples per training triple
    Z: int = 20                 # negative labels per labeled endpoint
    margin: float = 1.0
    b: float = 0.6              # weight of the relational task
    lam: float = 0.0            # L2 weight
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.95      # per-epoch multiplier
    batch_size: int = 2000
    epochs: int = 5
    corrupt_mode: str = "both"
    retry_rounds: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.C < 0 or self.Z < 0:
            raise ValueError("C and Z must be >= 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must lie in [0, 1], got {self.b}")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.corrupt_mode not in ("head", "tail", "both"):
            raise ValueError(f"corrupt_mode must be head, tail or both, got {self.corrupt_mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------

def sample_negatives_batch(triples: np.ndarray, store: MultiGraphStore, C: int, corrupt_mode: str,
                           rng: np.random.Generator, retry_rounds: int = 50):
    """``C`` corruptions per triple by uniform entity replacement.

    A replacement must differ from both endpoints and the corrupted triple
    must not be observed.  Slots still invalid after ``retry_rounds``
    redraws are dropped.  Returns ``(corrupted (K, 3), owner (K,), shortfall)``.
    """
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    B = t.shape[0]
    if C == 0 or B == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64), 0
    n = store.n_entities
    owner = np.repeat(np.arange(B), C)
    base = t[owner]
    if corrupt_mode == "head":
        head = np.ones(owner.size, dtype=bool)
    elif corrupt_mode == "tail":
        head = np.zeros(owner.size, dtype=bool)
    else:
        head = rng.random(owner.size) < 0.5
    out = base.copy()
    todo = np.arange(owner.size)
    for _ in range(retry_rounds):
        cand = rng.integers(n, size=todo.size)
        rows = base[todo].copy()
        h = head[todo]
        rows[h, 0] = cand[h]
        rows[~h, 2] = cand[~h]
        ok = (cand != base[todo, 0]) & (cand != base[todo, 2])
        ok[ok] = ~store.contains_many(rows[ok])
        out[todo[ok]] = rows[ok]
        todo = todo[~ok]
        if todo.size == 0:
            break
    keep = np.ones(owner.size, dtype=bool)
    keep[todo] = False
    if todo.size:
        log.warning("negative sampling fell short by %d of %d", todo.size, owner.size)
    return out[keep], owner[keep], int(todo.size)


def sample_negative_triples(triple, store: MultiGraphStore, C: int, corrupt_mode: str,
                            rng: np.random.Generator, retry_rounds: int = 50):
    """Corruptions of one triple; returns ``(list of triples, shortfall)``."""
    out, _, short = sample_negatives_batch(np.asarray([triple]), store, C, corrupt_mode, rng, retry_rounds)
    return [tuple(int(x) for x in row) for row in out], short


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def relational_loss(pos_score: float, neg_scores, margin: float = 1.0) -> float:
    neg = np.asarray(neg_scores, dtype=np.float64)
    return float(np.maximum(0.0, margin - pos_score + neg).sum())


@dataclass
class BatchPlan:
    """Everything scored for one mini-batch and how the scores pair up.

    ``triples`` are the distinct scoring jobs; each hinge term is
    ``weight * max(0, margin - g[pos] + g[neg])``.
    """
    triples: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    weight: np.ndarray
    task: np.ndarray          # 0 relational, 1 linkage
    n_items: int
    shortfall: int = 0


class _PlanBuilder:
    def __init__(self):
        self.rows: list[tuple[int, int, int]] = []
        self.pos: list[int] = []
        self.neg: list[int] = []
        self.weight: list[float] = []
        self.task: list[int] = []

    def job(self, t) -> int:
        self.rows.append(tuple(int(x) for x in t))
        return len(self.rows) - 1

    def hinge(self, p: int, n: int, w: float, task: int):
        self.pos.append(p)
        self.neg.append(n)
        self.weight.append(w)
        self.task.append(task)


def linkage_jobs(builder: _PlanBuilder, triple, pos_job: int, labels: LinkageLabelSet, Z: int,
                 weight: float, rng: np.random.Generator) -> None:
    """Linkage hinge terms for every labeled endpoint of ``triple``.

    The positive is the triple with the endpoint replaced by its partner, or
    the original triple when the endpoint has no positive partner; the
    negatives replace it by up to ``Z`` of its negative labels.
    """
    s, r, o = (int(x) for x in triple)
    for slot, e in ((0, s), (2, o)):
        negs = labels.negatives.get(e, ())
        if not negs or Z == 0:
            continue
        partner = labels.positives.get(e)
        if partner is not None:
            t = [s, r, o]
            t[slot] = partner
            p = builder.job(t)
        else:
            p = pos_job
        pick = negs if len(negs) <= Z else [negs[i] for i in sorted(rng.choice(len(negs), Z, replace=False))]
        for c in pick:
            t = [s, r, o]
            t[slot] = c
            builder.hinge(p, builder.job(t), weight, 1)


def linkage_loss(triple, labels: LinkageLabelSet, params: ParamSet, cache: ContextCache, margin: float = 1.0,
                 Z: int = 20, rng: np.random.Generator | None = None) -> float:
    rng = rng or rng_stream(0, "linkage-loss")
    b = _PlanBuilder()
    p = b.job(triple)
    linkage_jobs(b, triple, p, labels, Z, 1.0, rng)
    if not b.pos:
        return 0.0
    g, _ = forward(params, cache, np.asarray(b.rows))
    return float(np.maximum(0.0, margin - g[b.pos] + g[b.neg]).sum())


def build_plan(batch: np.ndarray, store: MultiGraphStore, labels: LinkageLabelSet | None, cfg: TrainConfig,
               rng: np.random.Generator) -> BatchPlan:
    """Scoring jobs for one mini-batch, following the per-triple structure:
    the positive, its C corruptions, and the linkage substitutions."""
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    b = _PlanBuilder()
    use_rel = cfg.b > 0 and cfg.C > 0
    use_lab = cfg.b < 1 and labels is not None
    short = 0
    if use_rel:
        corr, owner, short = sample_negatives_batch(batch, store, cfg.C, cfg.corrupt_mode, rng, cfg.retry_rounds)
        per = np.bincount(owner, minlength=batch.shape[0])
        starts = np.cumsum(per) - per
    for i, t in enumerate(batch):
        p = b.job(t)
        if use_rel:
            for row in corr[starts[i]:starts[i] + per[i]]:
                b.hinge(p, b.job(row), cfg.b, 0)
        if use_lab:
            linkage_jobs(b, t, p, labels, cfg.Z, 1.0 - cfg.b, rng)
    rows = np.asarray(b.rows, dtype=np.int64).reshape(-1, 3)
    return BatchPlan(rows, np.asarray(b.pos, dtype=np.int64), np.asarray(b.neg, dtype=np.int64),
                     np.asarray(b.weight, dtype=np.float64), np.asarray(b.task, dtype=np.int64),
                     batch.shape[0], short)


def plan_loss(plan: BatchPlan, params: ParamSet, cache: ContextCache, cfg: TrainConfig,
              with_grad: bool = True, reg_grad: bool = True) -> tuple[float, dict[str, SparseRows], dict]:
    """Objective of one plan: weighted hinge sum plus ``lam`` times the squared
    norm of the parameter rows the batch touches.

    With ``reg_grad`` off the returned gradient covers the hinge terms only;
    the trainer then applies the penalty as row decay after the Adam step.
    """
    if plan.triples.shape[0] == 0:
        return 0.0, {}, {"rel": 0.0, "lab": 0.0, "reg": 0.0, "terms": np.zeros(0)}
    g, tape = forward(params, cache, plan.triples)
    h = cfg.margin - g[plan.pos] + g[plan.neg]
    active = h > 0
    terms = plan.weight * np.maximum(h, 0.0)  # NaN propagates to the abort check
    info = {"rel": float(terms[plan.task == 0].sum()), "lab": float(terms[plan.task == 1].sum())}
    loss = info["rel"] + info["lab"]
    grads: dict[str, SparseRows] = {}
    if with_grad or cfg.lam:
        dg = np.zeros(g.size)
        w = plan.weight * active
        np.add.at(dg, plan.neg, w)
        np.add.at(dg, plan.pos, -w)
        grads = backward(tape, dg, params, cache)
    reg = 0.0
    reg_terms = []
    if cfg.lam:
        for name, sr in grads.items():
            rows = params[name][sr.rows].astype(np.float64)
            reg_terms.append(cfg.lam * (rows * rows).ravel())
            reg += float(np.sum(rows * rows))
            if with_grad and reg_grad:
                sr.values = sr.values + 2.0 * cfg.lam * rows
        reg *= cfg.lam
    info["reg"] = reg
    info["terms"] = np.concatenate([terms] + reg_terms)
    return loss + reg, grads, info


def batch_loss(batch, store: MultiGraphStore, labels: LinkageLabelSet | None, params: ParamSet,
               cache: ContextCache, cfg: TrainConfig, rng: np.random.Generator | None = None):
    """Multi-task objective of one mini-batch; returns ``(loss, grads, plan)``."""
    rng = rng or rng_stream(cfg.seed, "batch")
    plan = build_plan(batch, store, labels, cfg, rng)
    loss, grads, _ = plan_loss(plan, params, cache, cfg)
    return loss, grads, plan


def objective_gradcheck(batch, store: MultiGraphStore, labels: LinkageLabelSet | None, params: ParamSet,
                        cache: ContextCache, cfg: TrainConfig, probe_count: int = 40, h: float = 1e-5,
                        tolerance: float = 1e-4, seed: int = 0) -> GradCheckReport:
    """Central-difference check of the full batch objective.

    The plan (corruptions and label draws) is fixed once so that the loss is
    a deterministic function of the parameters.  Run it on float64
    parameters: a float32 table cannot resolve the perturbation.
    """
    plan = build_plan(batch, store, None if cfg.b >= 1.0 else labels, cfg, rng_stream(seed, "gradcheck-plan"))

    def loss_fn(_arrays):
        _, grads, info = plan_loss(plan, params, cache, cfg)
        return info["terms"], grads

    return finite_diff_check(loss_fn, params.arrays, probe_count, h, tolerance, seed)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    epoch: int
    batch: int
    loss: float       # mean per training triple in the batch
    wall_ms: float


@dataclass
class TrainResult:
    params: ParamSet
    adam: AdamState
    trace: list[TraceRow] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    epochs_done: int = 0


def _norms(params: ParamSet) -> dict[str, float]:
    return {k: float(np.linalg.norm(a.astype(np.float64))) for k, a in params.arrays.items()}


def train(store: MultiGraphStore, train_triples: np.ndarray, labels: LinkageLabelSet | None,
          cache: ContextCache, params: ParamSet, cfg: TrainConfig, adam: AdamState | None = None,
          start_epoch: int = 0, on_epoch: Callable[[int, TrainResult], None] | None = None) -> TrainResult:
    """Mini-batch training.  ``store`` provides the observed-triple filter for
    corruptions; ``train_triples`` are the triples iterated over.  With
    ``b == 1`` the labels are never consulted."""
    if cfg.b >= 1.0:
        labels = None
    adam = adam or AdamState.for_params(params.arrays, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                        epsilon=cfg.eps)
    res = TrainResult(params, adam, epochs_done=start_epoch)
    triples = np.asarray(train_triples, dtype=np.int64).reshape(-1, 3)
    for epoch in range(start_epoch, cfg.epochs):
        adam.lr = cfg.lr * cfg.lr_decay ** epoch
        rng = rng_stream(cfg.seed, "epoch", epoch)
        order = rng.permutation(triples.shape[0])
        means = []
        t_epoch = time.perf_counter()
        for bi, start in enumerate(range(0, triples.shape[0], cfg.batch_size)):
            t0 = time.perf_counter()
            batch = triples[order[start:start + cfg.batch_size]]
            plan = build_plan(batch, store, labels, cfg, rng)
            loss, grads, _ = plan_loss(plan, params, cache, cfg, reg_grad=False)
            if not math.isfinite(loss) or any(not np.all(np.isfinite(g.values)) for g in grads.values()):
                raise NumericalAbort(f"non-finite loss in epoch {epoch} batch {bi}; "
                                     f"parameter norms {_norms(params)}")
            adam_step(adam, params.arrays, grads)
            decay_rows(params.arrays, grads, 2.0 * adam.lr * cfg.lam)
            mean = loss / max(plan.n_items, 1)
            means.append(mean)
            res.trace.append(TraceRow(epoch, bi, mean, 1000.0 * (time.perf_counter() - t0)))
        res.epoch_means.append(float(np.mean(means)) if means else 0.0)
        res.epoch_seconds.append(time.perf_counter() - t_epoch)
        res.epochs_done = epoch + 1
        log.info("epoch %d mean batch loss %.5f", epoch, res.epoch_means[-1])
        if on_epoch is not None:
            on_epoch(epoch, res)
    return res


def write_trace(rows: list[TraceRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,batch,loss,wall_ms\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.batch},{r.loss:.9g},{r.wall_ms:.3f}\n")
