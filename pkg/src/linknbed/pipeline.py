"""Run configuration and the load -> context -> train -> evaluate pipeline
shared by the command line and the acceptance tests."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, model_config_from
from .context import ContextCache, load_or_build
from .evaluate import (UndefinedVerdict, auprc, link_prediction_metrics, linkage_score,
                       second_stage_classifier_score, second_stage_classifier_train)
from .model import VARIANTS, ModelConfig, ParamSet
from .numerics import AdamState
from .store import DatasetSplit, LinkageLabelSet, MultiGraphStore, Vocab, load_graphs, split_dataset
from .trainer import TrainConfig, TrainResult, train, write_trace

SEED_ENV = "LINKNBED_SEED"


@dataclass
class RunConfig:
    # model
    variant: str = "embed_all"
    d: int = 256
    k: int = 64
    q: int = 16
    y: int = 16
    max_value_tokens: int = 512
    atomic_activation: str = "relu"
    repr_activation: str = "tanh"
    attr_aggregator: str = "max"
    dtype: str = "float32"
    # context
    walks_per_node: int = 50
    walk_length: int = 3
    nbr_cap: int = 512
    # training
    C: int = 50
    Z: int = 20
    margin: float = 1.0
    b: float = 0.6
    lam: float = 0.0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 0.95
    batch_size: int = 2000
    epochs: int = 5
    corrupt_mode: str = "both"
    seed: int = 0
    train_fraction: float = 0.6
    checkpoint_every: int = 1
    # evaluation
    unsupervised: bool = False
    both_sides: bool = False
    classifier_hidden: int = 64
    classifier_epochs: int = 300
    # paths
    triples: str = ""
    attributes: str = ""
    types: str = ""
    labels: str = ""
    cache: str = ""
    checkpoint_dir: str = "checkpoints"
    metrics_out: str = "metrics.json"
    trace_out: str = ""
    strict: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def model_config(self) -> ModelConfig:
        return model_config_from(self.as_dict())

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.as_dict().items() if k in names})

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(name: str, raw: str):
    """Parse a textual config value into the field's type."""
    if name not in _FIELD_TYPES:
        raise ValueError(f"unknown config key {name!r}")
    kind = _FIELD_TYPES[name]
    if kind in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ValueError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, val = (x.strip() for x in line.split("=", 1))
        out[key] = coerce(key, val)
    return out


def resolve_config(config_file=None, overrides: dict | None = None, env=None) -> RunConfig:
    """Defaults, then the config file, then ``LINKNBED_SEED``, then explicit
    command-line overrides; later layers win."""
    env = os.environ if env is None else env
    values: dict = {}
    if config_file:
        values.update(read_config_file(config_file))
    if env.get(SEED_ENV, "").strip():
        values["seed"] = coerce("seed", env[SEED_ENV])
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, v) if isinstance(v, str) else v
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

@dataclass
class Prepared:
    store: MultiGraphStore
    vocab: Vocab
    labels: LinkageLabelSet
    split: DatasetSplit
    cache: ContextCache


def prepare(cfg: RunConfig) -> Prepared:
    """Load the graphs, split them and build (or reuse) the context cache.

    Contexts come from the training triples only, so test triples never
    leak into neighborhoods.
    """
    if not cfg.triples:
        raise ValueError("no triples file configured")
    store, vocab, labels = load_graphs(cfg.triples, cfg.attributes or None, cfg.types or None,
                                       cfg.labels or None, strict=cfg.strict,
                                       max_value_tokens=cfg.max_value_tokens)
    split = split_dataset(store, labels, cfg.train_fraction, seed=cfg.seed)
    kw = dict(walks_per_node=cfg.walks_per_node, walk_length=cfg.walk_length, seed=cfg.seed, cap=cfg.nbr_cap)
    cache = load_or_build(cfg.cache or None, store.with_triples(split.train_triples), **kw)
    return Prepared(store, vocab, labels, split, cache)


def init_params(cfg: RunConfig, vocab: Vocab) -> ParamSet:
    return ParamSet.init(cfg.model_config(), **vocab.sizes, seed=cfg.seed)


def checkpoint_path(cfg: RunConfig, epoch: int | None = None) -> Path:
    name = "latest.lnbk" if epoch is None else f"epoch-{epoch:04d}.lnbk"
    return Path(cfg.checkpoint_dir) / name


def run_training(cfg: RunConfig, prep: Prepared, resume: Checkpoint | None = None,
                 on_epoch: Callable[[int, TrainResult], None] | None = None) -> tuple[TrainResult, Checkpoint]:
    """Train (or resume) and write checkpoints plus the loss trace."""
    digest = prep.vocab.digest()
    tc = cfg.train_config()
    if resume is not None:
        params, adam, start = resume.params, resume.adam, resume.epoch
    else:
        params, adam, start = init_params(cfg, prep.vocab), None, 0
    if adam is None:
        adam = AdamState.for_params(params.arrays, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2, epsilon=tc.eps)

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(cfg.as_dict(), digest, params, adam, cfg.seed, epoch)

    def hook(epoch: int, res: TrainResult):
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            snapshot(epoch + 1).save(checkpoint_path(cfg, epoch + 1))
        if on_epoch is not None:
            on_epoch(epoch, res)

    res = train(prep.store, prep.split.train_triples, prep.split.train_labels, prep.cache, params, tc,
                adam=adam, start_epoch=start, on_epoch=hook)
    final = snapshot(res.epochs_done)
    final.save(checkpoint_path(cfg))
    if cfg.trace_out:
        write_trace(res.trace, cfg.trace_out)
    return res, final


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def linkage_q_scores(pairs, store: MultiGraphStore, params: ParamSet, cache: ContextCache) -> np.ndarray:
    """Substitution score q per pair; NaN where the verdict is undefined."""
    out = np.empty(len(pairs))
    for i, (a, b) in enumerate(pairs):
        try:
            out[i] = linkage_score(a, b, store, params, cache).q
        except UndefinedVerdict:
            out[i] = np.nan
    return out


def evaluate_run(cfg: RunConfig, prep: Prepared, params: ParamSet,
                 unsup_params: ParamSet | None = None) -> dict:
    """Metrics document: link prediction per graph and linkage AUPRC.

    Supervised linkage ranks test pairs by ``-q``; pairs whose q is undefined
    rank last.  The unsupervised path trains the pair classifier on the
    training label pairs over ``unsup_params`` (``params`` if not given).
    """
    metrics: dict = {"config": cfg.as_dict()}
    test = prep.split.test_triples
    metrics["link_prediction"] = (link_prediction_metrics(test, prep.store, params, prep.cache, cfg.both_sides)
                                  if len(test) else {})
    pairs = prep.split.test_labels.pairs()
    link: dict = {"n_pairs": len(pairs)}
    if pairs and any(l for *_, l in pairs):
        lab = np.array([l for *_, l in pairs])
        if cfg.unsupervised:
            tr = prep.split.train_labels.pairs()
            clf = second_stage_classifier_train([(a, b) for a, b, _ in tr], [l for *_, l in tr],
                                                unsup_params or params, prep.cache,
                                                hidden=cfg.classifier_hidden, seed=cfg.seed,
                                                epochs=cfg.classifier_epochs)
            prob = second_stage_classifier_score(clf, [(a, b) for a, b, _ in pairs], unsup_params or params,
                                                 prep.cache)
            link["auprc_unsupervised"] = auprc(prob, lab)
        else:
            q = linkage_q_scores([(a, b) for a, b, _ in pairs], prep.store, params, prep.cache)
            link["n_undefined"] = int(np.isnan(q).sum())
            link["auprc_supervised"] = auprc(np.where(np.isnan(q), -np.inf, -q), lab)
    metrics["linkage"] = link
    return metrics


def write_metrics(metrics: dict, path) -> None:
    Path(path).write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8")
