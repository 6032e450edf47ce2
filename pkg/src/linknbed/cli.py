"""Command-line entry point: ``linknbed {train,eval,link,synth,gradcheck}``.

Configuration comes from a flat ``key = value`` file (``--config``), then the
``LINKNBED_SEED`` environment variable, then ``--set key=value`` and the
dedicated flags, last one winning.  Exit codes: 0 success, 1 validation
failure, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .context import ContextCache
from .model import VARIANTS, ModelConfig, ParamSet
from .numerics import ContractViolation
from .pipeline import (RunConfig, evaluate_run, prepare, resolve_config, run_training, write_metrics)
from .store import ParseError, ValidationError, load_graphs
from .synth import generate_synthetic_pair
from .trainer import NumericalAbort, TrainConfig, objective_gradcheck

log = logging.getLogger("linknbed")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

# flags that map one-to-one onto RunConfig fields
_FLAGS = {
    "variant": str, "epochs": int, "batch_size": int, "lr": float, "seed": int, "b": float, "C": int, "Z": int,
    "lam": float, "d": int, "triples": str, "attributes": str, "types": str, "labels": str, "cache": str,
    "checkpoint_dir": str, "metrics_out": str, "trace_out": str,
}


def _threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return nullcontext()
    return threadpool_limits(limits=n)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key (repeatable)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 gives bit-identical runs")
    for name, kind in _FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"opt_{name}", type=kind, default=None,
                       metavar=name.upper(), help=f"shorthand for --set {name}=...")


def _config(args) -> RunConfig:
    overrides: dict = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for name in _FLAGS:
        v = getattr(args, f"opt_{name}", None)
        if v is not None:
            overrides[name] = v
    return resolve_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="linknbed", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    _add_common(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="link prediction and linkage metrics for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--unsupervised", action="store_true",
                   help="score linkage with the second-stage classifier instead of substitution")

    p = sub.add_parser("link", help="substitution verdicts for a file of entity pairs")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="TSV: entity_x, entity_y[, label]")
    p.add_argument("--out", required=True, help="CSV destination")

    p = sub.add_parser("synth", help="write a synthetic two-graph dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-entities", type=int, default=200)
    p.add_argument("--n-relations", type=int, default=8)
    p.add_argument("--n-types", type=int, default=4)
    p.add_argument("--n-attr-keys", type=int, default=4)
    p.add_argument("--density", type=float, default=6.0)
    p.add_argument("--duplicate-fraction", type=float, default=0.2)
    p.add_argument("--edge-drop", type=float, default=0.1)
    p.add_argument("--attr-drop", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training objective")
    _add_common(p)
    p.add_argument("--probes", type=int, default=40)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--n-entities", type=int, default=30,
                   help="size of the random instance used when no triples file is given")
    return ap


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    prep = prepare(cfg)
    resume = None
    if args.resume:
        resume = Checkpoint.load(args.resume, expect_digest=prep.vocab.digest())
    res, final = run_training(cfg, prep, resume)
    for e, m in enumerate(res.epoch_means, start=res.epochs_done - len(res.epoch_means)):
        print(f"epoch {e + 1}: mean batch loss {m:.6f}")
    print(f"checkpoint: {Path(cfg.checkpoint_dir) / 'latest.lnbk'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.unsupervised:
        cfg.unsupervised = True
    prep = prepare(cfg)
    ck = Checkpoint.load(args.checkpoint, expect_digest=prep.vocab.digest())
    metrics = evaluate_run(cfg, prep, ck.params)
    metrics["checkpoint_epoch"] = ck.epoch
    write_metrics(metrics, cfg.metrics_out)
    print(json.dumps({k: metrics[k] for k in ("link_prediction", "linkage")}, sort_keys=True))
    return EXIT_OK


def cmd_link(args) -> int:
    from .evaluate import UndefinedVerdict, linkage_score

    cfg = _config(args)
    prep = prepare(cfg)
    ck = Checkpoint.load(args.checkpoint, expect_digest=prep.vocab.digest())
    ents = prep.vocab.entities
    bad = 0
    with open(args.pairs, encoding="utf-8") as src, open(args.out, "w", newline="", encoding="utf-8") as dst:
        w = csv.writer(dst, lineterminator="\n")
        w.writerow(["e_x", "e_y", "q", "label"])
        for lineno, line in enumerate(src, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                print(f"{args.pairs}:{lineno}: expected at least two tab-separated fields", file=sys.stderr)
                bad += 1
                continue
            a, b = parts[0], parts[1]
            label = parts[2] if len(parts) > 2 else ""
            q = "NA"
            missing = [n for n in (a, b) if n not in ents]
            if missing:
                print(f"{args.pairs}:{lineno}: unknown entity {', '.join(missing)}", file=sys.stderr)
                bad += 1
            else:
                try:
                    q = repr(linkage_score(ents[a], ents[b], prep.store, ck.params, prep.cache).q)
                except (UndefinedVerdict, ValueError) as exc:
                    print(f"{args.pairs}:{lineno}: {exc}", file=sys.stderr)
                    bad += 1
            w.writerow([a, b, q, label])
    if bad:
        print(f"{bad} pair(s) without a verdict", file=sys.stderr)
    return EXIT_OK


def cmd_synth(args) -> int:
    s = generate_synthetic_pair(args.out, n_entities=args.n_entities, n_relations=args.n_relations,
                                n_types=args.n_types, n_attr_keys=args.n_attr_keys, density=args.density,
                                duplicate_fraction=args.duplicate_fraction, edge_drop=args.edge_drop,
                                attr_drop=args.attr_drop, seed=args.seed)
    print(json.dumps({"paths": {k: str(v) for k, v in s.paths.items()}, "n_x": s.n_x, "n_y": s.n_y,
                      "n_triples_x": s.n_triples_x, "n_triples_y": s.n_triples_y,
                      "n_positive": s.n_positive, "n_negative": s.n_negative}, sort_keys=True))
    return EXIT_OK


def gradcheck_instance(variant: str, b: float, seed: int = 0, d: int = 8, n_entities: int = 30,
                       workdir=None, probes: int = 40, tolerance: float = 1e-4, batch: int = 8):
    """Gradient check of the batch objective on a small random two-graph
    instance; returns the report."""
    import tempfile

    with tempfile.TemporaryDirectory() if workdir is None else nullcontext(workdir) as tmp:
        s = generate_synthetic_pair(Path(tmp) / "gc", n_entities=n_entities, density=4.0, seed=seed,
                                    neg_per_type=3, neg_cross_type=3, n_clusters=3)
        store, vocab, labels = load_graphs(s.paths["triples"], s.paths["attributes"], s.paths["types"],
                                           s.paths["labels"])
    cache = ContextCache.build(store, walks_per_node=5, walk_length=3, seed=seed)
    cfg = ModelConfig.for_variant(variant, d=d, k=5, q=4, y=6, dtype="float64")
    params = ParamSet.init(cfg, **vocab.sizes, seed=seed)
    rng = np.random.default_rng(seed)
    for name in ("th_nbr", "th_attr", "th_type"):
        if name in params.arrays:
            params.arrays[name][:] = rng.normal(size=params.arrays[name].shape)
    # batch of triples that touch labeled entities, so the linkage term is live
    lab = np.array([labels.participates(int(s_)) or labels.participates(int(o_)) for s_, _, o_ in store.triples])
    order = np.r_[np.flatnonzero(lab), np.flatnonzero(~lab)]
    tc = TrainConfig(C=3, Z=3, b=b, lam=0.01, seed=seed)
    return objective_gradcheck(store.triples[order[:batch]], store, labels, params, cache, tc,
                               probe_count=probes, tolerance=tolerance, seed=seed)


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    variants = [cfg.variant] if args.opt_variant or any(s.startswith("variant=") for s in args.set) \
        else list(VARIANTS)
    b_values = [cfg.b] if args.opt_b is not None else [0.0, 0.6, 1.0]
    ok = True
    for v in variants:
        for b in b_values:
            rep = gradcheck_instance(v, b, seed=cfg.seed, d=args.opt_d or 8, n_entities=args.n_entities,
                                     probes=args.probes, tolerance=args.tolerance)
            status = "ok" if rep.passed else "FAIL"
            print(f"{v:22s} b={b:<4} max rel error {rep.max_rel_error:.3e}  {status}")
            ok &= rep.passed
    return EXIT_OK if ok else EXIT_INVALID


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "link": cmd_link, "synth": cmd_synth,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(getattr(args, "threads", 1)):
            return COMMANDS[args.command](args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, ValidationError, CheckpointError, ContractViolation, ValueError, FileNotFoundError,
            KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
