"""``tsdistill`` command line: generate, pretrain, embed, probe, finetune, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig

log = logging.getLogger("tsdistill")


def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(train={"seed": args.seed})
    return cfg


def cmd_generate(args, cfg):
    from .synth import generate_corpus, write_utsd

    length = args.length if args.length is not None else cfg.synth.length
    samples = args.samples if args.samples is not None else cfg.synth.n_samples
    if length <= 0 or length % 32:
        raise ConfigError(f"--length must be a positive multiple of 32, got {length}")
    corpus = generate_corpus(cfg.train.seed, samples, length, args.max_nodes or cfg.synth.max_nodes)
    write_utsd(args.out, corpus)
    d = corpus.data.astype(np.float64)
    print(f"n={corpus.n_samples} T={corpus.length} mean={d.mean():.6f} std={d.std():.6f}", file=sys.stderr)


def cmd_pretrain(args, cfg):
    from .synth import read_utsd
    from .trainer import pretrain

    corpus = read_utsd(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    state = pretrain(cfg, corpus.data, out_dir=args.out, resume_from=args.resume)
    print(f"finished at step {state.step}; checkpoints in {args.out}", file=sys.stderr)


def _load_model(path):
    from .trainer import load_teacher

    cfg, params = load_teacher(path)
    return cfg, params


def cmd_embed(args, cfg):
    from .evaluate import embed
    from .tsfile import read_ts

    mcfg, params = _load_model(args.checkpoint)
    ds = read_ts(args.data)
    feats = embed(params, mcfg.model, ds, mcfg.eval.series_len)
    np.savez(args.out, features=feats, labels=np.asarray(ds.labels, dtype=str))
    print(f"embedded {len(ds)} samples -> {feats.shape[1]} features", file=sys.stderr)


def _features_and_labels(args, split):
    from .evaluate import embed
    from .tsfile import read_ts

    path = getattr(args, split)
    if path.endswith(".npz"):
        blob = np.load(path, allow_pickle=False)
        return blob["features"], blob["labels"], None
    if not args.checkpoint:
        raise ConfigError(f"--checkpoint is required to embed {path}")
    mcfg, params = _load_model(args.checkpoint)
    ds = read_ts(path)
    return embed(params, mcfg.model, ds, mcfg.eval.series_len), ds.labels, ds


def _dataset_name(args):
    if args.dataset:
        return args.dataset
    base = os.path.basename(args.train)
    return base.split("_TRAIN")[0].split(".")[0]


def cmd_probe(args, cfg):
    from .evaluate import linear_probe, write_results_csv

    xtr, ytr, _ = _features_and_labels(args, "train")
    xte, yte, _ = _features_and_labels(args, "test")
    e = cfg.eval
    rows = []
    for seed in args.seeds or e.seeds:
        res = linear_probe(xtr, ytr, xte, yte, seed=int(seed), epochs=e.probe_epochs, lr=e.probe_lr,
                           weight_decay=e.probe_weight_decay, batch_size=e.probe_batch_size,
                           selection=e.epoch_selection, val_fraction=e.val_fraction)
        rows.append({"dataset": _dataset_name(args), "seed": int(seed), "method": args.method,
                     "regime": "linear_probe", "accuracy": res.accuracy})
        log.info("seed %s accuracy %.4f (epoch %d)", seed, res.accuracy, res.best_epoch)
    write_results_csv(args.out, rows)


def cmd_finetune(args, cfg):
    from .evaluate import finetune, write_results_csv
    from .tsfile import read_ts

    mcfg, params = _load_model(args.checkpoint)
    train, test = read_ts(args.train), read_ts(args.test)
    e = cfg.eval
    rows = []
    for seed in args.seeds or e.seeds:
        res = finetune(params, mcfg.model, (train, train.labels), (test, test.labels), seed=int(seed),
                       lrs=e.finetune_lrs, epochs=e.finetune_epochs, weight_decay=e.finetune_weight_decay,
                       batch_size=e.finetune_batch_size, val_fraction=e.val_fraction,
                       series_len=mcfg.eval.series_len, selection=e.epoch_selection)
        rows.append({"dataset": _dataset_name(args), "seed": int(seed), "method": args.method,
                     "regime": "finetune", "accuracy": res.accuracy})
        log.info("seed %s lr %g accuracy %.4f", seed, res.selected_lr, res.accuracy)
    write_results_csv(args.out, rows)


def cmd_report(args, cfg):
    from .evaluate import aggregate_rows, read_results_csv

    rows = [r for path in args.results for r in read_results_csv(path)]
    report = aggregate_rows(rows, args.regime)
    doc = report.to_dict()
    doc["config_hash"] = cfg.hash()
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    if args.plot_data:
        bars = [{"x": m, "y": report.average_accuracy[m], "wins": report.wins[m]} for m in report.methods]
        with open(args.plot_data, "w") as fh:
            json.dump({"kind": "bar", "title": "Average accuracy", "regime": args.regime, "bars": bars},
                      fh, indent=2, sort_keys=True)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS so a flag given before the subcommand is not reset by the subparser
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides the config)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="RunConfig JSON file")
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="tsdistill", parents=[common],
                                     description="Self-distillation pretraining for time-series encoders.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic UTSD corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--max-nodes", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", parents=[common], help="student-teacher pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics.csv")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", parents=[common], help="CLS features of a .ts dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help=".npz with 'features' and 'labels'")
    p.set_defaults(func=cmd_embed)

    for name, func, needs_ckpt in (("probe", cmd_probe, False), ("finetune", cmd_finetune, True)):
        p = sub.add_parser(name, parents=[common], help=f"{name} evaluation; writes a results CSV")
        p.add_argument("--checkpoint", required=needs_ckpt)
        p.add_argument("--train", required=True, help=".ts file" + ("" if needs_ckpt else " or .npz features"))
        p.add_argument("--test", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--method", default="tsdistill")
        p.add_argument("--dataset")
        p.add_argument("--seeds", type=int, nargs="+")
        p.set_defaults(func=func)

    p = sub.add_parser("report", parents=[common], help="aggregate result CSVs")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot-data")
    p.add_argument("--regime")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
