"""Command-line entry points: synth, train, eval, retrieve, probe.

Exit codes: 0 ok, 1 I/O failure, 2 config or input error, 3 training abort,
4 checkpoint/config mismatch.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config_text, resolve_config
from .data import (
    Vocabulary,
    build_vocab,
    encode_caption,
    generate_synthetic,
    load_annotations,
    load_factors,
    load_stopwords,
    make_dataset,
    probe_separation,
    save_annotations,
    save_factors,
)
from .encoders import ValidationError
from .evaluation import caption_queries, evaluate, format_report, gallery_features, rerank, score_all, write_ranking_dump
from .training import Trainer, TrainingAborted, build_model

logger = logging.getLogger("dssl")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_ABORT, EXIT_MISMATCH = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


def _pairs(items):
    out = []
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out.append((key.strip(), value.strip()))
    return out


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from None


# --- synth ----------------------------------------------------------------------


def cmd_synth(args):
    overrides = _pairs(args.set)
    if args.ids is not None:
        overrides.append(("synth.num_identities", str(args.ids)))
    if args.per_id is not None:
        overrides.append(("synth.images_per_identity", str(args.per_id)))
    if args.seed is not None:
        overrides.append(("synth.seed", str(args.seed)))
    cfg = resolve_config(args.config, overrides)
    syn = generate_synthetic(cfg.synth)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_annotations(syn.records, out / "annotations.json")
        save_factors(out / "factors.tsv", syn.z_p, syn.z_s)
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}", EXIT_IO) from None
    n_test = sum(r.split == "test" for r in syn.records)
    print(f"records={len(syn.records)} identities={cfg.synth.num_identities} "
          f"train={len(syn.records) - n_test} test={n_test} factors={len(syn.z_p)}")
    return EXIT_OK


# --- shared loading ---------------------------------------------------------------


def _load_records(path):
    try:
        return load_annotations(path)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None


def _stopwords(cfg):
    return load_stopwords(cfg.data.stopwords or None)


def _fit_encoder_to_data(cfg: RunConfig, records, vocab, train):
    first = records[0]
    if first.vector is not None:
        cfg.encoder.visual_backbone = "vector-passthrough"
        cfg.encoder.obs_dim = len(first.vector)
    else:
        cfg.encoder.visual_backbone = "tiny-conv"
    cfg.encoder.vocab_size = len(vocab)
    cfg.loss.id_class_count = train.num_identities
    return cfg.validate()


# sizes that training derives from the data rather than from the config layers
_DATA_KEYS = ("encoder.vocab_size", "encoder.obs_dim", "encoder.visual_backbone", "loss.id_class_count")


def _model_from_checkpoint(args):
    """Load a checkpoint; with ``--config``/``--set`` the model is built from
    those layers instead of the stored snapshot and must match it."""
    try:
        model, state = load_checkpoint(args.ckpt)
        if args.config or args.set:
            given = _pairs(args.set)
            if args.config:
                given = parse_config_text(Path(args.config).read_text(encoding="utf-8")) + given
            named = {k for k, _ in given}
            stored = dict(model.cfg.items())
            cfg = resolve_config(args.config, _pairs(args.set))
            for key in _DATA_KEYS:
                if key not in named:
                    cfg.set(key, stored[key])
            model, state = load_checkpoint(args.ckpt, cfg.validate())
    except OSError as exc:
        raise CliError(f"cannot read {args.ckpt}: {exc}", EXIT_IO) from None
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_MISMATCH) from None
    return model.eval(), state


def _vocab_for(args):
    path = Path(args.vocab) if args.vocab else Path(args.ckpt).parent / "vocab.txt"
    try:
        return Vocabulary.load(path)
    except OSError as exc:
        raise CliError(f"cannot read vocabulary {path}: {exc}", EXIT_IO) from None


def _check_vocab(model, vocab):
    if len(vocab) != model.cfg.encoder.vocab_size:
        raise CliError(
            f"vocabulary has {len(vocab)} tokens but checkpoint parameter "
            f"'textual.embedding.weight' expects encoder.vocab_size={model.cfg.encoder.vocab_size}",
            EXIT_MISMATCH,
        )


def _split_dataset(model, records, vocab, split):
    cfg = model.cfg
    ds = make_dataset(records, vocab, split, _stopwords(cfg), cfg.encoder.n_max)
    dim = tuple(ds.images.shape[1:])
    if cfg.encoder.visual_backbone == "vector-passthrough" and dim != (cfg.encoder.obs_dim,):
        raise CliError(
            f"data vectors have shape {dim} but checkpoint parameter 'visual.backbone.weight' "
            f"expects encoder.obs_dim={cfg.encoder.obs_dim}",
            EXIT_MISMATCH,
        )
    return ds


# --- train ------------------------------------------------------------------------


def cmd_train(args):
    overrides = _pairs(args.set)
    if args.seed is not None:
        overrides.append(("seed", str(args.seed)))
    if args.no_mec:
        overrides.append(("loss.mec", "false"))
    for i in _int_list(args.no_align or ""):
        if i not in (2, 3, 4, 5):
            raise ConfigError(f"--no-align accepts 2,3,4,5 (Align I is always on), got {i}")
        overrides.append((f"loss.align{i}", "false"))
    cfg = resolve_config(args.config, overrides)
    records = _load_records(args.data)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_IO) from None

    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    if args.init:
        model, _ = _model_from_checkpoint(argparse.Namespace(ckpt=args.init, config=None, set=None))
        vocab = _vocab_for(argparse.Namespace(vocab=args.vocab, ckpt=args.init))
        _check_vocab(model, vocab)
        # architecture comes from the checkpoint, the schedule from this run
        cfg.loss.id_class_count = model.cfg.loss.id_class_count
        for section in ("train", "loss", "eval", "data"):
            setattr(model.cfg, section, getattr(cfg, section))
        model.cfg.seed = cfg.seed
        cfg = model.cfg.validate()
        train = _split_dataset(model, records, vocab, "train")
    else:
        vocab = Vocabulary.load(args.vocab) if args.vocab else build_vocab(records, cfg.data.min_count)
        train = make_dataset(records, vocab, "train", _stopwords(cfg), cfg.encoder.n_max)
        cfg = _fit_encoder_to_data(cfg, records, vocab, train)
        model = build_model(cfg)
    model.to(getattr(torch, cfg.train.dtype))
    vocab.save(out / "vocab.txt")
    (out / "config.cfg").write_text(cfg.dumps(), encoding="utf-8")

    def on_epoch_end(trainer, stage, epoch):
        state = {"stage": stage, "epoch": epoch, "global_epoch": trainer.global_epoch}
        save_checkpoint(trainer.model, out / f"epoch_{trainer.global_epoch:03d}.ckpt", state, trainer.optimizer)

    torch.set_num_threads(cfg.train.num_threads)
    with open(out / "metrics.log", "w", encoding="utf-8") as log:
        trainer = Trainer(model, train, cfg, log=log, on_epoch_end=on_epoch_end)
        try:
            for stage in stages:
                trainer.run_stage(stage)
        except TrainingAborted as exc:
            # the trainer already rolled the weights back to the last finished epoch
            save_checkpoint(trainer.model, out / "last_good.ckpt",
                            {"stage": exc.stage, "epoch": exc.epoch, "aborted": "true"})
            raise CliError(f"training aborted: {exc}", EXIT_ABORT) from None
    save_checkpoint(model, out / "final.ckpt", {"stage": stages[-1], "global_epoch": trainer.global_epoch},
                    trainer.optimizer)
    print(f"wrote {out / 'final.ckpt'} after {trainer.global_epoch} epochs")
    return EXIT_OK


# --- eval / retrieve / probe ------------------------------------------------------------


def cmd_eval(args):
    model, _ = _model_from_checkpoint(args)
    cfg = model.cfg
    if args.k_list:
        cfg.eval.k_list = tuple(_int_list(args.k_list))
    if args.rerank:
        cfg.eval.rr_enabled = True
    if args.gamma is not None:
        cfg.eval.rr_gamma = args.gamma
    if args.K is not None:
        cfg.eval.rr_K = args.K
    cfg.eval.validate()
    vocab = _vocab_for(args)
    _check_vocab(model, vocab)
    ds = _split_dataset(model, _load_records(args.data), vocab, args.split)
    acc, sm, labels = evaluate(model, ds, cfg.eval, cfg.encoder.n_max)
    report = format_report(acc)
    sys.stdout.write(report)
    if args.report:
        Path(args.report).write_text(report, encoding="utf-8")
    if args.dump:
        _, _, qids = caption_queries(ds)
        write_ranking_dump(args.dump, sm, qids, args.dump_limit)
    return EXIT_OK


def cmd_retrieve(args):
    model, _ = _model_from_checkpoint(args)
    cfg = model.cfg
    vocab = _vocab_for(args)
    _check_vocab(model, vocab)
    ds = _split_dataset(model, _load_records(args.data), vocab, args.split)
    try:
        item = encode_caption(args.caption, vocab, _stopwords(cfg), cfg.encoder.n_max)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    sm = score_all(model, [item], ds, cfg.eval, n_max=cfg.encoder.n_max)
    if args.rerank:
        cfg.eval.rr_gamma = cfg.eval.rr_gamma if args.gamma is None else args.gamma
        vp, _ = gallery_features(model, ds.images)
        sm = rerank(sm, vp.numpy(), cfg.eval)
    topk = min(args.topk, len(ds))
    order = np.argsort(-sm.scores[0], kind="stable")[:topk]
    for r, g in enumerate(order, 1):
        print(f"{r}\t{g}\t{ds.identities[g]}\t{float(sm.scores[0, g])!r}")
    return EXIT_OK


def cmd_probe(args):
    model, _ = _model_from_checkpoint(args)
    records = _load_records(args.data)
    if any(r.vector is None for r in records):
        raise ConfigError("probe needs vector observations (a synthetic dataset)")
    z_p, z_s = load_factors(args.factors)
    if len(z_p) != len(records):
        raise ConfigError(f"factors file has {len(z_p)} rows for {len(records)} records")
    if model.cfg.encoder.obs_dim != len(records[0].vector):
        raise CliError(f"data vectors have dim {len(records[0].vector)} but checkpoint parameter "
                       f"'visual.backbone.weight' expects encoder.obs_dim={model.cfg.encoder.obs_dim}", EXIT_MISMATCH)
    rep = probe_separation(model, records, z_p, z_s, seed=args.seed)
    print(rep.format())
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------


def _common_model_args(p):
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="annotation JSON")
    p.add_argument("--vocab", help="vocabulary file (default: vocab.txt next to the checkpoint)")
    p.add_argument("--config", help="config file to check the checkpoint against")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))


def build_parser():
    parser = argparse.ArgumentParser(prog="dssl", description="Surroundings-person separation for text-based person retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic factorized benchmark")
    p.add_argument("--ids", type=int, help="number of identities")
    p.add_argument("--per-id", type=int, help="images per identity")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--data", required=True, help="annotation JSON")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--init", help="checkpoint to start from (e.g. for --stage 2)")
    p.add_argument("--vocab", help="reuse an existing vocabulary file")
    p.add_argument("--no-mec", action="store_true", help="drop the mutual exclusion term")
    p.add_argument("--no-align", metavar="LIST", help="alignments to drop, e.g. 2,3,4,5")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="text-to-image top-k accuracy")
    _common_model_args(p)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--gamma", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--k-list", help="comma-separated cutoffs, default 1,5,10")
    p.add_argument("--report", help="also write the report here")
    p.add_argument("--dump", help="write the full ranking as TSV")
    p.add_argument("--dump-limit", type=int, help="ranks per query in the dump")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="rank the gallery for one caption")
    _common_model_args(p)
    p.add_argument("--caption", required=True)
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("probe", help="linear separation probe on synthetic data")
    _common_model_args(p)
    p.add_argument("--factors", required=True, help="factors TSV from synth")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
