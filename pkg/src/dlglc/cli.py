"""Command-line front end: one subcommand per pipeline stage plus metrics.

Exit codes: 0 success, 1 invalid flag or input (the message names the flag),
2 runtime failure. Every command writes its files under --out-dir.
"""
import argparse
import csv
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import cluster, evalkit, lossgate, pipeline
from .datagen import generate_corpus, load_corpus, save_corpus
from .dino import encoder_forward
from .numerics import make_rng
from .pipeline import GATE_MODES, PipelineConfig

CORPUS_KEYS = ["n_speakers", "utts_per_speaker", "dim", "within_speaker_noise", "augment_noise"]
DINO_KEYS = ["dino_epochs", "dino_lr", "dino_batch_size", "dino_k", "teacher_temp", "student_temp", "alpha",
             "lambda_start", "lambda_end", "center_momentum", "dino_ema", "enc_hidden", "d_emb", "extract_with"]
CLUSTER_KEYS = ["clusters", "kmeans_restarts"]
STAGE2_KEYS = CLUSTER_KEYS + [
    "iterations", "epochs", "warmup_epochs", "batch_size", "lr_start", "lr_end", "momentum", "gate_mode",
    "fixed_tau", "margin", "scale", "tau2", "eps_c", "reduction", "label_noise", "warm_start", "head_init",
    "widen_final"]
EVAL_KEYS = ["n_pos", "n_neg", "p_target"]

CORPUS_FILES = ("corpus.emb1", "corpus.tsv")


class UsageError(Exception):
    """Bad flag value or unusable input; the message names the flag."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(key):
    return "--" + key.replace("_", "-")


def _bool(v):
    return pipeline._coerce(bool, v)


def _add_overrides(p, keys):
    defaults = PipelineConfig()
    types = {f.name: f.type for f in fields(PipelineConfig)}
    g = p.add_argument_group("config overrides")
    for k in keys:
        t = types[k]
        kw = {"type": {"int": int, "float": float, "bool": _bool, "str": str}.get(t, t)}
        if t in (bool, "bool"):
            kw["type"] = _bool
            kw["metavar"] = "BOOL"
        if k == "gate_mode":
            kw["choices"] = GATE_MODES
        if k == "extract_with":
            kw["choices"] = ("teacher", "student")
        if k == "head_init":
            kw["choices"] = ("centroids", "random")
        if k == "reduction":
            kw["choices"] = ("mean", "sum")
        g.add_argument(_flag(k), dest=k, default=None, help=f"(default: {getattr(defaults, k)})", **kw)


def _common(p):
    p.add_argument("--config", default=None, help="flat key = value config file (default: built-in defaults)")
    p.add_argument("--seed", type=int, default=None, help=f"run seed, overrides the config (default: "
                                                          f"{PipelineConfig().seed})")
    p.add_argument("--out-dir", default="run", help="output directory (default: %(default)s)")


def build_parser():
    parser = _Parser(prog="dlglc", description=__doc__.splitlines()[0],
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_, keys):
        p = sub.add_parser(name, help=help_, description=help_)
        _common(p)
        _add_overrides(p, keys)
        return p

    command("datagen", "generate a synthetic corpus", CORPUS_KEYS)

    p = command("train-dino", "stage I self-distillation", CORPUS_KEYS + DINO_KEYS + EVAL_KEYS)
    p.add_argument("--corpus-dir", default=None, help="directory written by datagen (default: generate)")

    p = command("extract", "embed a corpus with a checkpoint encoder", CORPUS_KEYS)
    p.add_argument("--checkpoint", required=True, help="stage I or iteration checkpoint (required)")
    p.add_argument("--corpus-dir", default=None, help="directory written by datagen (default: generate)")

    p = command("cluster", "k-means pseudo labels from embeddings", CLUSTER_KEYS)
    p.add_argument("--emb", required=True, help="EMB1 embedding file (required)")

    p = command("train-iter", "one stage II iteration", CORPUS_KEYS + STAGE2_KEYS + EVAL_KEYS)
    p.add_argument("--checkpoint", required=True, help="encoder to start from (required)")
    p.add_argument("--iteration", type=int, default=1, help="iteration index (default: %(default)s)")
    p.add_argument("--emb", default=None, help="embeddings to cluster (default: extract with the checkpoint)")
    p.add_argument("--trials", default=None, help="trial list (default: build from the corpus)")
    p.add_argument("--corpus-dir", default=None, help="directory written by datagen (default: generate)")

    command("pipeline", "stage I followed by all stage II iterations",
            CORPUS_KEYS + DINO_KEYS + STAGE2_KEYS + EVAL_KEYS)

    p = command("eval", "EER and minDCF of an embedding file on a trial list", ["p_target"])
    p.add_argument("--emb", required=True, help="EMB1 embedding file (required)")
    p.add_argument("--trials", required=True, help="trial list 'label id_a id_b' (required)")

    p = command("export-hist", "log-loss histogram and fitted GMM curves", [])
    p.add_argument("--ledger", required=True, help="loss ledger CSV epoch,utterance_id,loss (required)")
    p.add_argument("--bins", type=int, default=80, help="histogram bins (default: %(default)s)")
    p.add_argument("--epoch", type=int, default=None, help="ledger epoch to use (default: last)")
    p.add_argument("--points", type=int, default=400, help="curve samples (default: %(default)s)")
    return parser


def _config(args, keys):
    cfg = PipelineConfig()
    if args.config is not None:
        _need_file(args.config, "--config")
        try:
            cfg = pipeline.read_config_file(args.config)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"--config: {exc}") from None
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise UsageError("--seed: must be an unsigned 64-bit integer")
        overrides["seed"] = args.seed
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        # find the flag responsible for the rejected value
        for k, v in overrides.items():
            try:
                replace(cfg, **{k: v})
            except ValueError:
                raise UsageError(f"{_flag(k)}: {exc}") from None
        names = ", ".join(_flag(k) for k in overrides) or "--config"
        raise UsageError(f"{names}: {exc}") from None


def _need_file(path, flag):
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: no such file: {path}")


def _corpus(args, cfg):
    if getattr(args, "corpus_dir", None) is None:
        return generate_corpus(cfg.corpus_spec())
    paths = [os.path.join(args.corpus_dir, n) for n in CORPUS_FILES]
    for p in paths:
        _need_file(p, "--corpus-dir")
    return load_corpus(*paths)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([x if isinstance(x, (int, np.integer)) else repr(float(x)) for x in r])


def cmd_datagen(args, cfg):
    corpus = generate_corpus(cfg.corpus_spec())
    save_corpus(corpus, *(os.path.join(args.out_dir, n) for n in CORPUS_FILES))
    print(f"wrote {len(corpus)} utterances to {args.out_dir}")


def cmd_train_dino(args, cfg):
    state = pipeline.run_stage1(cfg, corpus=_corpus(args, cfg), out_dir=args.out_dir)
    print(f"EER={state.stage1['eer']:.6f}")
    print(f"minDCF={state.stage1['min_dcf']:.6f}")


def _encoder(path):
    try:
        return pipeline.load_encoder(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"--checkpoint: {exc}") from None


def cmd_extract(args, cfg):
    _need_file(args.checkpoint, "--checkpoint")
    enc = _encoder(args.checkpoint)
    corpus = _corpus(args, cfg)
    if enc["enc.W1"].shape[0] != corpus.features.shape[1]:
        raise UsageError(f"--checkpoint: encoder expects dim {enc['enc.W1'].shape[0]}, "
                         f"corpus has {corpus.features.shape[1]}")
    emb = encoder_forward(enc, corpus.features)[0]
    evalkit.write_emb1(os.path.join(args.out_dir, "emb.emb1"), emb, corpus.ids)
    print(f"wrote {len(emb)} embeddings")


def _read_emb(path, flag="--emb"):
    _need_file(path, flag)
    try:
        return evalkit.read_emb1(path)
    except ValueError as exc:
        raise UsageError(f"{flag}: {exc}") from None


def cmd_cluster(args, cfg):
    emb, ids = _read_emb(args.emb)
    if cfg.clusters > len(emb):
        raise UsageError(f"--clusters: {cfg.clusters} exceeds the {len(emb)} embeddings")
    a = cluster.kmeans(emb.astype(np.float64), cfg.clusters, n_init=cfg.kmeans_restarts,
                       rng=make_rng(cfg.seed, 10), ids=ids)
    cluster.write_assignment_csv(os.path.join(args.out_dir, "assignment.csv"), a)
    print(f"inertia={a.inertia:.6f}")


def cmd_train_iter(args, cfg):
    _need_file(args.checkpoint, "--checkpoint")
    if args.iteration < 1:
        raise UsageError("--iteration: must be >= 1")
    enc = _encoder(args.checkpoint)
    # the architecture is whatever the checkpoint holds
    cfg = replace(cfg, enc_hidden=enc["enc.W1"].shape[1], d_emb=enc["enc.W3"].shape[1])
    corpus = _corpus(args, cfg)
    if args.emb is not None:
        emb, ids = _read_emb(args.emb)
        if not np.array_equal(ids, corpus.ids):
            raise UsageError("--emb: utterance ids do not match the corpus")
        emb = emb.astype(np.float64)
    else:
        emb = encoder_forward(enc, corpus.features)[0]
    if args.trials is not None:
        _need_file(args.trials, "--trials")
        trials = evalkit.read_trials(args.trials)
    else:
        trials = pipeline.make_trials(cfg, corpus)
    state = pipeline.RunState(corpus, enc, emb, trials)
    _, rep = pipeline.run_iteration(state, args.iteration, cfg, args.out_dir)
    pipeline.write_reports(args.out_dir, [rep])
    print(f"EER={rep.eer:.6f}")
    print(f"minDCF={rep.min_dcf:.6f}")


def cmd_pipeline(args, cfg):
    reports, _ = pipeline.run_pipeline(cfg, args.out_dir)
    for r in reports:
        print(f"iteration {r.iteration}: EER={r.eer:.6f} minDCF={r.min_dcf:.6f} NMI={r.nmi:.4f}")


def cmd_eval(args, cfg):
    emb, ids = _read_emb(args.emb)
    _need_file(args.trials, "--trials")
    try:
        trials = evalkit.read_trials(args.trials)
    except ValueError as exc:
        raise UsageError(f"--trials: {exc}") from None
    try:
        scores = evalkit.score_trials(emb.astype(np.float64), ids, trials)
    except KeyError as exc:
        raise UsageError(f"--trials: {exc.args[0]}") from None
    labels = np.array([t[2] for t in trials])
    if labels.all() or not labels.any():
        raise UsageError("--trials: need both target and non-target trials")
    rate, _ = evalkit.eer(scores, labels)
    dcf = evalkit.min_dcf(scores, labels, cfg.p_target)
    evalkit.write_scores(os.path.join(args.out_dir, "scores.txt"), scores, trials)
    print(f"EER={rate:.6f}")
    print(f"minDCF={dcf:.6f}")


def cmd_export_hist(args, cfg):
    _need_file(args.ledger, "--ledger")
    if args.bins < 1:
        raise UsageError("--bins: must be >= 1")
    if args.points < 2:
        raise UsageError("--points: must be >= 2")
    try:
        ledger = lossgate.read_ledger_csv(args.ledger, args.epoch)
    except KeyError:
        raise UsageError(f"--epoch: epoch {args.epoch} not in ledger") from None
    except ValueError as exc:
        raise UsageError(f"--ledger: {exc}") from None
    hist, curve, gmm = lossgate.loss_histogram(ledger, bins=args.bins, n_curve=args.points)
    gate = lossgate.refresh_gate(ledger)
    _write_rows(os.path.join(args.out_dir, "loss_hist.csv"), ["bin_left", "bin_right", "count", "density"],
                [(a, b, int(c), d) for a, b, c, d in hist])
    _write_rows(os.path.join(args.out_dir, "gmm_curve.csv"), ["log_loss", "component1", "component2", "mixture"],
                curve)
    lossgate.write_gate_csv(os.path.join(args.out_dir, "gate.csv"), [gate])
    print(f"tau={gate.tau:.6f}")


COMMANDS = {
    "datagen": (cmd_datagen, CORPUS_KEYS),
    "train-dino": (cmd_train_dino, CORPUS_KEYS + DINO_KEYS + EVAL_KEYS),
    "extract": (cmd_extract, CORPUS_KEYS),
    "cluster": (cmd_cluster, CLUSTER_KEYS),
    "train-iter": (cmd_train_iter, CORPUS_KEYS + STAGE2_KEYS + EVAL_KEYS),
    "pipeline": (cmd_pipeline, CORPUS_KEYS + DINO_KEYS + STAGE2_KEYS + EVAL_KEYS),
    "eval": (cmd_eval, ["p_target"]),
    "export-hist": (cmd_export_hist, []),
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        fn, keys = COMMANDS[args.command]
        cfg = _config(args, keys)
        os.makedirs(args.out_dir, exist_ok=True)
        fn(args, cfg)
    except SystemExit as exc:  # --help
        return exc.code or 0
    except UsageError as exc:
        print(f"dlglc: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"dlglc: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
