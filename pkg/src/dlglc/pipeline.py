"""Two-stage training: self-distillation, then iterative pseudo-label learning.

Each Stage II iteration clusters the current embeddings, trains the encoder
plus a fresh classifier on the resulting pseudo labels under the configured
gate, and re-extracts embeddings. Hidden speaker labels are read only by
`_diagnostics` and trial construction.
"""
import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import cluster, evalkit, lossgate
from .datagen import CorpusSpec, generate_corpus, inject_label_noise
from .dino import (
    DinoConfig,
    init_encoder,
    read_params,
    save_checkpoint,
    train_dino,
    write_loss_log,
    write_params,
)
from .dino import encoder_forward
from .numerics import make_rng
from .objective import ObjectiveConfig, init_classifier, predict_proba, total_stage2_loss

GATE_MODES = ("none", "fixed", "dynamic", "dynamic+lc")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    # corpus
    n_speakers: int = 20
    utts_per_speaker: int = 50
    dim: int = 16
    within_speaker_noise: float = 0.2
    augment_noise: float = 0.1
    # stage I
    dino_epochs: int = 30
    dino_lr: float = 0.05
    dino_batch_size: int = 50
    dino_k: int = 256
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    alpha: float = 0.001
    lambda_start: float = 0.996
    lambda_end: float = 1.0
    center_momentum: float = 0.9
    dino_ema: bool = True
    enc_hidden: int = 64
    d_emb: int = 32
    extract_with: str = "teacher"
    # stage II
    clusters: int = 25
    kmeans_restarts: int = 10
    iterations: int = 5
    epochs: int = 20
    warmup_epochs: int = 1
    batch_size: int = 50
    lr_start: float = 0.03
    lr_end: float = 0.001
    momentum: float = 0.0
    gate_mode: str = "dynamic+lc"
    fixed_tau: float = 1.0
    margin: float = 0.2
    scale: float = 32.0
    tau2: float = 0.5
    eps_c: float = 0.1
    reduction: str = "mean"
    label_noise: float = 0.0
    warm_start: bool = True
    head_init: str = "centroids"
    widen_final: int = 2
    # evaluation
    n_pos: int = 10000
    n_neg: int = 10000
    p_target: float = 0.05

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.gate_mode.startswith("dynamic") and self.warmup_epochs < 1:
            raise ValueError("dynamic gating needs warmup_epochs >= 1")
        if self.head_init not in ("centroids", "random"):
            raise ValueError("head_init must be 'centroids' or 'random'")
        if self.widen_final < 1:
            raise ValueError("widen_final must be >= 1")

    def corpus_spec(self):
        return CorpusSpec(self.n_speakers, self.utts_per_speaker, self.dim, self.within_speaker_noise,
                          self.augment_noise, self.seed)

    def dino_config(self):
        return DinoConfig(
            teacher_temp=self.teacher_temp, student_temp=self.student_temp, alpha=self.alpha,
            lambda_start=self.lambda_start, lambda_end=self.lambda_end,
            center_momentum=self.center_momentum, lr=self.dino_lr, batch_size=self.dino_batch_size,
            epochs=self.dino_epochs, d_in=self.dim, enc_hidden=self.enc_hidden, d_emb=self.d_emb,
            k=self.dino_k, augment_noise=self.augment_noise, ema=self.dino_ema,
            extract_with=self.extract_with,
        )

    def objective_config(self):
        return ObjectiveConfig(self.margin, self.scale, self.tau2, self.eps_c, self.reduction)


def _coerce(ftype, value):
    if isinstance(value, str):
        v = value.strip()
        if ftype in (bool, "bool"):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if ftype in (int, "int"):
            return int(v)
        if ftype in (float, "float"):
            return float(v)
        return v
    return value


def config_from_mapping(mapping, base=None):
    base = base or PipelineConfig()
    known = {f.name: f.type for f in fields(PipelineConfig)}
    kw = {}
    for key, value in mapping.items():
        name = key.replace("-", "_")
        if name not in known:
            raise KeyError(f"unknown config key: {key}")
        kw[name] = _coerce(known[name], value)
    return replace(base, **kw)


def read_config_file(path, base=None):
    """Flat `key = value` lines; `#` starts a comment."""
    mapping = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            mapping[k.strip()] = v.strip()
    return config_from_mapping(mapping, base)


def write_config_file(path, cfg):
    with open(path, "w") as f:
        for k, v in asdict(cfg).items():
            f.write(f"{k} = {v}\n")


# ---------------------------------------------------------------- reports

@dataclass
class EpochRecord:
    epoch: int
    tau: float
    tau_log: float
    fallback: bool
    retained_fraction: float
    lc_fraction: float
    loss: float
    lr: float


@dataclass
class IterationReport:
    iteration: int
    gate_mode: str
    purity: float
    nmi: float
    eer: float
    min_dcf: float
    label_noise: float = 0.0
    full_label_purity: float = float("nan")
    retained_purity: float = float("nan")
    epochs: list = field(default_factory=list)
    failed: str = ""

    @property
    def tau_trajectory(self):
        return [e.tau for e in self.epochs]

    @property
    def retained_fractions(self):
        return [e.retained_fraction for e in self.epochs]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["epochs"] = [EpochRecord(**e) for e in d.get("epochs", [])]
        return cls(**d)


REPORT_FIELDS = ["iteration", "gate_mode", "purity", "nmi", "eer", "min_dcf", "label_noise",
                 "full_label_purity", "retained_purity", "final_tau", "final_retained_fraction", "failed"]


def write_reports(out_dir, reports, stage1=None, failed=""):
    with open(os.path.join(out_dir, "reports.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_FIELDS)
        for r in reports:
            last = r.epochs[-1] if r.epochs else None
            w.writerow([r.iteration, r.gate_mode, repr(r.purity), repr(r.nmi), repr(r.eer),
                        repr(r.min_dcf), repr(r.label_noise), repr(r.full_label_purity),
                        repr(r.retained_purity), repr(last.tau) if last else "",
                        repr(last.retained_fraction) if last else "", r.failed])
    summary = {"stage1": stage1 or {}, "iterations": [r.to_dict() for r in reports], "failed": failed}
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)


def read_summary(path):
    with open(path) as f:
        s = json.load(f)
    return s["stage1"], [IterationReport.from_dict(r) for r in s["iterations"]], s["failed"]


# ---------------------------------------------------------------- stages

@dataclass
class RunState:
    """What carries over between iterations."""
    corpus: object
    params: dict
    embeddings: np.ndarray
    trials: list
    stage1: dict = field(default_factory=dict)


def evaluate(embeddings, ids, trials, p_target=0.05):
    scores = evalkit.score_trials(embeddings, ids, trials)
    labels = np.array([t[2] for t in trials])
    return evalkit.eer(scores, labels)[0], evalkit.min_dcf(scores, labels, p_target)


def _diagnostics(pseudo, corpus, retained=None):
    truth = corpus.true_speaker
    out = {"purity": cluster.purity(pseudo, truth), "nmi": cluster.nmi(pseudo, truth)}
    if retained is not None and retained.any():
        out["retained_purity"] = cluster.purity(pseudo[retained], truth[retained])
    return out


def make_trials(cfg, corpus):
    return evalkit.build_trials(corpus.ids, corpus.true_speaker, cfg.n_pos, cfg.n_neg, make_rng(cfg.seed, 40))


def run_stage1(cfg, corpus=None, out_dir=None):
    """Self-distillation on the corpus; returns a RunState with teacher embeddings."""
    corpus = corpus if corpus is not None else generate_corpus(cfg.corpus_spec())
    t0 = time.perf_counter()
    state, log = train_dino(corpus.features, cfg.dino_config(), seed=int(make_rng(cfg.seed, 1).integers(2**63)))
    emb = state.embed(corpus.features)
    trials = make_trials(cfg, corpus)
    eer, dcf = evaluate(emb, corpus.ids, trials, cfg.p_target)
    params = state.teacher if cfg.extract_with == "teacher" else state.student
    enc = {k: v.copy() for k, v in params.items() if k.startswith("enc.")}
    info = {"eer": eer, "min_dcf": dcf, "final_loss": log[-1][4], "seconds": time.perf_counter() - t0}
    if out_dir:
        write_loss_log(os.path.join(out_dir, "dino_loss.csv"), log)
        save_checkpoint(os.path.join(out_dir, "checkpoint_stage1.dsv"), state)
        evalkit.write_emb1(os.path.join(out_dir, "emb_stage1.emb1"), emb, corpus.ids)
        evalkit.write_trials(os.path.join(out_dir, "trials.txt"), trials)
    return RunState(corpus, enc, emb, trials, info)


def _lr(cfg, epoch):
    if cfg.epochs <= 1:
        return cfg.lr_start
    frac = (epoch - 1) / (cfg.epochs - 1)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


def _gate_for_epoch(cfg, epoch, prev_ledger):
    """(tau, GateState or None, fallback) used to gate this epoch."""
    if cfg.gate_mode == "none" or epoch <= cfg.warmup_epochs and cfg.gate_mode != "fixed":
        return math.inf, None, False
    if cfg.gate_mode == "fixed":
        return cfg.fixed_tau, None, False
    try:
        g = lossgate.refresh_gate(prev_ledger)
    except (lossgate.InsufficientLossHistory, lossgate.DegenerateLossDistribution):
        return math.inf, None, True
    return g.tau, g, g.fallback


def train_stage2(params, features, ids, labels, cfg, rng, ledger_path=None):
    """Train encoder + classifier on fixed pseudo labels.

    Returns (params, epoch records, gate states, final-epoch DLG mask).
    """
    ocfg = cfg.objective_config()
    use_lc = cfg.gate_mode == "dynamic+lc"
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    n_batches = math.ceil(n / cfg.batch_size)
    prev = None
    records, gates = [], []
    retained = np.zeros(n, dtype=bool)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    for epoch in range(1, cfg.epochs + 1):
        tau, gate, fallback = _gate_for_epoch(cfg, epoch, prev)
        if gate is not None:
            gates.append(gate)
        lr = _lr(cfg, epoch)
        ledger = lossgate.LossLedger(epoch)
        order = rng.permutation(n)
        kept = np.zeros(n, dtype=bool)
        corrected = np.zeros(n, dtype=bool)
        total = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb = x[idx]
            x_aug = xb + cfg.augment_noise * rng.standard_normal(xb.shape)
            p_hat = predict_proba(params, xb, ocfg) if use_lc else None
            loss, grads, info = total_stage2_loss(params, x_aug, labels[idx], p_hat, tau, ocfg, use_lc)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite stage II loss at epoch {epoch}")
            ledger.record(ids[idx], info["losses"])
            kept[idx] = info["dlg_mask"]
            corrected[idx] = info["lc_mask"]
            total += loss
            for k in params:
                velocity[k] = cfg.momentum * velocity[k] + grads[k]
                params[k] = params[k] - lr * velocity[k]
            w = params["cls.W"]
            params["cls.W"] = w / np.linalg.norm(w, axis=1, keepdims=True)
        if len(ledger) != n:
            raise AssertionError("ledger must hold exactly one loss per training utterance")
        if ledger_path:
            lossgate.write_ledger_csv(ledger_path, ledger, append=epoch > 1)
        records.append(EpochRecord(epoch, float(tau), math.log(tau) if 0 < tau < math.inf else float(tau),
                                   bool(fallback), float(kept.mean()), float(corrected.mean()),
                                   total / n_batches, lr))
        prev = ledger
        retained = kept
    return params, records, gates, retained


def run_iteration(state, iteration, cfg, out_dir=None):
    """One round of cluster -> pseudo-label training -> re-extraction."""
    corpus = state.corpus
    assignment = cluster.kmeans(state.embeddings, cfg.clusters, n_init=cfg.kmeans_restarts,
                                rng=make_rng(cfg.seed, 10, iteration), ids=corpus.ids)
    pseudo = assignment.labels
    diag = _diagnostics(pseudo, corpus)
    if cfg.label_noise > 0:
        pseudo = inject_label_noise(pseudo, cfg.label_noise, cfg.clusters, make_rng(cfg.seed, 30, iteration))

    widen = iteration == cfg.iterations and cfg.widen_final > 1
    if widen or not cfg.warm_start:
        params = init_encoder(make_rng(cfg.seed, 50, iteration), cfg.dim, cfg.enc_hidden * cfg.widen_final
                              if widen else cfg.enc_hidden, cfg.d_emb)
    else:
        params = {k: v.copy() for k, v in state.params.items()}
    if cfg.head_init == "centroids" and not widen:
        # rows start on the cluster means, so the head already agrees with the clean pseudo labels
        c = assignment.centroids
        params["cls.W"] = c / np.linalg.norm(c, axis=1, keepdims=True)
    else:
        params["cls.W"] = init_classifier(make_rng(cfg.seed, 60, iteration), cfg.clusters, cfg.d_emb)

    ledger_path = os.path.join(out_dir, f"loss_iter{iteration}.csv") if out_dir else None
    params, records, gates, retained = train_stage2(
        params, corpus.features, corpus.ids, pseudo, cfg, make_rng(cfg.seed, 20, iteration), ledger_path)

    enc = {k: v for k, v in params.items() if k.startswith("enc.")}
    emb = encoder_forward(enc, corpus.features)[0]
    eer, dcf = evaluate(emb, corpus.ids, state.trials, cfg.p_target)
    noisy_diag = _diagnostics(pseudo, corpus, retained)
    report = IterationReport(
        iteration=iteration, gate_mode=cfg.gate_mode, purity=diag["purity"], nmi=diag["nmi"],
        eer=eer, min_dcf=dcf, label_noise=cfg.label_noise,
        full_label_purity=noisy_diag["purity"],
        retained_purity=noisy_diag.get("retained_purity", float("nan")),
        epochs=records,
    )
    if out_dir:
        cluster.write_assignment_csv(os.path.join(out_dir, f"assignment_iter{iteration}.csv"), assignment)
        lossgate.write_gate_csv(os.path.join(out_dir, f"gates_iter{iteration}.csv"), gates)
        evalkit.write_emb1(os.path.join(out_dir, f"emb_iter{iteration}.emb1"), emb, corpus.ids)
        meta = {"pipeline": asdict(cfg), "iteration": iteration,
                "vectors": sorted(k for k, v in params.items() if np.ndim(v) == 1)}
        write_params(os.path.join(out_dir, f"checkpoint_iter{iteration}.dsv"), meta, params)
    return RunState(corpus, enc, emb, state.trials, state.stage1), report


def run_pipeline(cfg, out_dir=None):
    """Stage I then cfg.iterations Stage II rounds. Returns (reports, final RunState)."""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_config_file(os.path.join(out_dir, "config.cfg"), cfg)
    reports = []
    state = None
    try:
        state = run_stage1(cfg, out_dir=out_dir)
        for it in range(1, cfg.iterations + 1):
            state, rep = run_iteration(state, it, cfg, out_dir)
            reports.append(rep)
            if out_dir:
                write_reports(out_dir, reports, _stage1_summary(state))
    except Exception as exc:
        if out_dir:
            write_reports(out_dir, reports, _stage1_summary(state) if state else {},
                          failed=f"{type(exc).__name__}: {exc}")
        raise
    if out_dir:
        evalkit.write_emb1(os.path.join(out_dir, "emb_final.emb1"), state.embeddings, state.corpus.ids)
    return reports, state


def _stage1_summary(state):
    # wall-clock time would break byte-identical reruns
    return {k: v for k, v in state.stage1.items() if k != "seconds"}


def load_encoder(path):
    meta, params, _, _ = read_params(path)
    if "teacher.enc.W1" in params:
        which = meta.get("dino", {}).get("extract_with", "teacher")
        prefix = "teacher." if which == "teacher" else ""
        return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix + "enc.")}
    return {k: v for k, v in params.items() if k.startswith("enc.")}
