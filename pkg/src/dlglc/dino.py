"""Stage I: teacher/student self-distillation on multi-crop views.

Parameters live in plain dicts of float64 arrays with ``enc.*`` keys for the
encoder and ``head.*`` keys for the projection head. Dict order is the
declared order used by checkpoints.

Encoder:   x -> tanh(W1) -> tanh(W2) -> W3 -> embedding e
Head:      e -> tanh(H1) -> tanh(H2) -> H3 -> l2-normalize -> V (rows unit) -> K logits
"""
import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .datagen import multi_crop_batch
from .numerics import (
    cosine_rows_backward,
    cosine_similarity,
    cross_entropy,
    l2_normalize,
    l2_normalize_backward,
    LOG_FLOOR,
    linear_backward,
    log_softmax,
    make_rng,
    soft_cross_entropy_from_logits,
    softmax_with_temperature,
    tanh_backward,
)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DinoConfig:
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    alpha: float = 0.001
    lambda_start: float = 0.996
    lambda_end: float = 1.0
    center_momentum: float = 0.9
    lr: float = 0.05
    batch_size: int = 50
    epochs: int = 30
    d_in: int = 16
    enc_hidden: int = 64
    d_emb: int = 32
    head_hidden: int = 64
    bottleneck: int = 32
    k: int = 256
    augment_noise: float = 0.1
    mask_fraction: float = 0.25
    short_noise_factor: float = 2.0
    ce_mean: bool = True          # divide the 8-pair cross-entropy sum by 8
    ema: bool = True              # False: teacher is the student, gradient through both branches
    cosine_schedule: bool = True  # False: lambda fixed at lambda_start
    extract_with: str = "teacher"

    def __post_init__(self):
        if not 0 < self.teacher_temp < self.student_temp:
            raise ValueError("need 0 < teacher_temp < student_temp")
        if not 0 < self.lambda_start <= self.lambda_end <= 1:
            raise ValueError("need 0 < lambda_start <= lambda_end <= 1")
        if self.extract_with not in ("teacher", "student"):
            raise ValueError("extract_with must be 'teacher' or 'student'")


# ---------------------------------------------------------------- networks

def _dense(rng, n_in, n_out):
    return rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)


def init_encoder(rng, d_in=16, hidden=64, d_emb=32):
    return {
        "enc.W1": _dense(rng, d_in, hidden), "enc.b1": np.zeros(hidden),
        "enc.W2": _dense(rng, hidden, hidden), "enc.b2": np.zeros(hidden),
        "enc.W3": _dense(rng, hidden, d_emb), "enc.b3": np.zeros(d_emb),
    }


def encoder_forward(p, x):
    h1 = np.tanh(x @ p["enc.W1"] + p["enc.b1"])
    h2 = np.tanh(h1 @ p["enc.W2"] + p["enc.b2"])
    e = h2 @ p["enc.W3"] + p["enc.b3"]
    return e, (x, h1, h2)


def encoder_backward(p, cache, de):
    x, h1, h2 = cache
    g = {}
    dh2, g["enc.W3"], g["enc.b3"] = linear_backward(de, h2, p["enc.W3"])
    dz2 = tanh_backward(dh2, h2)
    dh1, g["enc.W2"], g["enc.b2"] = linear_backward(dz2, h1, p["enc.W2"])
    dz1 = tanh_backward(dh1, h1)
    _, g["enc.W1"], g["enc.b1"] = linear_backward(dz1, x, p["enc.W1"])
    return g


def init_head(rng, d_emb=32, hidden=64, bottleneck=32, k=256):
    v = rng.standard_normal((k, bottleneck))
    return {
        "head.H1": _dense(rng, d_emb, hidden), "head.c1": np.zeros(hidden),
        "head.H2": _dense(rng, hidden, hidden), "head.c2": np.zeros(hidden),
        "head.H3": _dense(rng, hidden, bottleneck), "head.c3": np.zeros(bottleneck),
        "head.V": v / np.linalg.norm(v, axis=1, keepdims=True),
    }


def head_forward(p, e):
    z1 = np.tanh(e @ p["head.H1"] + p["head.c1"])
    z2 = np.tanh(z1 @ p["head.H2"] + p["head.c2"])
    b = z2 @ p["head.H3"] + p["head.c3"]
    bn, bnorm = l2_normalize(b)
    vn, vnorm = l2_normalize(p["head.V"])
    return bn @ vn.T, (e, z1, z2, bn, bnorm, vn, vnorm)


def head_backward(p, cache, dlogits):
    e, z1, z2, bn, bnorm, vn, vnorm = cache
    g = {}
    g["head.V"] = l2_normalize_backward(dlogits.T @ bn, vn, vnorm)
    db = l2_normalize_backward(dlogits @ vn, bn, bnorm)
    dz2, g["head.H3"], g["head.c3"] = linear_backward(db, z2, p["head.H3"])
    dz2 = tanh_backward(dz2, z2)
    dz1, g["head.H2"], g["head.c2"] = linear_backward(dz2, z1, p["head.H2"])
    dz1 = tanh_backward(dz1, z1)
    de, g["head.H1"], g["head.c1"] = linear_backward(dz1, e, p["head.H1"])
    return g, de


def init_student(rng, cfg):
    p = init_encoder(rng, cfg.d_in, cfg.enc_hidden, cfg.d_emb)
    p.update(init_head(rng, cfg.d_emb, cfg.head_hidden, cfg.bottleneck, cfg.k))
    return p


def renormalize_head(p):
    if "head.V" in p:
        v = p["head.V"]
        p["head.V"] = v / np.linalg.norm(v, axis=1, keepdims=True)
    return p


# ---------------------------------------------------------------- losses

def dino_ce_loss(teacher_long, student_short, mean=True):
    """Cross-entropy summed over every (long teacher, short student) pair.

    Inputs are probability rows of shape (2, K) and (4, K).
    """
    t = np.asarray(teacher_long, dtype=np.float64)
    s = np.asarray(student_short, dtype=np.float64)
    if t.ndim != 2 or s.ndim != 2 or len(t) != 2 or len(s) != 4:
        raise ValueError("expected 2 teacher (long) and 4 student (short) distributions")
    total = sum(cross_entropy(tl, ss) for tl in t for ss in s)
    return float(total / 8 if mean else total)


def cosine_consistency_loss(long_embs, short_embs):
    if len(long_embs) != 2 or len(short_embs) != 4:
        raise ValueError("expected 2 long and 4 short embeddings")
    return float(sum(1.0 - cosine_similarity(a, b) for a in long_embs for b in short_embs))


def lambda_schedule(step, total_steps, lambda_start=0.996, lambda_end=1.0):
    """Cosine ramp of the EMA coefficient from lambda_start to lambda_end."""
    if total_steps <= 0:
        return lambda_end
    step = min(max(step, 0), total_steps)
    # endpoints returned verbatim, free of cancellation error
    if step == 0:
        return lambda_start
    if step == total_steps:
        return lambda_end
    return lambda_end - (lambda_end - lambda_start) * (math.cos(math.pi * step / total_steps) + 1) / 2


def ema_update(teacher, student, lam):
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter sets differ")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        out[k] = lam * t + (1.0 - lam) * s
    return out


def center_update(center, batch_teacher_logits, momentum=0.9):
    logits = np.asarray(batch_teacher_logits, dtype=np.float64)
    if logits.size == 0 or len(logits) == 0:
        raise ValueError("empty teacher batch")
    return momentum * center + (1.0 - momentum) * logits.reshape(-1, logits.shape[-1]).mean(axis=0)


def teacher_targets(teacher, center, long_views, cfg):
    """Teacher probabilities for (B, 2, D) long views plus the raw logits."""
    b, n_long, d = long_views.shape
    e, _ = encoder_forward(teacher, long_views.reshape(-1, d))
    logits, _ = head_forward(teacher, e)
    probs = softmax_with_temperature(logits - center, cfg.teacher_temp)
    return probs.reshape(b, n_long, -1), logits


def dino_total_loss(student, teacher_probs, long_views, short_views, cfg, center=None):
    """L_ce + alpha * L_cos for one batch, averaged over utterances.

    `teacher_probs` (B, 2, K) is a constant target. With `teacher_probs` None
    the student scores its own long views (after subtracting `center`) and
    the gradient flows through that branch too. Returns
    (loss, loss_ce, loss_cos, grads) with grads keyed like `student`.
    """
    b, n_long, d = long_views.shape
    n_short = short_views.shape[1]
    pairs = n_long * n_short
    shared = teacher_probs is None
    views = np.concatenate([long_views.reshape(-1, d), short_views.reshape(-1, d)])
    e, enc_cache = encoder_forward(student, views)
    e_long = e[: b * n_long].reshape(b, n_long, -1)
    e_short = e[b * n_long:]
    logits_all, head_cache = head_forward(student, e if shared else e_short)
    logits_s = logits_all[-b * n_short:].reshape(b, n_short, -1)
    if shared:
        logits_t = logits_all[: b * n_long]
        teacher_probs = softmax_with_temperature(logits_t - center, cfg.teacher_temp).reshape(b, n_long, -1)

    # every short view is scored against the sum of both teacher targets
    t_sum = teacher_probs.sum(axis=1, keepdims=True)             # (B, 1, K)
    target = np.broadcast_to(t_sum, logits_s.shape)
    norm = (pairs if cfg.ce_mean else 1) * b
    # cross_entropy is linear in the target, so summing targets sums the pair terms
    ce_rows, dlog = soft_cross_entropy_from_logits(target, logits_s, cfg.student_temp)
    loss_ce = ce_rows.sum() / norm
    dlog = dlog / norm

    # cosine consistency between every (long, short) embedding pair
    el = np.repeat(e_long, n_short, axis=1).reshape(-1, e.shape[1])
    es = np.tile(e_short.reshape(b, n_short, -1), (1, n_long, 1)).reshape(-1, e.shape[1])
    el_hat, _ = l2_normalize(el)
    es_hat, _ = l2_normalize(es)
    cos = (el_hat * es_hat).sum(axis=1)
    loss_cos = (1.0 - cos).sum() / b
    dcos = np.full(len(cos), -cfg.alpha / b)
    d_el, d_es = cosine_rows_backward(el, es, dcos)

    de_long = d_el.reshape(b, n_long, n_short, -1).sum(axis=2).reshape(-1, e.shape[1])
    dlog = dlog.reshape(-1, dlog.shape[-1])
    if shared:
        # d ce / d teacher prob is the summed -log q of the short views
        log_q = np.maximum(log_softmax(logits_s, cfg.student_temp), math.log(LOG_FLOOR))
        g_t = -log_q.sum(axis=1, keepdims=True) / norm                 # (B, 1, K)
        t = teacher_probs
        dlog_t = t * (g_t - (t * g_t).sum(axis=-1, keepdims=True)) / cfg.teacher_temp
        g_head, de_all = head_backward(student, head_cache, np.concatenate([dlog_t.reshape(-1, dlog.shape[-1]),
                                                                            dlog]))
        de_long = de_long + de_all[: b * n_long]
        de_short = de_all[b * n_long:]
    else:
        g_head, de_short = head_backward(student, head_cache, dlog)
    de_short = de_short + d_es.reshape(b, n_long, n_short, -1).sum(axis=1).reshape(-1, e.shape[1])
    g = encoder_backward(student, enc_cache, np.concatenate([de_long, de_short]))
    g.update(g_head)
    grads = {k: g[k] for k in student}
    return loss_ce + cfg.alpha * loss_cos, loss_ce, loss_cos, grads


# ---------------------------------------------------------------- training

@dataclass
class DinoState:
    student: dict
    teacher: dict
    center: np.ndarray
    step: int
    total_steps: int
    config: DinoConfig

    def embed(self, features, which=None):
        which = which or self.config.extract_with
        params = self.teacher if which == "teacher" else self.student
        return encoder_forward(params, np.asarray(features, dtype=np.float64))[0]


def init_state(cfg, seed, total_steps):
    student = init_student(make_rng(seed, 0), cfg)
    teacher = {k: v.copy() for k, v in student.items()}
    return DinoState(student, teacher, np.zeros(cfg.k), 0, total_steps, cfg)


def train_step(state, batch_features, rng):
    cfg = state.config
    long_v, short_v = multi_crop_batch(batch_features, rng, cfg.augment_noise, cfg.mask_fraction,
                                       cfg.short_noise_factor)
    t_probs, t_logits = teacher_targets(state.teacher, state.center, long_v, cfg)
    if cfg.ema:
        loss, l_ce, l_cos, grads = dino_total_loss(state.student, t_probs, long_v, short_v, cfg)
    else:
        # teacher and student are one network; nothing stops the gradient between branches
        loss, l_ce, l_cos, grads = dino_total_loss(state.student, None, long_v, short_v, cfg, state.center)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite DINO loss at step {state.step} (ce={l_ce}, cos={l_cos})")
    for k in state.student:
        state.student[k] = state.student[k] - cfg.lr * grads[k]
    renormalize_head(state.student)
    if cfg.ema:
        lam = (lambda_schedule(state.step, state.total_steps, cfg.lambda_start, cfg.lambda_end)
               if cfg.cosine_schedule else cfg.lambda_start)
        state.teacher = renormalize_head(ema_update(state.teacher, state.student, lam))
    else:
        lam = 0.0
        state.teacher = {k: v.copy() for k, v in state.student.items()}
    state.center = center_update(state.center, t_logits, cfg.center_momentum)
    state.step += 1
    return loss, l_ce, l_cos, lam


def train_dino(features, cfg, seed):
    """SGD on the student, EMA teacher, running center. Returns (state, log rows).

    Log rows hold per-epoch means: (epoch, step, loss_ce, loss_cos, loss_total, lambda).
    """
    x = np.asarray(features, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty corpus")
    n_batches = math.ceil(len(x) / cfg.batch_size)
    state = init_state(cfg, seed, cfg.epochs * n_batches)
    rng = make_rng(seed, 1)
    log = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        sums = np.zeros(3)
        lam = cfg.lambda_start
        for i in range(n_batches):
            idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
            loss, l_ce, l_cos, lam = train_step(state, x[idx], rng)
            sums += (l_ce, l_cos, loss)
        sums /= n_batches
        log.append((epoch, state.step, float(sums[0]), float(sums[1]), float(sums[2]), float(lam)))
    return state, log


def write_loss_log(path, log):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "loss_ce", "loss_cos", "loss_total", "lambda"])
        for row in log:
            w.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])


# ---------------------------------------------------------------- checkpoint
# "DSV1" | uint32 meta_len | meta JSON | uint32 step | uint32 total_steps |
# uint32 n | n x (uint16 name_len | name | uint32 rows | uint32 cols | float64[rows*cols])
# Vectors are stored as 1-row matrices. DINO checkpoints hold the student
# parameters, then the teacher's (prefixed "teacher."), then "center".

CKPT_MAGIC = b"DSV1"


def write_params(path, meta, params, step=0, total_steps=0):
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        f.write(struct.pack("<III", step, total_steps, len(params)))
        for name, arr in params.items():
            a = np.ascontiguousarray(np.atleast_2d(arr), dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb + struct.pack("<II", *a.shape) + a.tobytes())


def read_params(path):
    """Returns (meta, params, step, total_steps); 1-row matrices named as vectors come back 1-D."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a DSV1 checkpoint")
    (ln,) = struct.unpack_from("<I", data, 4)
    meta = json.loads(data[8:8 + ln])
    off = 8 + ln
    step, total, n = struct.unpack_from("<III", data, off)
    off += 12
    vectors = set(meta.get("vectors", []))
    params = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + nl].decode()
        off += 2 + nl
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        a = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).copy()
        off += 8 * rows * cols
        params[name] = a[0] if name in vectors else a
    return meta, params, step, total


def _vector_names(params):
    return sorted(k for k, v in params.items() if np.ndim(v) == 1)


def save_checkpoint(path, state, extra=None):
    params = dict(state.student)
    params.update({"teacher." + k: v for k, v in state.teacher.items()})
    params["center"] = state.center
    meta = {"dino": asdict(state.config), "extra": extra or {}, "vectors": _vector_names(params)}
    write_params(path, meta, params, state.step, state.total_steps)


def load_checkpoint(path):
    meta, params, step, total = read_params(path)
    known = {f.name for f in fields(DinoConfig)}
    cfg = DinoConfig(**{k: v for k, v in meta["dino"].items() if k in known})
    student = {k: v for k, v in params.items() if not k.startswith("teacher.") and k != "center"}
    teacher = {k[len("teacher."):]: v for k, v in params.items() if k.startswith("teacher.")}
    return DinoState(student, teacher, params["center"], step, total, cfg), meta.get("extra", {})


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
