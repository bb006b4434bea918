"""Dense float64 kernels shared by every training module.

Forward helpers return whatever the matching backward helper needs; nothing
here keeps state. Random streams come from numpy's PCG64 bit generator, whose
output sequence is fixed by the algorithm and identical across platforms.
"""
import numpy as np

LOG_FLOOR = 1e-12
_LOG_FLOOR_LOG = np.log(LOG_FLOOR)


def make_rng(seed, *keys):
    """PCG64 generator for `seed`, optionally forked by integer sub-keys.

    make_rng(s, 3) and make_rng(s, 4) are independent streams; the same
    (seed, keys) always reproduces the same stream.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def _check_finite(x, name):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")


def log_softmax(z, temperature=1.0):
    """Row-wise log softmax of z / temperature (last axis)."""
    z = np.asarray(z, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_with_temperature(logits, temperature=1.0):
    logits = np.asarray(logits, dtype=np.float64)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    _check_finite(logits, "logits")
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def clamped_log(p):
    return np.log(np.maximum(p, LOG_FLOOR))


def cross_entropy(target, pred):
    """-sum(target * log(pred)), with pred clamped below at 1e-12.

    Works on single distributions or on stacked rows (last axis = classes).
    """
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"dimension mismatch: {target.shape} vs {pred.shape}")
    return -(target * clamped_log(pred)).sum(axis=-1)


def soft_cross_entropy_from_logits(target, logits, temperature=1.0):
    """Cross-entropy of softmax(logits/temperature) against a constant target.

    Returns (per-row loss, d loss / d logits). The 1e-12 floor is applied in
    log space; floored entries pass no gradient.
    """
    logp = log_softmax(logits, temperature)
    active = logp > _LOG_FLOOR_LOG
    logp_c = np.where(active, logp, _LOG_FLOOR_LOG)
    loss = -(target * logp_c).sum(axis=-1)
    p = np.exp(logp)
    t_active = target * active
    grad = (p * t_active.sum(axis=-1, keepdims=True) - t_active) / temperature
    return loss, grad


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows_backward(a, b, dcos):
    """Gradients of sum(dcos * cos(a_i, b_i)) w.r.t. rows of a and b."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity of a zero-norm vector")
    ah, bh = a / na, b / nb
    cos = (ah * bh).sum(axis=-1, keepdims=True)
    d = dcos[..., None]
    return d * (bh - cos * ah) / na, d * (ah - cos * bh) / nb


def l2_normalize(x):
    """Row-wise unit normalization; returns (y, norms)."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero-norm vector")
    return x / n, n


def l2_normalize_backward(dy, y, norms):
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norms


def linear_backward(dout, x, w):
    """Backward of x @ w + b; returns (dx, dw, db)."""
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def tanh_backward(dout, y):
    return dout * (1.0 - y * y)


def relative_error(a, b):
    """Norm-wise relative difference between two arrays (0 when both are 0)."""
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
