"""Verification trials, cosine scoring, EER / minDCF and the EMB1 container.

EMB1 layout (all little-endian):
    b"EMB1" | uint32 count | uint32 dim | float32[count*dim] row-major | uint64[count] ids
"""
import struct

import numpy as np

EMB1_MAGIC = b"EMB1"


def write_emb1(path, embeddings, ids):
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    ids = np.ascontiguousarray(ids, dtype="<u8")
    if emb.ndim != 2 or len(ids) != emb.shape[0]:
        raise ValueError("embeddings must be (count, dim) with one id per row")
    with open(path, "wb") as f:
        f.write(EMB1_MAGIC)
        f.write(struct.pack("<II", emb.shape[0], emb.shape[1]))
        f.write(emb.tobytes())
        f.write(ids.tobytes())


def read_emb1(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != EMB1_MAGIC:
        raise ValueError(f"{path}: not an EMB1 file")
    count, dim = struct.unpack_from("<II", data, 4)
    off = 12
    expected = off + 4 * count * dim + 8 * count
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    emb = np.frombuffer(data, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    ids = np.frombuffer(data, dtype="<u8", count=count, offset=off + 4 * count * dim)
    return emb.copy(), ids.astype(np.int64)


def build_trials(ids, speakers, n_pos, n_neg, rng):
    """Sample distinct same- and different-speaker pairs.

    `speakers` is the hidden truth; trials are the only place it is consumed
    outside of the clustering diagnostics. Returns a list of (id_a, id_b, same).
    """
    ids = np.asarray(ids)
    speakers = np.asarray(speakers)
    uniq, counts = np.unique(speakers, return_counts=True)
    if len(uniq) < 2 or np.sum(counts >= 2) < 2:
        raise ValueError("trials need at least 2 speakers with at least 2 utterances each")
    n = len(ids)
    same = speakers[:, None] == speakers[None, :]
    iu, ju = np.triu_indices(n, k=1)
    pair_same = same[iu, ju]
    pos_idx = np.flatnonzero(pair_same)
    neg_idx = np.flatnonzero(~pair_same)
    if n_pos > len(pos_idx) or n_neg > len(neg_idx):
        raise ValueError(f"corpus supports at most {len(pos_idx)} positive / {len(neg_idx)} negative trials")
    pos = np.sort(rng.choice(pos_idx, size=n_pos, replace=False))
    neg = np.sort(rng.choice(neg_idx, size=n_neg, replace=False))
    trials = [(int(ids[iu[k]]), int(ids[ju[k]]), True) for k in pos]
    trials += [(int(ids[iu[k]]), int(ids[ju[k]]), False) for k in neg]
    order = rng.permutation(len(trials))
    return [trials[k] for k in order]


def score_trials(embeddings, ids, trials):
    """Cosine score per trial; `embeddings[k]` belongs to `ids[k]`."""
    index = {int(i): k for k, i in enumerate(ids)}
    emb = np.asarray(embeddings, dtype=np.float64)
    rows_a, rows_b = [], []
    for a, b, _ in trials:
        for x in (a, b):
            if x not in index:
                raise KeyError(f"utterance id {x} has no embedding")
        rows_a.append(index[a])
        rows_b.append(index[b])
    ea, eb = emb[rows_a], emb[rows_b]
    na = np.linalg.norm(ea, axis=1)
    nb = np.linalg.norm(eb, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("zero-norm embedding in trials")
    return np.clip((ea * eb).sum(axis=1) / (na * nb), -1.0, 1.0)


def _operating_points(scores, labels):
    """Miss / false-alarm rates at every distinct decision threshold.

    A trial is accepted when score >= threshold. Thresholds run from below the
    lowest score (accept all) through the midpoints between consecutive
    distinct scores to above the highest score (reject all).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("scoring needs both target and non-target trials")
    uniq, inv = np.unique(scores, return_inverse=True)
    pos_at = np.bincount(inv, weights=labels, minlength=len(uniq))
    neg_at = np.bincount(inv, weights=~labels, minlength=len(uniq))
    # rejected below threshold k: scores strictly less than uniq[k]
    p_miss = np.concatenate([[0.0], np.cumsum(pos_at)]) / n_pos
    p_fa = 1.0 - np.concatenate([[0.0], np.cumsum(neg_at)]) / n_neg
    mids = (uniq[:-1] + uniq[1:]) / 2
    thresholds = np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])
    return p_miss, p_fa, thresholds


def eer(scores, labels):
    """Equal error rate with linear interpolation at the crossing.

    Returns (eer, threshold).
    """
    p_miss, p_fa, thr = _operating_points(scores, labels)
    d = p_miss - p_fa  # starts at -1, ends at +1, non-decreasing
    k = int(np.flatnonzero(d >= 0)[0])
    if d[k] == 0 or k == 0:
        return float(p_miss[k]), float(thr[k])
    w = -d[k - 1] / (d[k] - d[k - 1])
    rate = p_miss[k - 1] + w * (p_miss[k] - p_miss[k - 1])
    return float(rate), float(thr[k - 1] + w * (thr[k] - thr[k - 1]))


def min_dcf(scores, labels, p_target=0.05, c_miss=1.0, c_fa=1.0):
    p_miss, p_fa, _ = _operating_points(scores, labels)
    cost = c_miss * p_target * p_miss + c_fa * (1 - p_target) * p_fa
    return float(cost.min() / min(c_miss * p_target, c_fa * (1 - p_target)))


def write_trials(path, trials):
    with open(path, "w") as f:
        for a, b, same in trials:
            f.write(f"{int(same)} {a} {b}\n")


def read_trials(path):
    trials = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ValueError(f"{path}:{n}: expected 'label id_a id_b'")
            trials.append((int(parts[1]), int(parts[2]), parts[0] == "1"))
    return trials


def write_scores(path, scores, trials):
    with open(path, "w") as f:
        for s, (a, b, _) in zip(scores, trials):
            f.write(f"{s:.9f} {a} {b}\n")
