"""Synthetic speaker corpora and the views fed to self-distillation.

A speaker is a random direction on the unit sphere; an utterance is that
direction plus isotropic Gaussian noise, renormalized. Two "long" views add
light noise, four "short" views add twice the noise and zero out a random
subset of coordinates.
"""
from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 20
    utts_per_speaker: int = 50
    dim: int = 16
    within_speaker_noise: float = 0.2
    augment_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_speakers", "utts_per_speaker", "dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.within_speaker_noise >= 0 or not self.augment_noise >= 0:
            raise ValueError("noise scales must be non-negative")


@dataclass
class Utterance:
    id: int
    features: np.ndarray
    true_speaker: int
    pseudo_label: int | None = None


@dataclass
class Corpus:
    """Struct-of-arrays corpus. `true_speaker` is for metrics only."""

    ids: np.ndarray
    features: np.ndarray
    true_speaker: np.ndarray
    pseudo_labels: np.ndarray | None = None
    spec: CorpusSpec | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        pl = None if self.pseudo_labels is None else int(self.pseudo_labels[i])
        return Utterance(int(self.ids[i]), self.features[i], int(self.true_speaker[i]), pl)

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass
class CropSet:
    long_views: np.ndarray   # (2, D)
    short_views: np.ndarray  # (4, D)

    def __post_init__(self):
        if len(self.long_views) != 2 or len(self.short_views) != 4:
            raise ValueError("a crop set holds exactly 2 long and 4 short views")


def _speaker_block(spec, speaker):
    # per-speaker stream so speakers can be generated independently
    rng = make_rng(spec.seed, speaker)
    centroid = rng.standard_normal(spec.dim)
    centroid /= np.linalg.norm(centroid)
    noise = rng.standard_normal((spec.utts_per_speaker, spec.dim)) * spec.within_speaker_noise
    x = centroid + noise
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return centroid, x


def speaker_centroids(spec):
    return np.stack([_speaker_block(spec, s)[0] for s in range(spec.n_speakers)])


def generate_corpus(spec):
    feats, spk = [], []
    for s in range(spec.n_speakers):
        _, x = _speaker_block(spec, s)
        feats.append(x)
        spk.append(np.full(spec.utts_per_speaker, s, dtype=np.int64))
    features = np.concatenate(feats)
    return Corpus(
        ids=np.arange(len(features), dtype=np.int64),
        features=features,
        true_speaker=np.concatenate(spk),
        spec=spec,
    )


def multi_crop_batch(features, rng, augment_noise, mask_fraction=0.25, short_noise_factor=2.0,
                     n_long=2, n_short=4):
    """Views for a batch of feature rows: (B, n_long, D) and (B, n_short, D)."""
    x = np.asarray(features, dtype=np.float64)
    b, d = x.shape
    long_views = x[:, None, :] + augment_noise * rng.standard_normal((b, n_long, d))
    short_views = x[:, None, :] + short_noise_factor * augment_noise * rng.standard_normal((b, n_short, d))
    n_mask = int(round(mask_fraction * d))
    if n_mask > 0:
        # argsort of uniforms = an independent random permutation per view
        order = np.argsort(rng.random((b, n_short, d)), axis=-1)
        mask = np.ones((b, n_short, d))
        np.put_along_axis(mask, order[..., :n_mask], 0.0, axis=-1)
        short_views = short_views * mask
    return long_views, short_views


def multi_crop(u, rng, augment_noise, mask_fraction=0.25, short_noise_factor=2.0):
    feats = u.features if isinstance(u, Utterance) else np.asarray(u, dtype=np.float64)
    lv, sv = multi_crop_batch(feats[None, :], rng, augment_noise, mask_fraction, short_noise_factor)
    return CropSet(lv[0], sv[0])


def inject_label_noise(labels, flip_rate, n_classes, rng):
    """Replace each label, with probability flip_rate, by a different class."""
    if not 0.0 <= flip_rate <= 1.0:
        raise ValueError(f"flip_rate must lie in [0, 1], got {flip_rate}")
    labels = np.asarray(labels, dtype=np.int64)
    if flip_rate > 0 and n_classes < 2:
        raise ValueError("label noise needs at least 2 classes")
    flip = rng.random(len(labels)) < flip_rate
    offset = rng.integers(1, max(n_classes, 2), size=len(labels))
    return np.where(flip, (labels + offset) % n_classes, labels)


def save_corpus(corpus, emb_path, manifest_path):
    from .evalkit import write_emb1

    write_emb1(emb_path, corpus.features, corpus.ids)
    with open(manifest_path, "w") as f:
        for i, s in zip(corpus.ids, corpus.true_speaker):
            f.write(f"{i}\t{s}\n")


def load_corpus(emb_path, manifest_path):
    from .evalkit import read_emb1

    feats, ids = read_emb1(emb_path)
    truth = {}
    with open(manifest_path) as f:
        for line in f:
            if line.strip():
                i, s = line.split("\t")
                truth[int(i)] = int(s)
    spk = np.array([truth[int(i)] for i in ids], dtype=np.int64)
    return Corpus(ids=ids.astype(np.int64), features=feats.astype(np.float64), true_speaker=spk)
