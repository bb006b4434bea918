import numpy as np
import pytest

from dlglc.datagen import (
    CorpusSpec,
    CropSet,
    generate_corpus,
    inject_label_noise,
    load_corpus,
    multi_crop,
    save_corpus,
)
from dlglc.numerics import make_rng


def test_generation_is_deterministic():
    spec = CorpusSpec(n_speakers=2, utts_per_speaker=3, dim=8, seed=7)
    a, b = generate_corpus(spec), generate_corpus(spec)
    assert a.features.tobytes() == b.features.tobytes()
    np.testing.assert_array_equal(a.true_speaker, b.true_speaker)


def test_zero_noise_collapses_onto_centroid():
    c = generate_corpus(CorpusSpec(n_speakers=3, utts_per_speaker=4, dim=5, within_speaker_noise=0.0))
    for s in range(3):
        rows = c.features[c.true_speaker == s]
        assert np.ptp(rows, axis=0).max() == 0.0


def test_features_are_unit_norm():
    c = generate_corpus(CorpusSpec(n_speakers=5, utts_per_speaker=10, dim=16, within_speaker_noise=0.7))
    np.testing.assert_allclose(np.linalg.norm(c.features, axis=1), 1.0, atol=1e-9)


def test_within_speaker_similarity_beats_across():
    c = generate_corpus(CorpusSpec(n_speakers=20, utts_per_speaker=50, dim=16, within_speaker_noise=0.3))
    sims = c.features @ c.features.T
    same = c.true_speaker[:, None] == c.true_speaker[None, :]
    off_diag = ~np.eye(len(c), dtype=bool)
    assert sims[same & off_diag].mean() > sims[~same].mean()


def test_speakers_use_independent_substreams():
    # adding speakers must not change the existing ones
    small = generate_corpus(CorpusSpec(n_speakers=2, utts_per_speaker=4, dim=6, seed=3))
    big = generate_corpus(CorpusSpec(n_speakers=5, utts_per_speaker=4, dim=6, seed=3))
    np.testing.assert_array_equal(small.features, big.features[:8])


def test_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(n_speakers=0)
    with pytest.raises(ValueError):
        CorpusSpec(within_speaker_noise=-1.0)


def test_crop_without_noise_or_mask_returns_input():
    x = make_rng(0).standard_normal(12)
    cs = multi_crop(x, make_rng(1), augment_noise=0.0, mask_fraction=0.0)
    for v in np.concatenate([cs.long_views, cs.short_views]):
        np.testing.assert_array_equal(v, x)


def test_crop_shape_and_determinism():
    c = generate_corpus(CorpusSpec(n_speakers=2, utts_per_speaker=2, dim=16))
    a = multi_crop(c[0], make_rng(5), 0.1)
    b = multi_crop(c[0], make_rng(5), 0.1)
    assert a.long_views.shape == (2, 16) and a.short_views.shape == (4, 16)
    assert a.long_views.tobytes() == b.long_views.tobytes()
    assert a.short_views.tobytes() == b.short_views.tobytes()
    # a quarter of each short view is masked
    assert all((v == 0).sum() == 4 for v in a.short_views)


def test_cropset_counts_enforced():
    with pytest.raises(ValueError):
        CropSet(np.zeros((3, 4)), np.zeros((4, 4)))


def test_short_views_are_lossier_than_long_views():
    c = generate_corpus(CorpusSpec(n_speakers=4, utts_per_speaker=5, dim=16))
    rng = make_rng(11)
    long_cos, short_cos = [], []
    for i in range(1000):
        u = c[i % len(c)]
        cs = multi_crop(u, rng, 0.1)
        f = u.features
        long_cos += [v @ f / (np.linalg.norm(v) * np.linalg.norm(f)) for v in cs.long_views]
        short_cos += [v @ f / (np.linalg.norm(v) * np.linalg.norm(f)) for v in cs.short_views]
    assert np.mean(long_cos) > np.mean(short_cos)


def test_label_noise_extremes():
    labels = make_rng(0).integers(0, 5, size=200)
    np.testing.assert_array_equal(inject_label_noise(labels, 0.0, 5, make_rng(1)), labels)
    binary = make_rng(0).integers(0, 2, size=200)
    np.testing.assert_array_equal(inject_label_noise(binary, 1.0, 2, make_rng(1)), 1 - binary)


def test_label_noise_rate_concentrates():
    labels = make_rng(0).integers(0, 10, size=10_000)
    noisy = inject_label_noise(labels, 0.3, 10, make_rng(2))
    assert abs((noisy != labels).mean() - 0.3) < 0.02
    assert noisy.min() >= 0 and noisy.max() < 10


def test_label_noise_validation():
    with pytest.raises(ValueError):
        inject_label_noise([0, 0], 0.5, 1, make_rng(0))
    with pytest.raises(ValueError):
        inject_label_noise([0, 1], 1.5, 2, make_rng(0))


def test_corpus_roundtrip(tmp_path):
    c = generate_corpus(CorpusSpec(n_speakers=3, utts_per_speaker=4, dim=5))
    save_corpus(c, tmp_path / "c.emb1", tmp_path / "c.tsv")
    back = load_corpus(tmp_path / "c.emb1", tmp_path / "c.tsv")
    np.testing.assert_array_equal(back.ids, c.ids)
    np.testing.assert_array_equal(back.true_speaker, c.true_speaker)
    np.testing.assert_array_equal(back.features, c.features.astype(np.float32).astype(np.float64))
    assert (tmp_path / "c.tsv").read_text().splitlines()[5] == "5\t1"
