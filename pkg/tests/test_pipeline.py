import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest

from dlglc.pipeline import (
    PipelineConfig,
    RunState,
    config_from_mapping,
    read_config_file,
    read_summary,
    run_iteration,
    run_pipeline,
    run_stage1,
    write_config_file,
)

TINY = PipelineConfig(
    n_speakers=4, utts_per_speaker=12, dim=8, dino_epochs=2, dino_k=16, dino_batch_size=12, enc_hidden=8,
    d_emb=6, clusters=4, kmeans_restarts=2, iterations=2, epochs=4, batch_size=12, n_pos=30, n_neg=30,
)


@pytest.fixture(scope="module")
def stage1():
    return run_stage1(TINY)


def test_config_file_roundtrip(tmp_path):
    cfg = replace(TINY, gate_mode="fixed", fixed_tau=2.5, warm_start=False)
    write_config_file(tmp_path / "c.cfg", cfg)
    assert read_config_file(tmp_path / "c.cfg") == cfg


def test_config_parsing():
    (cfg,) = [config_from_mapping({"clusters": "7", "dino-ema": "false", "lr_start": "0.5"})]
    assert cfg.clusters == 7 and cfg.dino_ema is False and cfg.lr_start == 0.5
    with pytest.raises(KeyError, match="bogus"):
        config_from_mapping({"bogus": 1})
    with pytest.raises(ValueError):
        config_from_mapping({"gate_mode": "sometimes"})
    with pytest.raises(ValueError):
        config_from_mapping({"dino_ema": "perhaps"})


def test_config_comments(tmp_path):
    (tmp_path / "c.cfg").write_text("# toy\nclusters = 9  # over-provisioned\n\niterations=2\n")
    cfg = read_config_file(tmp_path / "c.cfg")
    assert cfg.clusters == 9 and cfg.iterations == 2
    (tmp_path / "bad.cfg").write_text("clusters 9\n")
    with pytest.raises(ValueError, match="bad.cfg:1"):
        read_config_file(tmp_path / "bad.cfg")


def test_training_never_reads_hidden_speakers(stage1):
    # scrambling the hidden labels may only change the diagnostics
    corpus = stage1.corpus
    scrambled = replace(corpus, true_speaker=np.random.default_rng(0).permutation(corpus.true_speaker))
    cfg = replace(TINY, label_noise=0.2)
    a, ra = run_iteration(stage1, 1, cfg)
    b, rb = run_iteration(RunState(scrambled, stage1.params, stage1.embeddings, stage1.trials), 1, cfg)
    assert a.embeddings.tobytes() == b.embeddings.tobytes()
    assert (ra.eer, ra.min_dcf) == (rb.eer, rb.min_dcf)
    assert [e.tau for e in ra.epochs] == [e.tau for e in rb.epochs]


@pytest.mark.parametrize("mode", ["none", "fixed", "dynamic", "dynamic+lc"])
def test_gate_modes(stage1, mode):
    _, rep = run_iteration(stage1, 1, replace(TINY, gate_mode=mode, label_noise=0.3))
    assert len(rep.epochs) == TINY.epochs
    taus = rep.tau_trajectory
    if mode == "none":
        assert all(math.isinf(t) for t in taus)
    elif mode == "fixed":
        assert all(t == TINY.fixed_tau for t in taus)
    else:
        assert math.isinf(taus[0])  # warm-up epoch
        assert all(t > 0 for t in taus[1:])
    assert all(0 <= f <= 1 for f in rep.retained_fractions)
    if mode != "dynamic+lc":
        assert all(e.lc_fraction == 0 for e in rep.epochs)
    assert 0 <= rep.eer <= 1 and 0 <= rep.nmi <= 1


def test_pipeline_outputs_and_determinism(tmp_path):
    ra, _ = run_pipeline(TINY, str(tmp_path / "a"))
    rb, _ = run_pipeline(TINY, str(tmp_path / "b"))
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == sorted(os.listdir(tmp_path / "b"))
    for n in ["config.cfg", "reports.csv", "summary.json", "emb_final.emb1", "trials.txt", "dino_loss.csv",
              "checkpoint_stage1.dsv", "checkpoint_iter1.dsv", "checkpoint_iter2.dsv", "gates_iter2.csv"]:
        assert n in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    stage1, reports, failed = read_summary(tmp_path / "a" / "summary.json")
    assert failed == "" and [r.iteration for r in reports] == [1, 2]
    assert reports[0].eer == ra[0].eer and reports[1].epochs == ra[1].epochs
    assert read_config_file(tmp_path / "a" / "config.cfg") == TINY
    assert len((tmp_path / "a" / "reports.csv").read_text().splitlines()) == 3


def test_failure_leaves_a_marker(tmp_path):
    bad = replace(TINY, clusters=10_000)
    with pytest.raises(ValueError):
        run_pipeline(bad, str(tmp_path))
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["failed"].startswith("ValueError") and summary["iterations"] == []


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(iterations=0)
    with pytest.raises(ValueError):
        PipelineConfig(gate_mode="dynamic", warmup_epochs=0)
    with pytest.raises(ValueError):
        PipelineConfig(head_init="zeros")
