"""Behaviour of default-budget trained models (slow; shares the run cache with the acceptance suite)."""

from __future__ import annotations

import numpy as np
import pytest
from conftest import SEEDS, default_run

from hmoe.harness.evaluate import eval_batch, evaluate
from hmoe.harness.experiments import seed_runs
from hmoe.harness.train import batch_loss
from hmoe.model import masks_for
from hmoe.routing import Modality, Strategy
from hmoe.synthdata import SNR_GRID

pytestmark = pytest.mark.slow

N_EVAL = 128


@pytest.fixture(scope="module")
def hier(run_cache):
    return seed_runs(default_run(Strategy.HIERARCHICAL), SEEDS, run_cache)


@pytest.fixture(scope="module")
def hier_nols(run_cache):
    return seed_runs(default_run(Strategy.HIERARCHICAL, train__loss__c_S="0.0"), SEEDS, run_cache)


def held_out_load_bias(run) -> float:
    task = run.run.task
    batch = eval_batch(task, None, N_EVAL, seed=999, cell=0)
    tags = np.where(np.arange(N_EVAL) % 2 == 0, int(Modality.AUDIO), int(Modality.VIDEO))
    return batch_loss(run.model, batch, tags, masks_for(tags), run.run.train.loss).loss.ls


def test_load_bias_lowers_held_out_ls(hier, hier_nols):
    on = np.array([held_out_load_bias(r) for r in hier])
    off = np.array([held_out_load_bias(r) for r in hier_nols])
    print(f"held-out L_S with load biasing {on.round(3)}, without {off.round(3)}")
    assert off.mean() - on.mean() >= 0.3


def test_clean_audio_error_below_two_percent(hier):
    rep = evaluate([r.model for r in hier], [r.run.task for r in hier], snrs=(None,), n_sequences=N_EVAL)
    assert rep.mean_error() < 0.02


def test_destroyed_audio_hits_cluster_floor(hier):
    # -80 dB leaves the audio carrying nothing; video pins the cluster only, so
    # error cannot beat 1 - C/V and should sit well below chance.
    task = hier[0].run.task
    floor = 1 - task.n_clusters / task.vocab_size
    rep = evaluate([r.model for r in hier], [r.run.task for r in hier], snrs=(-80.0,), n_sequences=N_EVAL)
    err = rep.mean_error()
    print(f"error at -80 dB {err:.4f}; floor {floor}, chance {1 - 1 / task.vocab_size:.4f}")
    assert err >= floor - 0.02
    assert err < 1 - 1 / task.vocab_size - 0.1


def test_video_only_condition_sits_at_cluster_floor(hier):
    task = hier[0].run.task
    floor = 1 - task.n_clusters / task.vocab_size
    rep = evaluate([r.model for r in hier], [r.run.task for r in hier], snrs=(None,), conditions=("V",), n_sequences=N_EVAL)
    assert rep.mean_error("V") == pytest.approx(floor, abs=0.02)


def test_error_nonincreasing_in_snr(hier):
    rep = evaluate([r.model for r in hier], [r.run.task for r in hier], snrs=SNR_GRID, n_sequences=N_EVAL)
    means = [rep.summary()[s][0] for s in SNR_GRID]
    rises = [b - a for a, b in zip(means, means[1:]) if b > a]
    print(f"mean error over SNR grid {np.round(means, 4).tolist()}")
    assert len(rises) <= 1 and all(r <= 0.01 for r in rises)
