"""Per-operation oracles that need desk-scale trained models (shared session fixtures)."""
import numpy as np
import pytest

from conftest import SEEDS
from fewbit.analysis import neighbor_table, word_similarity
from fewbit.privacy import kanon_empirical
from fewbit.tasks import MOTIONS, gen_qa

pytestmark = pytest.mark.slow


def _mean(sweep, name):
    return sweep.mean(name)


def test_fc1000_close_to_floats(motion_sweep):
    assert abs(_mean(motion_sweep, 1000) - _mean(motion_sweep, "floats")) <= 0.02


def test_fc1_beats_q_only(motion_sweep):
    assert _mean(motion_sweep, 1) > _mean(motion_sweep, "q_only")


def test_floats_reaches_desk_target(motion_sweep):
    assert _mean(motion_sweep, "floats") >= 0.95


def test_floats_upper_bounds_featcomp(motion_sweep):
    floats = _mean(motion_sweep, "floats")
    assert all(floats >= _mean(motion_sweep, n) - 0.01 for n in motion_sweep.levels)


def test_fc10_within_ten_points_of_floats(motion_sweep):
    assert _mean(motion_sweep, "floats") - _mean(motion_sweep, 10) <= 0.10


def test_q_only_at_chance(motion_sweep, transfer_runs):
    assert _mean(motion_sweep, "q_only") == pytest.approx(0.20, abs=0.03)
    assert transfer_runs["q_only"]["shape"] == pytest.approx(0.25, abs=0.03)


def test_same_seed_same_accuracy(toy_data, base_config, motion_sweep):
    from fewbit.train import train_task

    again = train_task(base_config.replace(seed=1, n_bits=4), toy_data, "motion")
    assert again.accuracy == motion_sweep.run("task", 4, 1).accuracy


def test_noise_robust_predictions(toy_data, motion_sweep):
    model = motion_sweep.run("floats", None, 0).model
    X, _, q = toy_data.arrays("motion", "eval")
    noisy = X + np.random.default_rng(0).normal(0, 0.05, size=X.shape).astype(np.float32)
    changed = np.mean(model.predict(X, q) != model.predict(noisy, q))
    assert changed < 0.05


def test_r_only_reconstruction_descends(ablation_runs):
    for run in ablation_runs["r_only"]:
        recon = [h["recon_loss"] for h in run.model.recon_history_]
        assert all(b <= a for a, b in zip(recon, recon[1:])), recon


def test_task_plus_r_between_r_only_and_task(motion_sweep, ablation_runs):
    task = np.mean([motion_sweep.run("task", 10, s).accuracy for s in SEEDS])
    r_only = np.mean([r.accuracy for r in ablation_runs["r_only"]])
    plus_r = np.mean([r.accuracy for r in ablation_runs["task_plus_r"]])
    assert r_only <= plus_r <= task


def test_r_only_gap_shrinks_at_1000_bits(toy_data, base_config, motion_sweep):
    from fewbit.train import train_r_only

    gaps = []
    for s in SEEDS:
        backbone = motion_sweep.run("floats", None, s).model
        run = train_r_only(base_config.replace(seed=s, n_bits=1000), toy_data, "motion", backbone=backbone)
        gaps.append(motion_sweep.run("task", 1000, s).accuracy - run.accuracy)
    assert np.mean(gaps) < 0.05


def test_self_transfer_matches_source(transfer_runs):
    m, own = transfer_runs["matrix"], transfer_runs["own"]
    assert abs(m["motion"]["motion"] - own["motion"]) <= 0.03


def test_shape_codes_carry_no_motion(transfer_runs):
    assert abs(transfer_runs["matrix"]["shape"]["motion"] - transfer_runs["q_only"]["motion"]) <= 0.03


def test_kanon_on_trained_codes(toy_data, motion_sweep):
    codes = motion_sweep.run("task", 10, 0).model.transform(toy_data.eval.frames)
    rep = kanon_empirical(codes, k_min=5)
    assert rep.n_users == 1000 and rep.n_buckets <= 1024
    assert rep.below_k_min == (rep.min_bucket < 5)


def test_word_neighbors_cluster_motion_words(toy_data, motion_sweep):
    """Nearest neighbour of each motion answer word is another motion word (>= 4/5, every seed)."""
    videos = toy_data.eval
    qa = gen_qa(videos, "all")
    hits = []
    for s in SEEDS:
        bits = motion_sweep.run("task", 10, s).model.transform(videos.frames)
        codes = {int(v): b for v, b in zip(videos.ids, bits)}
        table = neighbor_table(word_similarity(qa.records(), codes, top_k=7))
        hits.append(sum(table[w][0] in MOTIONS for w in MOTIONS))
    assert all(h >= 4 for h in hits), f"motion-word rank-1 hits per seed: {hits} (need >= 4 of 5)"
