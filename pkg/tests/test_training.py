import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from caps.core import RngState, init_parameters
from caps.encoder import encode_tensors
from caps.planner import planner_forward
from caps.scenegen import generate_dataset
from caps.training import (Checkpoint, ModelConfig, TrainConfig, WeightTable, assign_clusters,
                           compute_weights, model_param_spec, prepare, priority_sampler, train_stage1,
                           train_stage2, uniform_sampler)

SMALL = ModelConfig(d_e=16, n_heads=2, n_layers=1, K=8, hidden=32)
MIX = {"lane_follow": 0.85, "stop_behind": 0.10, "cut_in": 0.05}


@pytest.fixture(scope="module")
def toy():
    scenes, _ = generate_dataset(MIX, 64, 3)
    return scenes, prepare(scenes)


@pytest.fixture(scope="module")
def trained(toy):
    """64 scenes, 200 optimizer steps, default model size."""
    _, data = toy
    return train_stage1(data, TrainConfig(epochs=100, seed=0), ModelConfig(K=16), max_steps=200)


# -- stage 1 -------------------------------------------------------------------

def test_stage1_loss_decreases(trained):
    losses = trained.meta["step_losses"]
    assert len(losses) == 200
    assert losses[-1] <= 0.8 * losses[0]


def test_stage1_targets_are_followed(toy, trained):
    _, data = toy
    ck = trained
    with torch.no_grad():
        tok, _ = encode_tensors(data.full, ck.params, "encoder.cluster",
                                ck.model.encoder("full_horizon"))
        out = planner_forward(tok[:, 0], ck.params)
    end = out.candidates[:, :, -1]
    dist = torch.linalg.vector_norm(end - out.targets, dim=-1)
    assert dist.mean().item() < 5.0


def test_stage1_deterministic(toy):
    _, data = toy
    a = train_stage1(data, TrainConfig(epochs=2, seed=5), SMALL)
    b = train_stage1(data, TrainConfig(epochs=2, seed=5), SMALL)
    assert a.payload_crc() == b.payload_crc()
    assert a.params.equal(b.params)


def test_lambda_vq_zero_leaves_codebook(toy):
    _, data = toy
    ck = train_stage1(data, TrainConfig(epochs=3, seed=1, lambda_vq=0.0), SMALL)
    init = init_parameters(model_param_spec(SMALL), RngState(1).split(0))
    assert torch.equal(ck.params["vq.codebook"], init["vq.codebook"])
    assert not torch.equal(ck.params["planner.traj.fc1.weight"], init["planner.traj.fc1.weight"])


def test_stage1_never_reads_family_labels(toy):
    scenes, _ = toy
    shuffled = copy.deepcopy(scenes)
    fams = [s.family for s in shuffled]
    np.random.default_rng(0).shuffle(fams)
    for s, f in zip(shuffled, fams):
        s.family = f
    a = train_stage1(scenes, TrainConfig(epochs=2, seed=2), SMALL)
    b = train_stage1(shuffled, TrainConfig(epochs=2, seed=2), SMALL)
    assert a.payload_crc() == b.payload_crc()


def test_checkpoint_round_trip(tmp_path, toy):
    _, data = toy
    ck = train_stage1(data, TrainConfig(epochs=1, seed=0), SMALL)
    ck.save(tmp_path / "c.ckpt")
    back = Checkpoint.load(tmp_path / "c.ckpt")
    assert back.params.equal(ck.params)
    assert back.model == ck.model
    assert back.payload_crc() == ck.payload_crc()
    assert back.log == ck.log


# -- cluster assignment --------------------------------------------------------

def test_assignment_identity_with_code(toy):
    scenes, data = toy
    ck = train_stage1(data, TrainConfig(epochs=1, seed=0), SMALL)
    with torch.no_grad():
        tok, _ = encode_tensors(data.full.index([0]), ck.params, "encoder.cluster",
                                ck.model.encoder("full_horizon"))
        ck.params["vq.codebook"][7] = tok[0, 0]
    a = assign_clusters(data, ck)
    assert a[scenes[0].scene_id] == 7
    assert len(a) == len(scenes)
    assert a == assign_clusters(data, ck)


# -- weights -------------------------------------------------------------------

def _assign(counts):
    out, sid = {}, 0
    for k, n in counts.items():
        for _ in range(n):
            out[sid] = k
            sid += 1
    return out


def test_weight_examples():
    assert compute_weights(_assign({0: 50, 1: 50})).cluster_weights == {0: 1.0, 1: 1.0}
    w = compute_weights(_assign({0: 90, 1: 9, 2: 1}), clamp_w_max=10.0)
    assert abs(w.cluster_weights[0] - 100 / 270) < 1e-12
    assert abs(w.cluster_weights[1] - 100 / 27) < 1e-12
    assert w.cluster_weights[2] == 10.0 and w.clamped[2] and not w.clamped[0]
    assert compute_weights(_assign({3: 17})).cluster_weights == {3: 1.0}


def test_weight_errors():
    with pytest.raises(ValueError):
        compute_weights({})
    with pytest.raises(ValueError):
        compute_weights({0: 9}, K=4)


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.integers(0, 15), st.integers(1, 40), min_size=1, max_size=8))
def test_weights_scale_free(counts):
    a = compute_weights(_assign(counts), clamp_w_max=1e9)
    b = compute_weights(_assign({k: 2 * n for k, n in counts.items()}), clamp_w_max=1e9)
    for k in counts:
        assert a.cluster_weights[k] == pytest.approx(b.cluster_weights[k], rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.integers(0, 15), st.integers(1, 40), min_size=1, max_size=8))
def test_cluster_mass_is_equal(counts):
    w = compute_weights(_assign(counts), clamp_w_max=1e9)
    total = w.sample_weights.sum()
    for k in counts:
        mass = sum(w.sample_weights[i] for i, s in enumerate(w.scene_ids) if w.cluster_of(s) == k)
        assert mass / total == pytest.approx(1 / len(counts), rel=1e-12)


def test_weight_table_round_trip():
    w = compute_weights(_assign({0: 5, 2: 1}))
    back = WeightTable.from_dict(w.to_dict())
    assert back.cluster_weights == w.cluster_weights
    assert np.array_equal(back.sample_weights, w.sample_weights)


# -- samplers ------------------------------------------------------------------

def _three_sigma(hits, n, p):
    return abs(hits - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_sampler_frequency_one_three():
    idx = priority_sampler([1.0, 3.0], 100_000, RngState(0))
    assert _three_sigma((idx == 1).sum(), 100_000, 0.75)


def test_sampler_cluster_mass_empirical():
    w = compute_weights(_assign({0: 70, 1: 25, 2: 5}), clamp_w_max=1e9)
    idx = priority_sampler(w, 100_000, RngState(1))
    clusters = np.array([w.cluster_of(w.scene_ids[i]) for i in idx])
    for k in range(3):
        assert _three_sigma((clusters == k).sum(), 100_000, 1 / 3)


def test_uniform_weights_reduce_to_uniform_sampler():
    a = priority_sampler(np.ones(37), 5000, np.random.default_rng(4))
    b = uniform_sampler(37, 5000, np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_sampler_rejects_zero_weights():
    with pytest.raises(ValueError):
        priority_sampler([0.0, 0.0], 3, RngState(0))


# -- stage 2 -------------------------------------------------------------------

@pytest.fixture(scope="module")
def stage1_small(toy):
    _, data = toy
    return train_stage1(data, TrainConfig(epochs=1, seed=0), SMALL)


def _balanced(data):
    return compute_weights({s: i % 2 for i, s in enumerate(data.scene_ids)}, clamp_w_max=1e9)


def test_uniform_weights_bitwise_equal_to_baseline(toy, stage1_small):
    _, data = toy
    w = _balanced(data)
    assert set(w.cluster_weights.values()) == {1.0}
    cfg = TrainConfig(epochs=2, seed=9)
    a = train_stage2(data, w, cfg, stage1_small)
    b = train_stage2(data, None, cfg, stage1_small)
    assert a.params.equal(b.params)


def test_loss_scale_with_unit_weights_is_unweighted(toy, stage1_small):
    _, data = toy
    cfg = TrainConfig(epochs=2, seed=9, weight_mode="loss_scale")
    a = train_stage2(data, _balanced(data), cfg, stage1_small)
    b = train_stage2(data, None, cfg, stage1_small)
    assert a.params.equal(b.params)


def test_stage2_only_touches_causal_and_planner(toy, stage1_small):
    _, data = toy
    ck = train_stage2(data, None, TrainConfig(epochs=1, seed=0), stage1_small)
    for n in ck.params.names("encoder.cluster.") + ck.params.names("vq."):
        assert torch.equal(ck.params[n], stage1_small.params[n]), n


def test_stage2_rejects_uncovered_scenes(toy, stage1_small):
    _, data = toy
    w = compute_weights({data.scene_ids[0]: 0})
    with pytest.raises(ValueError):
        train_stage2(data, w, TrainConfig(epochs=1), stage1_small)


@pytest.mark.slow
def test_priority_sampling_lowers_rare_family_error():
    from desk import SEEDS, ab_run
    runs = [ab_run(s) for s in SEEDS]
    better = sum(r["caps_ade"] < r["uniform_ade"] for r in runs)
    assert better >= 4, [(round(r["caps_ade"], 3), round(r["uniform_ade"], 3)) for r in runs]
