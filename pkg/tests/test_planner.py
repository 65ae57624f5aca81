import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from caps.core import RngState, grad_check, init_parameters
from caps.planner import (ANCHORS, N_CANDIDATES, KinematicLimits, PlannerConfig, TrajectoryBundle,
                          braking_trajectory, contingency_mask, curvature_ok, dynamics_ok,
                          generate_trajectory, imitation_loss, planner_forward,
                          planner_param_spec, propose_targets, score_and_select)
from caps.scenegen import DT, T_FUTURE, generate_scene

D = 8
PCFG = PlannerConfig(d_e=D, hidden=16)


def _params(seed=0):
    return init_parameters(planner_param_spec(PCFG), RngState(seed), torch.float64)


def _feat(n=2, seed=0):
    return torch.randn(n, D, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def _empty_scene():
    s = generate_scene("lane_follow", RngState(0))
    s.objects = []
    return s


def _straight(v, T=T_FUTURE):
    t = np.arange(1, T + 1) * DT
    return np.stack([v * t, np.zeros(T)], axis=1)


# -- target proposals ----------------------------------------------------------

def test_anchor_grid():
    assert ANCHORS.shape == (64, 2) == (N_CANDIDATES, 2)
    assert sorted(set(ANCHORS[:, 0])) == pytest.approx(np.linspace(0, 40, 8).tolist())
    assert sorted(set(ANCHORS[:, 1])) == pytest.approx(np.linspace(-8, 8, 8).tolist())


def test_zero_init_head_gives_flat_proposals():
    off, logits = propose_targets(_feat(), _params())
    assert off.shape == (2, 64, 2) and logits.shape == (2, 64)
    assert off.abs().max().item() == 0.0
    assert logits.abs().max().item() == 0.0


def test_target_head_grad_check():
    p = _params(1)
    for n in p.names("planner.target.fc2."):      # move away from the zero init
        p.assign(n, torch.randn(p[n].shape, dtype=torch.float64,
                                generator=torch.Generator().manual_seed(2)) * 0.1)
    e = _feat(1, 3)
    p.add("ego", e)
    rep = grad_check(lambda q: propose_targets(q["ego"], q)[1].sum(), p, names=["ego"])
    assert rep.passed, rep


# -- trajectory generation -----------------------------------------------------

def test_trajectory_shape_and_determinism():
    p = _params()
    e, tgt = _feat(3), torch.tensor([[10.0, 0.0]] * 3, dtype=torch.float64)
    a = generate_trajectory(e, tgt, p)
    assert a.shape == (3, T_FUTURE, 2)
    assert torch.equal(a, generate_trajectory(e, tgt, p))


def test_trajectory_grad_check():
    p = _params(4)
    p.add("ego", _feat(1, 5))
    tgt = torch.tensor([[12.0, 1.0]], dtype=torch.float64)
    rep = grad_check(lambda q: generate_trajectory(q["ego"], tgt, q).pow(2).mean(), p,
                     max_coords=8)
    assert rep.passed, rep


# -- imitation loss ------------------------------------------------------------

def _outputs(p, gt):
    return planner_forward(_feat(len(gt), 7), p, gt[:, -1])


def test_perfect_fit_zero_regression_terms():
    p = _params()
    for n in p.names("planner.traj.fc2."):       # no residual: straight line to the target
        p.assign(n, torch.zeros_like(p[n]))
    e = _feat(1, 7)
    gt_end = torch.as_tensor(ANCHORS[27:28], dtype=torch.float64)
    out = planner_forward(e, p, gt_end)
    gt = out.gt_traj.detach().clone()
    terms = imitation_loss(gt, out, PCFG)
    assert terms.traj_reg.item() == 0.0
    assert terms.target_offset.item() == 0.0     # endpoint sits on an anchor, offsets are 0


def test_uniform_scores_give_log_m_minus_entropy():
    p = _params()
    gt = torch.zeros(2, T_FUTURE, 2, dtype=torch.float64)
    gt[:, :, 0] = torch.linspace(0.5, 14.0, T_FUTURE, dtype=torch.float64)
    out = _outputs(p, gt)
    out.scores = torch.zeros_like(out.scores)
    terms = imitation_loss(gt, out, PCFG, reduce=False)
    end = torch.linalg.vector_norm(out.candidates.detach()[:, :, -1] - gt[:, -1][:, None], dim=-1)
    q = torch.softmax(-end / PCFG.tau, -1)
    H = -(q * q.log()).sum(-1)
    assert torch.allclose(terms.score, math.log(64) - H, atol=1e-12)
    assert (terms.score >= 0).all()


def test_zero_lambdas_leave_classification():
    p = _params()
    gt = torch.zeros(1, T_FUTURE, 2, dtype=torch.float64)
    gt[:, :, 0] = torch.linspace(1.0, 20.0, T_FUTURE, dtype=torch.float64)
    out = _outputs(p, gt)
    cfg = PlannerConfig(d_e=D, hidden=16, lambda_offset=0, lambda_traj=0, lambda_score=0)
    t = imitation_loss(gt, out, cfg)
    assert t.total.item() == t.target_cls.item()
    assert t.target_cls.item() == pytest.approx(math.log(64), abs=1e-12)   # zero-init logits


def test_endpoint_outside_hull_is_clamped():
    p = _params()
    gt = torch.zeros(1, T_FUTURE, 2, dtype=torch.float64)
    gt[0, -1] = torch.tensor([55.0, 0.0])
    t = imitation_loss(gt, _outputs(p, gt), PCFG)
    assert t.n_clamped == 1


def test_imitation_loss_grad_check():
    p = _params(8)
    p.add("ego", _feat(2, 9))
    gt = torch.zeros(2, T_FUTURE, 2, dtype=torch.float64)
    gt[:, :, 0] = torch.linspace(0.4, 9.0, T_FUTURE, dtype=torch.float64)
    gt[1, :, 1] = torch.linspace(0.0, 1.3, T_FUTURE, dtype=torch.float64)

    def fn(q):
        return imitation_loss(gt, planner_forward(q["ego"], q, gt[:, -1]), PCFG).total

    rep = grad_check(fn, p, max_coords=6)
    assert rep.passed, rep


# -- contingency mask ----------------------------------------------------------

def test_straight_trajectory_in_empty_scene_is_admissible():
    s = _empty_scene()
    s.ego.past[-1, 3] = 3.0
    c = _straight(3.0)
    c[:, 1] += s.ego.past[-1, 1]
    assert contingency_mask(c[None], s, futures=[], speed0=3.0).tolist() == [True]


def test_obstacle_overlap_is_masked():
    s = _empty_scene()
    c = _straight(3.0)[None]
    obstacle = [(np.tile([6.0, 1.5], (T_FUTURE, 1)), 1.0)]   # 1.5 < 2.0 at closest
    clear = [(np.tile([6.0, 2.5], (T_FUTURE, 1)), 1.0)]
    assert contingency_mask(c, s, futures=obstacle, speed0=3.0).tolist() == [False]
    assert contingency_mask(c, s, futures=clear, speed0=3.0).tolist() == [True]


def test_tight_zigzag_fails_curvature():
    # 1 m segments turning by 0.5 rad: radius 2 m < 1 / 0.3
    h = np.cumsum(np.where(np.arange(T_FUTURE) % 2 == 0, 0.5, -0.5))
    pts = np.cumsum(np.stack([np.cos(h), np.sin(h)], axis=1), axis=0)
    assert not curvature_ok(pts, 0.3)
    assert curvature_ok(_straight(5.0), 0.3)


def test_gentle_arc_passes_curvature():
    R = 10.0       # curvature 0.1
    phi = np.arange(1, T_FUTURE + 1) * 0.1
    pts = np.stack([R * np.sin(phi), R * (1 - np.cos(phi))], axis=1)
    assert curvature_ok(pts, 0.3)
    assert not curvature_ok(pts, 0.05)


def test_dynamics_limits():
    lim = KinematicLimits()
    assert dynamics_ok(_straight(10.0), 10.0, lim)
    assert not dynamics_ok(_straight(10.0), 0.0, lim)      # 0 -> 10 m/s in one step
    assert not dynamics_ok(_straight(19.0), 19.0, lim)     # above max speed
    assert dynamics_ok(braking_trajectory(12.0, 4.0), 12.0, lim)


def test_route_deviation_is_masked():
    s = _empty_scene()
    c = _straight(4.0)
    c[:, 1] = s.route.points[0, 1] + 3.8
    assert not contingency_mask(c[None], s, futures=[], speed0=4.0)[0]


# -- selection -----------------------------------------------------------------

def _bundle(scores, mask):
    M = len(scores)
    cands = np.stack([_straight(1.0 + i) for i in range(M)])
    return TrajectoryBundle(cands, cands[:, -1], np.zeros(M), np.asarray(scores, float),
                            np.asarray(mask, bool))


def test_single_admissible_is_chosen():
    k, traj = score_and_select(_bundle([5.0, -3.0, 9.0], [False, True, False]))
    assert k == 1
    assert np.array_equal(traj, _straight(2.0))


def test_all_masked_falls_back_to_braking():
    k, traj = score_and_select(_bundle([1.0, 2.0], [False, False]), speed0=6.0)
    assert k == -1
    v = np.hypot(*np.diff(np.vstack([[0, 0], traj]), axis=0).T) / DT
    assert np.all(np.diff(v) <= 1e-12) and v[-1] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-80, 80), min_size=2, max_size=10), st.integers(-800, 800),
       st.integers(0, 2 ** 16))
def test_selection_shift_invariant(scores, c, seed):
    scores, c = [s / 8 for s in scores], c / 8          # exact in binary
    mask = np.random.default_rng(seed).random(len(scores)) < 0.7
    mask[0] = True
    a, _ = score_and_select(_bundle(scores, mask))
    b, _ = score_and_select(_bundle([s + c for s in scores], mask))
    assert a == b
    assert mask[a]
    assert scores[a] == max(s for s, m in zip(scores, mask) if m)
