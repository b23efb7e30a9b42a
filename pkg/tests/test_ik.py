import copy

import numpy as np
import pytest

from biokin.cli import synth_motion
from biokin.ik import IkError, IkSettings, MarkerFrame, scaled_model, solve_ik_frame, solve_ik_sequence, solve_scales
from biokin.kinematics import forward_kinematics
from biokin.skeleton import Pose, apply_scales, random_pose, skeleton_from_dict

TIGHT = IkSettings(residual_tol=1e-9)


def _frame(model, pose, noise=0.0, rng=None, hidden=()):
    pos = forward_kinematics(model, pose).marker_world
    if noise:
        pos = pos + noise * rng.standard_normal(pos.shape)
    vis = [n not in hidden for n in model.marker_names]
    return MarkerFrame.from_array(model.marker_names, pos, vis)


def _perturbed(model, pose, rng, deg=5.0):
    dq = np.deg2rad(rng.uniform(-deg, deg, model.n_dof))
    return Pose(pose.q_r + dq, pose.root_translation.copy())


# scales ----------------------------------------------------------------------

def test_unit_scales_recovered(body_model):
    res = solve_scales(body_model, _frame(body_model, body_model.zero_pose()))
    np.testing.assert_allclose(res.scales[res.solved], 1.0, atol=1e-12)
    assert res.rms_residual < 1e-10
    assert res.report == []


def test_uniform_scale_recovered(body_model):
    subject = apply_scales(body_model, np.full((24, 3), 1.2))
    res = solve_scales(body_model, _frame(subject, body_model.zero_pose()))
    assert res.solved.all()
    assert np.max(np.abs(res.scales - 1.2)) < 1e-6


def test_anisotropic_scales_recovered(body_model, rng):
    truth = rng.uniform(0.85, 1.2, (24, 3))
    res = solve_scales(body_model, _frame(apply_scales(body_model, truth), body_model.zero_pose()))
    assert np.max(np.abs(res.scales - truth)[res.solved]) < 1e-9


def test_single_marker_segment_reported(chain_doc):
    doc = copy.deepcopy(chain_doc)
    doc["segments"][2]["markers"] = doc["segments"][2]["markers"][:1]
    model = skeleton_from_dict(doc)
    res = solve_scales(model, _frame(model, model.zero_pose()))
    np.testing.assert_array_equal(res.scales[2], [1, 1, 1])
    assert not res.solved[2].any()
    assert any("link2" in r and "insufficient markers" in r for r in res.report)


def test_scale_solve_without_visible_markers(chain_model):
    frame = _frame(chain_model, chain_model.zero_pose(), hidden=set(chain_model.marker_names))
    with pytest.raises(IkError, match="no visible markers"):
        solve_scales(chain_model, frame)


def test_scaled_model_helper(body_model):
    subject = apply_scales(body_model, np.full((24, 3), 0.9))
    res = solve_scales(body_model, _frame(subject, body_model.zero_pose()))
    fk_a = forward_kinematics(scaled_model(body_model, res), body_model.zero_pose())
    fk_b = forward_kinematics(subject, body_model.zero_pose())
    np.testing.assert_allclose(fk_a.marker_world, fk_b.marker_world, atol=1e-9)


# single frame ---------------------------------------------------------------------

def test_round_trip_small_batch(body_model, rng):
    for _ in range(10):
        truth = random_pose(body_model, rng, margin=np.deg2rad(6), translation_scale=0.2)
        sol = solve_ik_frame(body_model, _frame(body_model, truth), _perturbed(body_model, truth, rng), TIGHT)
        assert sol.converged
        assert np.max(np.abs(sol.pose.q_r - truth.q_r)) < 1e-4
        assert sol.rms_residual < 1e-7


def test_already_optimal(body_model):
    zero = body_model.zero_pose()
    sol = solve_ik_frame(body_model, _frame(body_model, zero), zero)
    assert sol.converged
    assert sol.iterations <= 1
    assert np.max(np.abs(sol.pose.as_vector() - zero.as_vector())) <= IkSettings().step_tol


def test_noise_floor(body_model):
    rms = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        truth = random_pose(body_model, rng, margin=np.deg2rad(6))
        sol = solve_ik_frame(body_model, _frame(body_model, truth, 1e-3, rng), truth)
        rms.append(sol.rms_residual)
    rms = np.array(rms)
    # 3-D isotropic noise of 1 mm per axis: fit residual near sqrt(3 * (1 - p/n)) mm
    assert np.all((rms >= 0.5e-3) & (rms <= 2e-3)), rms


def test_cost_trace_non_increasing(body_model, rng):
    truth = random_pose(body_model, rng, margin=0.1)
    sol = solve_ik_frame(body_model, _frame(body_model, truth), body_model.zero_pose())
    assert all(b <= a for a, b in zip(sol.cost_trace, sol.cost_trace[1:]))


def test_result_respects_limits(body_model, rng):
    r = body_model.dof_ranges()
    truth = random_pose(body_model, rng)
    q = truth.q_r.copy()
    # markers generated outside the limits pull against the clamp
    q[:5] = r[:5, 1] + 0.3
    sol = solve_ik_frame(body_model, _frame(body_model, Pose(q)), truth)
    assert np.all(sol.pose.q_r >= r[:, 0]) and np.all(sol.pose.q_r <= r[:, 1])


def test_weight_homogeneity(body_model, rng):
    truth = random_pose(body_model, rng, margin=0.1)
    frame = _frame(body_model, truth, 2e-3, rng)
    init = _perturbed(body_model, truth, rng)
    w = {n: float(v) for n, v in zip(body_model.marker_names, rng.uniform(0.5, 2, body_model.n_markers))}
    a = solve_ik_frame(body_model, frame, init, IkSettings(marker_weights=w))
    b = solve_ik_frame(body_model, frame, init, IkSettings(marker_weights={k: 8.0 * v for k, v in w.items()}))
    assert np.max(np.abs(a.pose.as_vector() - b.pose.as_vector())) <= IkSettings().step_tol
    assert b.cost_trace[-1] == pytest.approx(8.0 * a.cost_trace[-1], rel=1e-9)


def test_deterministic(body_model, rng):
    truth = random_pose(body_model, rng, margin=0.1)
    frame = _frame(body_model, truth, 1e-3, rng)
    a = solve_ik_frame(body_model, frame)
    b = solve_ik_frame(body_model, frame)
    assert np.array_equal(a.pose.as_vector(), b.pose.as_vector())
    assert a.cost_trace == b.cost_trace


def test_translation_gauge(body_model, rng):
    truth = random_pose(body_model, rng, margin=np.deg2rad(6))
    t = np.array([0.4, -0.2, 1.1])
    init = _perturbed(body_model, truth, rng)
    a = solve_ik_frame(body_model, _frame(body_model, truth), init, TIGHT)
    moved = Pose(truth.q_r, truth.root_translation + t)
    b = solve_ik_frame(body_model, _frame(body_model, moved), Pose(init.q_r, init.root_translation + t), TIGHT)
    np.testing.assert_allclose(b.pose.root_translation - a.pose.root_translation, t, atol=1e-6)
    assert np.max(np.abs(b.pose.q_r - a.pose.q_r)) < 1e-6


def test_hidden_markers_are_masked(body_model, rng):
    truth = random_pose(body_model, rng, margin=np.deg2rad(6))
    name = body_model.marker_names[0]
    frame = _frame(body_model, truth, hidden={name})
    frame.positions[name] = np.array([100.0, 100.0, 100.0])  # garbage behind the mask
    sol = solve_ik_frame(body_model, frame, _perturbed(body_model, truth, rng), TIGHT)
    assert np.max(np.abs(sol.pose.q_r - truth.q_r)) < 1e-4


def test_unknown_marker_rejected(chain_model):
    frame = MarkerFrame({"nope": np.zeros(3)})
    with pytest.raises(IkError, match="not on the model"):
        solve_ik_frame(chain_model, frame)


def test_non_finite_visible_marker_rejected():
    with pytest.raises(ValueError):
        MarkerFrame({"a": np.array([np.nan, 0, 0])})


def test_underdetermined_warns(body_model):
    keep = set(body_model.marker_names[:5])
    frame = _frame(body_model, body_model.zero_pose(), hidden=set(body_model.marker_names) - keep)
    with pytest.warns(UserWarning, match="under-determined"):
        solve_ik_frame(body_model, frame)


def test_no_markers(chain_model):
    frame = _frame(chain_model, chain_model.zero_pose(), hidden=set(chain_model.marker_names))
    sol = solve_ik_frame(chain_model, frame)
    assert not sol.converged
    assert sol.error == "no markers"


def test_settings_validation():
    with pytest.raises(ValueError):
        IkSettings(residual_tol=0)
    with pytest.raises(ValueError):
        IkSettings(damping_init=-1)


# sequences ----------------------------------------------------------------------

def test_constant_sequence(body_model):
    frames = [_frame(body_model, body_model.zero_pose())] * 4
    sols = solve_ik_sequence(body_model, frames)
    for s in sols:
        np.testing.assert_array_equal(s.pose.as_vector(), sols[0].pose.as_vector())
    assert all(s.iterations <= 1 for s in sols[1:])


def test_sine_trajectory(body_model):
    rng = np.random.default_rng(5)
    poses = synth_motion(body_model, rng, 30)
    frames = [_frame(body_model, p) for p in poses]
    init = Pose(np.zeros(body_model.n_dof), poses[0].root_translation)
    sols = solve_ik_sequence(body_model, frames, init=init)
    err = max(np.max(np.abs(s.pose.q_r - p.q_r)) for s, p in zip(sols, poses))
    assert err < 1e-3


def test_sequence_with_blank_frame(body_model):
    rng = np.random.default_rng(9)
    poses = synth_motion(body_model, rng, 5)
    frames = [_frame(body_model, p) for p in poses]
    frames[2] = _frame(body_model, poses[2], hidden=set(body_model.marker_names))
    init = Pose(np.zeros(body_model.n_dof), poses[0].root_translation)
    sols = solve_ik_sequence(body_model, frames, init=init)
    assert sols[2].error == "no markers" and not sols[2].converged
    for t in (1, 3, 4):
        assert sols[t].error is None
        assert np.max(np.abs(sols[t].pose.q_r - poses[t].q_r)) < 1e-3


def test_empty_sequence(body_model):
    with pytest.raises(IkError):
        solve_ik_sequence(body_model, [])


def test_sequence_error_names_frame(chain_model):
    good = _frame(chain_model, chain_model.zero_pose())
    bad = MarkerFrame({"nope": np.zeros(3)})
    with pytest.raises(IkError, match="frame 1"):
        solve_ik_sequence(chain_model, [good, bad])
