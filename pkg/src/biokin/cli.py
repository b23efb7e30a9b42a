"""Command-line front end.

Every subcommand takes ``--skeleton FILE``, ``--seed N`` and ``--out DIR``.
On failure the process exits nonzero after printing one JSON error line to
stderr, e.g. ``{"error": "FormatError", "message": "markers.csv:7: bad number 'x'"}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as bio
from .attention import DEFAULT_POINTS, DEFAULT_QUERIES, dam_forward, random_pyramid, random_queries
from .ik import IkSettings, MarkerFrame, solve_ik_sequence, solve_scales
from .kinematics import forward_kinematics
from .mesh import extract_virtual_markers, load_body, skin, synthetic_body, SmplParams
from .metrics import (InferenceTimer, PointSetPair, default_axis_rules, mae_angle, mae_body, mpblpe, mpjpe,
                      pa_mpjpe, segment_dimensions_mm)
from .neurik import NeurikConfig, init_weights, load_weights, neurik_forward, save_weights
from .plotting import plot_frame_errors, plot_loss_traces
from .refine import (Camera, ITERATION_PRESETS, RefineSettings, SmplJointPath, refine, reprojection_error,
                     synthetic_problem)
from .skeleton import Pose, SkeletonModel, apply_scales, builtin_skeleton, load_skeleton_file

FRAME_RATE = 30.0
ROOT_HEIGHT = 0.95


class CliError(RuntimeError):
    pass


def _model(args) -> SkeletonModel:
    return load_skeleton_file(args.skeleton) if args.skeleton else builtin_skeleton()


def _out(args) -> Path:
    return Path(args.out)


# gen -----------------------------------------------------------------------

def synth_motion(model: SkeletonModel, rng: np.random.Generator, frames: int,
                 amplitude: float = 0.3, margin: float = 0.05) -> list[Pose]:
    """Smooth in-range joint trajectories: one sine per coordinate around a center near zero."""
    r = model.dof_ranges()
    lo, hi = r[:, 0] + margin, r[:, 1] - margin
    center = np.clip(np.clip(0.0, lo, hi) + rng.uniform(-0.1, 0.1, model.n_dof), lo, hi)
    amp = np.minimum(amplitude * rng.uniform(0.3, 1.0, model.n_dof),
                     np.minimum(center - lo, hi - center))
    freq = rng.uniform(0.2, 1.0, model.n_dof)
    phase = rng.uniform(0, 2 * np.pi, model.n_dof)
    drift = np.array([0.3, 0.0, 0.1]) * rng.uniform(-1, 1, 3)
    poses = []
    for k in range(frames):
        t = k / FRAME_RATE
        q = center + amp * np.sin(2 * np.pi * freq * t + phase)
        poses.append(Pose(np.clip(q, r[:, 0], r[:, 1]), np.array([0.0, ROOT_HEIGHT, 0.0]) + drift * t))
    return poses


def _observe(markers: np.ndarray, rng, noise: float, dropout: float):
    noisy = markers + noise * rng.standard_normal(markers.shape) if noise > 0 else markers.copy()
    visible = rng.random(markers.shape[:-1]) >= dropout if dropout > 0 else np.ones(markers.shape[:-1], bool)
    return noisy, visible


def cmd_gen(args) -> dict:
    if args.frames < 1:
        raise CliError("--frames must be >= 1")
    if not 0.0 <= args.dropout <= 1.0:
        raise CliError("--dropout must be in [0, 1]")
    if args.noise < 0 or args.scale <= 0:
        raise CliError("--noise must be >= 0 and --scale > 0")
    model = _model(args)
    rng = np.random.default_rng(args.seed)
    scales = np.full((model.n_joints, 3), args.scale)
    subject = apply_scales(model, scales)
    poses = synth_motion(model, rng, args.frames)
    markers = np.stack([forward_kinematics(subject, p).marker_world for p in poses])
    calib = forward_kinematics(subject, model.zero_pose()).marker_world[None]
    m_obs, m_vis = _observe(markers, rng, args.noise, args.dropout)
    c_obs, c_vis = _observe(calib, rng, args.noise, 0.0)

    out = _out(args)
    bio.write_markers(out / "markers.csv", model.marker_names, m_obs, m_vis)
    bio.write_markers(out / "calibration.csv", model.marker_names, c_obs, c_vis)
    bio.write_poses(out / "poses_gt.csv", poses, model.n_dof)
    bio.write_scales(out / "scales_gt.csv", model, scales)
    return {"frames": args.frames, "markers": model.n_markers, "visible_fraction": float(m_vis.mean())}


# scale / ik ------------------------------------------------------------------

def cmd_scale(args) -> dict:
    model = _model(args)
    calib = Path(args.calibration) if args.calibration else _out(args) / "calibration.csv"
    frames = bio.read_markers(calib, model)
    res = solve_scales(model, frames[0])
    out = _out(args)
    bio.write_scales(out / "scales.csv", model, res.scales, res.solved)
    bio.write_key_values(out / "scale_report.txt", {
        "rms_residual_m": res.rms_residual,
        "solved_components": int(res.solved.sum()),
        "total_components": int(res.solved.size),
    }, ["issue"], [[r] for r in res.report])
    return {"rms_residual_m": res.rms_residual, "issues": len(res.report)}


def _initial_guess(model: SkeletonModel, frame: MarkerFrame) -> Pose:
    """Zero pose with the root moved so the visible markers' centroid matches."""
    names = frame.visible_names()
    if not names:
        return model.zero_pose()
    rest = forward_kinematics(model, model.zero_pose()).marker_world
    idx = [model.marker_names.index(n) for n in names]
    obs = np.array([frame.positions[n] for n in names])
    return Pose(np.zeros(model.n_dof), obs.mean(axis=0) - rest[idx].mean(axis=0))


def cmd_ik(args) -> dict:
    model = _model(args)
    out = _out(args)
    if args.scales:
        model = apply_scales(model, bio.read_scales(args.scales, model))
    frames = bio.read_markers(Path(args.markers) if args.markers else out / "markers.csv", model)
    settings = IkSettings(max_iterations=args.max_iters, residual_tol=args.tol)
    timer = InferenceTimer()
    solutions = []
    current = None
    for t, frame in enumerate(frames):
        init = current if current is not None else _initial_guess(model, frame)
        with timer.frame():
            sol = solve_ik_sequence(model, [frame], settings, init)[0]
        solutions.append(sol)
        if sol.error is None:
            current = sol.pose
    ok = [s.error is None for s in solutions]
    rows = [[t, int(s.converged), bio.fmt(s.rms_residual), s.iterations, s.error or ""]
            for t, s in enumerate(solutions)]
    bio.write_poses(out / "poses.csv", [s.pose if good else None for s, good in zip(solutions, ok)], model.n_dof)
    bio.write_key_values(out / "ik_report.txt", {
        "frames": len(frames),
        "frames_solved": int(sum(ok)),
        "frames_failed": len(frames) - int(sum(ok)),
    }, ["frame", "converged", "rms_residual_m", "iterations", "error"], rows)
    # timings differ run to run, so they stay out of the deterministic report
    bio.atomic_write_text(out / "ik_timing.txt", f"aiti_s = {bio.fmt(timer.aiti())}\n")
    if not any(ok):
        raise CliError(f"IK failed on all {len(frames)} frames (first error: {solutions[0].error})")
    return {"frames_solved": int(sum(ok)), "frames_failed": len(frames) - int(sum(ok)), "aiti_s": timer.aiti()}


# eval ------------------------------------------------------------------------

def cmd_eval(args) -> dict:
    model = _model(args)
    out = _out(args)
    pred = bio.read_poses(Path(args.pred) if args.pred else out / "poses.csv", model.n_dof)
    gt = bio.read_poses(Path(args.gt) if args.gt else out / "poses_gt.csv", model.n_dof)
    if pred.shape != gt.shape:
        raise CliError(f"prediction has {len(pred)} frames, ground truth {len(gt)}")
    s_pred = bio.read_scales(args.pred_scales, model) if args.pred_scales else np.ones((model.n_joints, 3))
    s_gt = bio.read_scales(args.gt_scales, model) if args.gt_scales else np.ones((model.n_joints, 3))
    m_pred, m_gt = apply_scales(model, s_pred), apply_scales(model, s_gt)
    root = model.markers_on(model.joints[0].name)[0] if model.markers_on(model.joints[0].name) else 0

    per = {"mpjpe_mm": [], "pa_mpjpe_mm": [], "mpblpe_mm": [], "mae_angle_deg": []}
    valid = []
    for t in range(len(gt)):
        if not np.all(np.isfinite(pred[t])):
            continue
        valid.append(t)
        fp = forward_kinematics(m_pred, Pose.from_vector(pred[t]))
        fg = forward_kinematics(m_gt, Pose.from_vector(gt[t]))
        joints = PointSetPair(fp.joint_world, fg.joint_world)
        per["mpjpe_mm"].append(mpjpe(joints))
        per["pa_mpjpe_mm"].append(pa_mpjpe(joints, scale=not args.rigid))
        per["mpblpe_mm"].append(mpblpe(PointSetPair(fp.marker_world, fg.marker_world, root)))
        per["mae_angle_deg"].append(mae_angle(pred[t, :model.n_dof], gt[t, :model.n_dof]))
    if not valid:
        raise CliError("no frames with a solved pose to evaluate")

    summary = {"frames": len(gt), "frames_evaluated": len(valid)}
    for k, v in per.items():
        summary[k] = float(np.mean(v))
    if args.pred_scales and args.gt_scales:
        names = model.joint_names
        summary["mae_body_mm"] = mae_body(s_pred, s_gt, segment_dimensions_mm(model), default_axis_rules(names), names)
    if args.timing:
        summary["aiti_s"] = float(Path(args.timing).read_text().split("=")[1])

    keys = list(per)
    rows = [[t, *(bio.fmt(per[k][i]) for k in keys)] for i, t in enumerate(valid)]
    bio.write_key_values(out / "eval_report.txt", summary, ["frame", *keys], rows)
    bio.atomic_write_text(out / "eval_frames.csv", bio._csv_text(["frame", *keys], rows))
    plot_frame_errors({k: per[k] for k in keys}, out / "eval_errors.png")
    return summary


# refine ----------------------------------------------------------------------

def _camera(args) -> Camera:
    return Camera(args.focal, np.array(args.principal, float), np.array(args.cam_t, float))


def cmd_refine(args) -> dict:
    cam = _camera(args)
    mesh = load_body(args.body) if args.body else synthetic_body(args.seed)
    iters = list(ITERATION_PRESETS) if args.grid else [args.iters]
    if args.keypoints:
        track = bio.read_keypoints(args.keypoints)
        if track.uv.shape[1] != mesh.n_joints:
            raise CliError(f"keypoints have {track.uv.shape[1]} joints, body has {mesh.n_joints}")
        path = SmplJointPath(mesh)
        problems = [(np.zeros(path.n_params), track.uv[f], track.confidence[f]) for f in range(len(track.uv))]
    else:
        p = synthetic_problem(args.seed, mesh, cam)
        path = p.path
        problems = [(p.theta_init, p.joints_2d, None)]

    out = _out(args)
    trace_rows, summary, plots, final = [], {}, {}, []
    for T in iters:
        final = []
        for f, (theta0, uv, conf) in enumerate(problems):
            settings = RefineSettings(args.step, T, args.lam, keypoint_confidences=conf)
            state = refine(theta0, uv, path, cam, settings)
            for k, loss in enumerate(state.loss_trace):
                eta = state.step_trace[k - 1] if k else 0.0
                trace_rows.append([T, f, k, bio.fmt(loss), bio.fmt(eta)])
            plots[f"T={T} frame {f}" if len(problems) > 1 else f"T={T}"] = state.loss_trace
            summary[f"T{T}_frame{f}_reprojection_initial_px2"] = reprojection_error(theta0, uv, path, cam, settings)
            summary[f"T{T}_frame{f}_reprojection_final_px2"] = reprojection_error(
                state.theta_prime, uv, path, cam, settings)
            final.append(state.theta_prime)
    bio.atomic_write_text(out / "refine_trace.csv",
                          bio._csv_text(["iterations", "frame", "step", "objective", "step_size"], trace_rows))
    theta_rows = [[f, *(bio.fmt(v) for v in th)] for f, th in enumerate(final)]
    bio.atomic_write_text(out / "refined_theta.csv",
                          bio._csv_text(["frame", *(f"theta_{i}" for i in range(path.n_params))], theta_rows))
    bio.write_key_values(out / "refine_report.txt", {"focal": cam.focal, **summary})
    plot_loss_traces(plots, out / "refine_traces.png")
    return {"runs": len(iters) * len(problems), "trace_rows": len(trace_rows)}


# attention / neurik ----------------------------------------------------------------

def cmd_attn_demo(args) -> dict:
    rng = np.random.default_rng(args.seed)
    pyramid = random_pyramid(rng, channels=args.channels)
    qs = random_queries(rng, pyramid, n_queries=args.queries, n_points=args.points)
    out_feats = dam_forward(pyramid, qs)
    rows = [[k, *(bio.fmt(v) for v in row)] for k, row in enumerate(out_feats)]
    out = _out(args)
    bio.atomic_write_text(out / "attn_output.csv",
                          bio._csv_text(["query", *(f"c{i}" for i in range(pyramid.channels))], rows))
    info = {
        "queries": args.queries, "levels": len(pyramid.levels), "points": args.points,
        "channels": pyramid.channels,
        "level_shapes": " ".join(f"{lv.shape[0]}x{lv.shape[1]}" for lv in pyramid.levels),
        "output_norm": float(np.linalg.norm(out_feats)),
    }
    bio.write_key_values(out / "attn_report.txt", info)
    return info


def _virtual_marker_sequence(seed: int, frames: int, count: int) -> np.ndarray:
    mesh = synthetic_body(seed)
    rng = np.random.default_rng(seed)
    idx = mesh.virtual_marker_indices[:count]
    base = 0.1 * rng.standard_normal((24, 3))
    vel = 0.02 * rng.standard_normal((24, 3))
    seq = []
    for t in range(frames):
        verts, _ = skin(mesh, SmplParams(base + vel * t, np.zeros(mesh.shape_dirs.shape[2]), np.zeros(3)))
        seq.append(extract_virtual_markers(verts, idx))
    return np.stack(seq)


def cmd_neurik_forward(args) -> dict:
    model = _model(args)
    if args.weights:
        weights, config = load_weights(args.weights)
    else:
        config = NeurikConfig(frames=args.frames, output_mode=args.mode)
        weights = init_weights(config, model.n_joints, model.n_dof, args.seed)
    seq = _virtual_marker_sequence(args.seed, config.frames, config.marker_count)
    timer = InferenceTimer()
    with timer.frame():
        out = neurik_forward(seq, weights, config, model)
    o = _out(args)
    if args.save_weights:
        save_weights(weights, config, o / "neurik_weights.npz")
    q = np.atleast_2d(out.q_r_hat)
    bio.atomic_write_text(o / "neurik_angles.csv",
                          bio._csv_text(["frame", *(f"coord_{i}" for i in range(model.n_dof))],
                                        [[i, *(bio.fmt(v) for v in row)] for i, row in enumerate(q)]))
    bio.write_scales(o / "neurik_scales.csv", model, out.scales_hat)
    info = {k: "x".join(map(str, v)) for k, v in out.shapes.items()}
    bio.write_key_values(o / "neurik_report.txt", info)
    return {**info, "seconds": timer.aiti()}


# entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--skeleton", help="skeleton definition (YAML); default: built-in 24-segment body")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")

    p = argparse.ArgumentParser(prog="biokin", description="Biomechanical skeleton fitting toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="synthetic markers and ground-truth poses")
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--noise", type=float, default=0.0, help="marker noise sd (m)")
    g.add_argument("--dropout", type=float, default=0.0, help="per-marker invisibility probability")
    g.add_argument("--scale", type=float, default=1.0, help="uniform subject scale")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("scale", parents=[common], help="segment scales from a calibration frame")
    s.add_argument("--calibration", help="marker CSV (first frame used); default OUT/calibration.csv")
    s.set_defaults(func=cmd_scale)

    k = sub.add_parser("ik", parents=[common], help="per-frame inverse kinematics")
    k.add_argument("--markers", help="marker CSV; default OUT/markers.csv")
    k.add_argument("--scales", help="scales CSV from `scale`")
    k.add_argument("--tol", type=float, default=1e-6, help="rms residual tolerance (m)")
    k.add_argument("--max-iters", type=int, default=100)
    k.set_defaults(func=cmd_ik)

    e = sub.add_parser("eval", parents=[common], help="compare solved and ground-truth poses")
    e.add_argument("--pred", help="pose CSV; default OUT/poses.csv")
    e.add_argument("--gt", help="pose CSV; default OUT/poses_gt.csv")
    e.add_argument("--pred-scales")
    e.add_argument("--gt-scales")
    e.add_argument("--timing", help="timing file written by `ik` (adds aiti_s to the report)")
    e.add_argument("--rigid", action="store_true", help="Procrustes without scale")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("refine", parents=[common], help="keypoint-guided body pose refinement")
    r.add_argument("--keypoints", help="2D keypoint CSV; default: synthetic target from --seed")
    r.add_argument("--body", help="body asset (.npz); default: procedural body")
    r.add_argument("--iters", type=int, default=10)
    r.add_argument("--grid", action="store_true", help="run every preset in %s" % (ITERATION_PRESETS,))
    r.add_argument("--step", type=float, default=1e-2)
    r.add_argument("--lam", type=float, default=1e-3)
    r.add_argument("--focal", type=float, default=5000.0)
    r.add_argument("--principal", type=float, nargs=2, default=(0.0, 0.0), metavar=("U", "V"))
    r.add_argument("--cam-t", type=float, nargs=3, default=(0.0, 0.0, 10.0), metavar=("X", "Y", "Z"))
    r.set_defaults(func=cmd_refine)

    a = sub.add_parser("attn-demo", parents=[common], help="deformable attention on a random pyramid")
    a.add_argument("--queries", type=int, default=DEFAULT_QUERIES)
    a.add_argument("--points", type=int, default=DEFAULT_POINTS)
    a.add_argument("--channels", type=int, default=16)
    a.set_defaults(func=cmd_attn_demo)

    n = sub.add_parser("neurik-forward", parents=[common], help="untrained forward pass with shape report")
    n.add_argument("--frames", type=int, default=64)
    n.add_argument("--mode", choices=("last", "all"), default="last")
    n.add_argument("--weights", help="weight container (.npz)")
    n.add_argument("--save-weights", action="store_true")
    n.set_defaults(func=cmd_neurik_forward)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2 if isinstance(exc, (bio.FormatError, OSError)) else 1
    for key, value in result.items():
        print(f"{key}: {bio.fmt(value) if isinstance(value, float) else value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
