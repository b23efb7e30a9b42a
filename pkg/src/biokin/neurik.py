"""Neural IK forward pass at toy scale, its four-term loss and the loss gradient.

Pipeline per sequence of ``n`` frames of ``M`` markers:

1. spatial encoder: linear 3 -> c per marker, then 1-D convolutions along the
   marker axis (kernel 3, same padding, ReLU between layers) giving (M, c);
2. temporal encoder: frames flattened to (n, M*c), plus a positional
   embedding, through residual self-attention + feed-forward blocks;
3. heads: segment scales (positive, via exp) and joint coordinates;
4. FK layer: scale the skeleton, clamp the coordinates, run forward kinematics.

Weights are seeded pseudo-random; there is no training loop.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes
from .kinematics import fk_jacobian, fk_scale_jacobian, forward_kinematics, joint_jacobian
from .skeleton import Pose, SkeletonModel, apply_scales, clamp_pose


class NeurikError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    joints: float = 1.0
    markers: float = 2.0
    scales: float = 0.1
    angles: float = 0.06


@dataclass(frozen=True)
class NeurikConfig:
    marker_count: int = 142
    spatial_channels: int = 32
    frames: int = 64
    conv_layers: int = 2
    kernel_size: int = 3
    attention_heads: int = 4
    head_dim: int | None = None
    blocks: int = 2
    ffn_mult: int = 4
    output_mode: str = "last"  # "last" or "all"
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.frames < 1:
            raise NeurikError("frames must be >= 1")
        if self.output_mode not in ("last", "all"):
            raise NeurikError(f"unknown output_mode {self.output_mode!r}")
        if self.kernel_size % 2 != 1:
            raise NeurikError("kernel_size must be odd for same padding")
        if self.model_dim % (self.attention_heads * self.resolved_head_dim) != 0:
            raise NeurikError(
                f"M*c = {self.model_dim} not divisible by heads*head_dim = "
                f"{self.attention_heads * self.resolved_head_dim}")

    @property
    def model_dim(self) -> int:
        return self.marker_count * self.spatial_channels

    @property
    def resolved_head_dim(self) -> int:
        """Configured head_dim, else the largest divisor of M*c/heads that is <= 32."""
        if self.head_dim is not None:
            return self.head_dim
        if self.model_dim % self.attention_heads:
            raise NeurikError("M*c must be divisible by the number of heads")
        per_head = self.model_dim // self.attention_heads
        return max(d for d in range(1, min(per_head, 32) + 1) if per_head % d == 0)

    @property
    def inner_dim(self) -> int:
        return self.attention_heads * self.resolved_head_dim


@dataclass
class NeurikWeights:
    proj_w: np.ndarray  # (3, c)
    proj_b: np.ndarray  # (c,)
    conv_w: list[np.ndarray]  # each (kernel, c, c)
    conv_b: list[np.ndarray]
    pos_embed: np.ndarray  # (n, M*c)
    blocks: list[dict[str, np.ndarray]]
    scale_w: np.ndarray  # (M*c, 3*J)
    scale_b: np.ndarray
    angle_w: np.ndarray  # (M*c, DOF)
    angle_b: np.ndarray


@dataclass
class NeurikOutput:
    scales_hat: np.ndarray  # (J, 3)
    q_r_hat: np.ndarray  # (DOF,) or (n, DOF)
    fk_markers: np.ndarray | None = None
    fk_joints: np.ndarray | None = None
    shapes: dict[str, tuple] = field(default_factory=dict)


def init_weights(config: NeurikConfig, n_segments: int, n_dof: int, seed: int = 0) -> NeurikWeights:
    """Seeded init: N(0, 1/fan_in) matrices, zero biases, N(0, 0.02^2) position
    embedding, and heads scaled by 0.01 so untrained outputs stay near rest."""
    rng = np.random.default_rng(seed)
    c, D, I = config.spatial_channels, config.model_dim, config.inner_dim
    F = config.ffn_mult * I

    def mat(shape, fan_in, gain=1.0):
        return gain * rng.standard_normal(shape) / np.sqrt(fan_in)

    blocks = []
    for _ in range(config.blocks):
        blocks.append({
            "wq": mat((D, I), D), "wk": mat((D, I), D), "wv": mat((D, I), D), "wo": mat((I, D), I),
            "w1": mat((D, F), D), "b1": np.zeros(F), "w2": mat((F, D), F), "b2": np.zeros(D),
        })
    return NeurikWeights(
        proj_w=mat((3, c), 3), proj_b=np.zeros(c),
        conv_w=[mat((config.kernel_size, c, c), config.kernel_size * c) for _ in range(config.conv_layers)],
        conv_b=[np.zeros(c) for _ in range(config.conv_layers)],
        pos_embed=0.02 * rng.standard_normal((config.frames, D)),
        blocks=blocks,
        scale_w=mat((D, 3 * n_segments), D, 0.01), scale_b=np.zeros(3 * n_segments),
        angle_w=mat((D, n_dof), D, 0.01), angle_b=np.zeros(n_dof),
    )


def _relu(x):
    return np.maximum(x, 0.0)


def conv1d_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """1-D convolution along axis 0 of ``x`` (M, c_in) with zero same-padding."""
    k = kernel.shape[0]
    pad = k // 2
    xp = np.pad(x, ((pad, pad), (0, 0)))
    M = x.shape[0]
    out = np.broadcast_to(bias, (M, kernel.shape[2])).copy()
    for t in range(k):
        out += xp[t:t + M] @ kernel[t]
    return out


def spatial_encode(markers: np.ndarray, weights: NeurikWeights, config: NeurikConfig) -> np.ndarray:
    markers = np.asarray(markers, dtype=float)
    if markers.shape != (config.marker_count, 3):
        raise NeurikError(f"expected markers ({config.marker_count}, 3), got {markers.shape}")
    z = markers @ weights.proj_w + weights.proj_b
    for i, (w, b) in enumerate(zip(weights.conv_w, weights.conv_b)):
        if i > 0:
            z = _relu(z)
        z = conv1d_same(z, w, b)
    return z


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def self_attention(x: np.ndarray, block: dict, heads: int, return_weights: bool = False):
    n = x.shape[0]
    I = block["wq"].shape[1]
    dh = I // heads
    q = (x @ block["wq"]).reshape(n, heads, dh).transpose(1, 0, 2)
    k = (x @ block["wk"]).reshape(n, heads, dh).transpose(1, 0, 2)
    v = (x @ block["wv"]).reshape(n, heads, dh).transpose(1, 0, 2)
    att = softmax_rows(q @ k.transpose(0, 2, 1) / np.sqrt(dh))
    out = (att @ v).transpose(1, 0, 2).reshape(n, I) @ block["wo"]
    return (out, att) if return_weights else out


def feed_forward(x: np.ndarray, block: dict) -> np.ndarray:
    return _relu(x @ block["w1"] + block["b1"]) @ block["w2"] + block["b2"]


def temporal_forward(sequence: np.ndarray, weights: NeurikWeights, config: NeurikConfig) -> NeurikOutput:
    """Temporal encoder and prediction heads (before the FK layer).

    ``sequence`` is (n, M, c). Only the attention matrix shape lands in
    ``output.shapes``; use :func:`temporal_trace` for the values.
    """
    out, _ = _temporal(sequence, weights, config)
    return out


def temporal_trace(sequence: np.ndarray, weights: NeurikWeights, config: NeurikConfig):
    """Like :func:`temporal_forward` but also returns per-block attention weights."""
    return _temporal(sequence, weights, config)


def _temporal(sequence, weights, config):
    seq = np.asarray(sequence, dtype=float)
    n, M, c = seq.shape
    if (n, M, c) != (config.frames, config.marker_count, config.spatial_channels):
        raise NeurikError(
            f"expected sequence ({config.frames}, {config.marker_count}, {config.spatial_channels}), got {seq.shape}")
    shapes = {"Z_frame": (M, c)}
    x = seq.reshape(n, M * c)
    shapes["Z_seq"] = x.shape
    x = x + weights.pos_embed
    attn = []
    for block in weights.blocks:
        a, w = self_attention(x, block, config.attention_heads, return_weights=True)
        attn.append(w)
        shapes["attention"] = w.shape
        x = x + a
        x = x + feed_forward(x, block)
    shapes["Y"] = x.shape
    if config.output_mode == "last":
        y = x[-1]
        q = y @ weights.angle_w + weights.angle_b
        s_in = y
    else:
        q = x @ weights.angle_w + weights.angle_b
        s_in = x.mean(axis=0)
    scales = np.exp(s_in @ weights.scale_w + weights.scale_b).reshape(-1, 3)
    shapes["scales_hat"] = scales.shape
    shapes["q_r_hat"] = q.shape
    return NeurikOutput(scales, q, shapes=shapes), attn


def fk_layer(output: NeurikOutput, model: SkeletonModel) -> NeurikOutput:
    """Scale the skeleton by the predicted scales, clamp and run FK at zero root translation."""
    scaled = apply_scales(model, output.scales_hat)
    qs = np.atleast_2d(output.q_r_hat)
    if qs.shape[1] != model.n_dof:
        raise NeurikError(f"q_r_hat has {qs.shape[1]} coordinates, model has {model.n_dof} DOF")
    clamped, markers, joints = [], [], []
    for q in qs:
        pose = clamp_pose(scaled, Pose(q))
        fk = forward_kinematics(scaled, pose)
        clamped.append(pose.q_r)
        markers.append(fk.marker_world)
        joints.append(fk.joint_world)
    single = np.ndim(output.q_r_hat) == 1
    pick = (lambda a: a[0]) if single else np.array
    return NeurikOutput(output.scales_hat, pick(clamped), pick(markers), pick(joints), dict(output.shapes))


def neurik_forward(marker_sequence: np.ndarray, weights: NeurikWeights, config: NeurikConfig,
                   model: SkeletonModel) -> NeurikOutput:
    seq = np.asarray(marker_sequence, dtype=float)
    encoded = np.stack([spatial_encode(f, weights, config) for f in seq])
    return fk_layer(temporal_forward(encoded, weights, config), model)


def neurik_loss(output: NeurikOutput, gt: dict, config: NeurikConfig) -> tuple[float, dict[str, float]]:
    """Weighted four-term loss.

    Joint and marker terms are mean squared Euclidean distances, scale and
    angle terms are mean squared errors. ``gt`` holds ``joints``, ``markers``,
    ``scales`` and ``q_r`` shaped like the corresponding output fields.
    """
    pairs = {
        "joints": (output.fk_joints, gt["joints"]),
        "markers": (output.fk_markers, gt["markers"]),
        "scales": (output.scales_hat, gt["scales"]),
        "angles": (output.q_r_hat, gt["q_r"]),
    }
    terms = {}
    for key, (a, b) in pairs.items():
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        if a.shape != b.shape:
            raise NeurikError(f"{key}: shape {a.shape} vs ground truth {b.shape}")
        if key in ("joints", "markers"):
            terms[key] = float(np.mean(np.sum((a - b) ** 2, axis=-1)))
        else:
            terms[key] = float(np.mean((a - b) ** 2))
    return combine_loss(terms, config.loss_weights), terms


def combine_loss(terms: dict[str, float], lw: LossWeights) -> float:
    return (lw.joints * terms["joints"] + lw.markers * terms["markers"]
            + lw.scales * terms["scales"] + lw.angles * terms["angles"])


def loss_gradient(model: SkeletonModel, q_raw: np.ndarray, scales_hat: np.ndarray, gt: dict,
                  config: NeurikConfig) -> tuple[np.ndarray, np.ndarray, float]:
    """Analytic gradient of the loss w.r.t. raw head outputs (q before clamping, scales).

    Clamping uses a one-sided subgradient: d clamp(q)/dq is 1 on the closed
    range [lo, hi] and 0 strictly outside it.
    Returns ``(grad_q, grad_scales, loss)``.
    """
    lw = config.loss_weights
    q_raw = np.asarray(q_raw, dtype=float)
    single = q_raw.ndim == 1
    qs = np.atleast_2d(q_raw)
    gt_q = np.atleast_2d(gt["q_r"])
    gt_m = np.asarray(gt["markers"]).reshape(len(qs), -1, 3)
    gt_j = np.asarray(gt["joints"]).reshape(len(qs), -1, 3)
    n = len(qs)
    ranges = model.dof_ranges()
    scaled = apply_scales(model, scales_hat)
    D = model.n_dof

    grad_q = np.zeros_like(qs)
    grad_s = np.zeros(scales_hat.size)
    out = fk_layer(NeurikOutput(scales_hat, q_raw), model)
    total, _ = neurik_loss(out, gt, config)
    for t, q in enumerate(qs):
        pose = clamp_pose(scaled, Pose(q))
        fk = forward_kinematics(scaled, pose)
        g_m = 2.0 * lw.markers / (n * model.n_markers) * (fk.marker_world - gt_m[t]).ravel()
        g_j = 2.0 * lw.joints / (n * model.n_joints) * (fk.joint_world - gt_j[t]).ravel()
        Jm = fk_jacobian(scaled, pose)[:, :D]
        Jj = joint_jacobian(scaled, pose)[:, :D]
        g_qc = Jm.T @ g_m + Jj.T @ g_j + 2.0 * lw.angles / (n * D) * (pose.q_r - gt_q[t])
        inside = (q >= ranges[:, 0]) & (q <= ranges[:, 1])
        grad_q[t] = np.where(inside, g_qc, 0.0)
        dM, dJ = fk_scale_jacobian(model, scales_hat, pose)
        grad_s += dM.T @ g_m + dJ.T @ g_j
    grad_s += 2.0 * lw.scales / scales_hat.size * (scales_hat - gt["scales"]).ravel()
    return (grad_q[0] if single else grad_q), grad_s.reshape(scales_hat.shape), total


def save_weights(weights: NeurikWeights, config: NeurikConfig, path: str | Path) -> None:
    arrays = {"proj_w": weights.proj_w, "proj_b": weights.proj_b, "pos_embed": weights.pos_embed,
              "scale_w": weights.scale_w, "scale_b": weights.scale_b,
              "angle_w": weights.angle_w, "angle_b": weights.angle_b}
    for i, (w, b) in enumerate(zip(weights.conv_w, weights.conv_b)):
        arrays[f"conv{i}_w"], arrays[f"conv{i}_b"] = w, b
    for i, block in enumerate(weights.blocks):
        for k, v in block.items():
            arrays[f"block{i}_{k}"] = v
    cfg = asdict(config)
    header = {"format": "biokin-neurik-1", "config": cfg}
    buf = io.BytesIO()
    np.savez(buf, header=np.array(json.dumps(header)), **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_weights(path: str | Path) -> tuple[NeurikWeights, NeurikConfig]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        cfg = header["config"]
        cfg["loss_weights"] = LossWeights(**cfg["loss_weights"])
        config = NeurikConfig(**cfg)
        conv_w = [data[f"conv{i}_w"] for i in range(config.conv_layers)]
        conv_b = [data[f"conv{i}_b"] for i in range(config.conv_layers)]
        keys = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")
        blocks = [{k: data[f"block{i}_{k}"] for k in keys} for i in range(config.blocks)]
        w = NeurikWeights(data["proj_w"], data["proj_b"], conv_w, conv_b, data["pos_embed"], blocks,
                          data["scale_w"], data["scale_b"], data["angle_w"], data["angle_b"])
    return w, config
