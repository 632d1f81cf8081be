"""Gated NetVLAD network: two NetVLAD streams, a two-layer FC block with
batch norm, context gating, a mixture of experts and a final output gate.

Weights live in a flat name -> array mapping (or a TensorBundle).  Storage
precision is float32 (float16 after compression); all arithmetic here runs
in float64.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .tensors import TensorBundle

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-5

# The four tensors that dominate the byte count and are the default
# half-precision cast selection.  Their names are a compatibility contract.
BIG4_TENSOR_NAMES = (
    "tower/experts/weights",
    "tower/gates/weights",
    "tower/gating_prob_weights",
    "tower/hidden1_weights/hidden1_weights",
)

BN_STAT_NAMES = ("tower/hidden1_bn/moving_mean", "tower/hidden1_bn/moving_var")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters.

    ``k_audio`` defaults to half the video cluster count (at least 1), the
    usual convention for this architecture family.
    """

    k_video: int
    hidden_size: int
    vocab_size: int
    d_video: int = 1024
    d_audio: int = 128
    k_audio: int | None = None
    num_experts: int = 5
    use_dummy_expert: bool = True
    normalize_vlad: bool = True

    def __post_init__(self):
        if self.k_audio is None:
            object.__setattr__(self, "k_audio", max(1, self.k_video // 2))
        for name in ("k_video", "k_audio", "hidden_size", "vocab_size",
                     "d_video", "d_audio", "num_experts"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))

    @property
    def vlad_dim(self) -> int:
        return self.k_video * self.d_video + self.k_audio * self.d_audio

    @property
    def moe_input_dim(self) -> int:
        return 2 * self.hidden_size

    @property
    def gate_mixtures(self) -> int:
        """Columns per class in the gate matrix (experts plus dummy slot)."""
        return self.num_experts + (1 if self.use_dummy_expert else 0)

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden_size
        h2 = 2 * h
        v = self.vocab_size
        e = self.num_experts
        return {
            "video_vlad/assign_weights": (self.d_video, self.k_video),
            "video_vlad/assign_bias": (self.k_video,),
            "video_vlad/centroids": (self.k_video, self.d_video),
            "audio_vlad/assign_weights": (self.d_audio, self.k_audio),
            "audio_vlad/assign_bias": (self.k_audio,),
            "audio_vlad/centroids": (self.k_audio, self.d_audio),
            "tower/hidden1_weights/hidden1_weights": (self.vlad_dim, h),
            "tower/hidden1_bn/gamma": (h,),
            "tower/hidden1_bn/beta": (h,),
            "tower/hidden1_bn/moving_mean": (h,),
            "tower/hidden1_bn/moving_var": (h,),
            "tower/hidden2/weights": (h, h2),
            "tower/hidden2/bias": (h2,),
            "tower/hidden_gate/weights": (h2, h2),
            "tower/hidden_gate/bias": (h2,),
            "tower/gates/weights": (h2, v * self.gate_mixtures),
            "tower/experts/weights": (h2, v * e),
            "tower/experts/bias": (v * e,),
            "tower/gating_prob_weights": (v, v),
            "tower/gating_prob_bias": (v,),
        }

    def trainable_names(self) -> tuple[str, ...]:
        return tuple(n for n in sorted(self.tensor_shapes()) if n not in BN_STAT_NAMES)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        return cls(**dict(data))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class FrameFeatures:
    """Per-video frame-level features: N x d_video and N x d_audio arrays."""

    video: np.ndarray
    audio: np.ndarray

    def __post_init__(self):
        video = np.ascontiguousarray(np.asarray(self.video, dtype=np.float32))
        audio = np.ascontiguousarray(np.asarray(self.audio, dtype=np.float32))
        if video.ndim != 2 or audio.ndim != 2:
            raise ShapeError("frame features must be 2-D (frames x dims)")
        if video.shape[0] != audio.shape[0]:
            raise ShapeError(
                f"video has {video.shape[0]} frames but audio has {audio.shape[0]}")
        if video.shape[0] < 1:
            raise ValidationError("a video must have at least one frame")
        if not (np.isfinite(video).all() and np.isfinite(audio).all()):
            raise ValidationError("frame features must be finite")
        video.setflags(write=False)
        audio.setflags(write=False)
        object.__setattr__(self, "video", video)
        object.__setattr__(self, "audio", audio)

    @property
    def num_frames(self) -> int:
        return int(self.video.shape[0])


def init_weights(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic float32 initialization.

    Matrices get Xavier-uniform values, biases start at zero, batch-norm
    scale at one and the moving variance at one.  Tensors are drawn in name
    order so the layout alone fixes the random stream.
    """
    rng = np.random.default_rng(seed)
    shapes = config.tensor_shapes()
    weights: dict[str, np.ndarray] = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name in ("tower/hidden1_bn/gamma", "tower/hidden1_bn/moving_var"):
            arr = np.ones(shape, dtype=np.float32)
        elif len(shape) == 1:
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in, fan_out = shape[0], shape[1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        weights[name] = arr
    return weights


WeightsLike = Mapping[str, np.ndarray] | TensorBundle


def compute_weights(config: ModelConfig, weights: WeightsLike) -> dict[str, np.ndarray]:
    """Widen stored weights to float64 and check names and shapes."""
    if isinstance(weights, TensorBundle):
        raw = {t.name: t.values for t in weights}
    else:
        raw = dict(weights)
    shapes = config.tensor_shapes()
    missing = sorted(set(shapes) - set(raw))
    if missing:
        raise ValidationError(f"weights are missing tensors: {missing}")
    out: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        arr = np.asarray(raw[name], dtype=np.float64)
        if arr.shape != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
        out[name] = arr
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def soft_assign(x: np.ndarray, assign_weights: np.ndarray, assign_bias: np.ndarray) -> np.ndarray:
    """Row-wise softmax of x @ W + b, computed with max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(assign_weights, dtype=np.float64)
    b = np.asarray(assign_bias, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("soft_assign: inconsistent shapes")
    return _softmax_rows(x @ w + b)


def _l2_rows(m: np.ndarray) -> np.ndarray:
    return np.sqrt((m * m).sum(axis=1))


def netvlad_aggregate(
    x: np.ndarray,
    assign_weights: np.ndarray,
    assign_bias: np.ndarray,
    centroids: np.ndarray,
    normalize: bool = True,
) -> np.ndarray:
    """Soft-assignment-weighted sum of residuals to each centroid.

    Returns the K x D descriptor.  With ``normalize`` each cluster row is
    L2-normalized and the flattened result is L2-normalized again; rows (or
    a descriptor) with zero norm are left at zero.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    a = soft_assign(x, assign_weights, assign_bias)
    if c.shape != (a.shape[1], x.shape[1]):
        raise ShapeError("netvlad_aggregate: centroid shape mismatch")
    s = a.sum(axis=0)
    raw = a.T @ x - s[:, None] * c
    if not normalize:
        return raw
    norms = _l2_rows(raw)
    safe = np.where(norms > 0.0, norms, 1.0)
    intra = raw / safe[:, None]
    flat = intra.ravel()
    g = np.sqrt(flat @ flat)
    if g > 0.0:
        flat = flat / g
    return flat.reshape(raw.shape)


def context_gate(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Self-gating transform sigmoid(x @ W + b) * x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    p = x.shape[-1]
    if w.shape != (p, p) or b.shape != (p,):
        raise ShapeError("context_gate: weights must be p x p with a p bias")
    return _sigmoid(x @ w + b) * x


def fc_forward(x: np.ndarray, weights: WeightsLike, mode: str = "inference") -> np.ndarray:
    """The two-layer FC block: relu(batchnorm(x @ W1)) @ W2 + b2.

    ``mode`` selects the batch-norm statistics: "inference" uses the stored
    moving statistics, "train" the statistics of the given batch.  This
    function is pure; the training loop owns the momentum update of the
    moving statistics.
    """
    w = _plain_arrays(weights)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    w1 = w["tower/hidden1_weights/hidden1_weights"]
    if batch.shape[1] != w1.shape[0]:
        raise ShapeError(f"fc_forward: input length {batch.shape[1]} does not match {w1.shape[0]}")
    z1 = batch @ w1
    y1, _, _, _ = _batch_norm(z1, w, mode)
    r = np.maximum(y1, 0.0)
    out = r @ w["tower/hidden2/weights"] + w["tower/hidden2/bias"]
    return out[0] if single else out


def moe_predict(h: np.ndarray, weights: WeightsLike, config: ModelConfig) -> np.ndarray:
    """Per-class probability from the mixture of experts.

    Gate logits are a learned slice per class; their softmax spans the
    experts plus, when enabled, one dummy slot whose mass is dropped, so the
    per-class gate mass over real experts is at most one.  Expert outputs
    are sigmoids of affine maps; the prediction is their gated sum.
    """
    w = _plain_arrays(weights)
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    batch = h[None, :] if single else h
    probs, _ = _moe_forward(batch, w, config)
    return probs[0] if single else probs


def forward(
    config: ModelConfig,
    weights: WeightsLike,
    features: FrameFeatures,
    mode: str = "inference",
) -> np.ndarray:
    """Full pipeline for one video; returns a vector of V probabilities."""
    probs, _ = _forward_batch(config, compute_weights(config, weights), [features], mode)
    return probs[0]


def _plain_arrays(weights: WeightsLike) -> dict[str, np.ndarray]:
    if isinstance(weights, TensorBundle):
        return {t.name: t.values.astype(np.float64) for t in weights}
    return {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}


def _batch_norm(z: np.ndarray, w: Mapping[str, np.ndarray], mode: str):
    if mode == "train":
        mean = z.mean(axis=0)
        var = z.var(axis=0)
    elif mode == "inference":
        mean = w["tower/hidden1_bn/moving_mean"]
        var = w["tower/hidden1_bn/moving_var"]
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    xhat = (z - mean) / np.sqrt(var + BN_EPSILON)
    y = w["tower/hidden1_bn/gamma"] * xhat + w["tower/hidden1_bn/beta"]
    return y, xhat, mean, var


def _vlad_forward(x: np.ndarray, w: Mapping[str, np.ndarray], prefix: str, normalize: bool):
    aw = w[f"{prefix}/assign_weights"]
    ab = w[f"{prefix}/assign_bias"]
    c = w[f"{prefix}/centroids"]
    if x.shape[1] != aw.shape[0]:
        raise ShapeError(f"{prefix}: feature dim {x.shape[1]} does not match {aw.shape[0]}")
    a = _softmax_rows(x @ aw + ab)
    s = a.sum(axis=0)
    raw = a.T @ x - s[:, None] * c
    if normalize:
        norms = _l2_rows(raw)
        safe = np.where(norms > 0.0, norms, 1.0)
        intra = raw / safe[:, None]
        flat = intra.ravel()
        g = float(np.sqrt(flat @ flat))
        out = flat / g if g > 0.0 else flat
    else:
        norms = intra = None
        g = 0.0
        out = raw.ravel()
    cache = {"x": x, "a": a, "s": s, "raw": raw, "norms": norms, "intra": intra, "g": g}
    return out, cache


def _vlad_backward(dout: np.ndarray, cache: dict, c: np.ndarray, normalize: bool):
    x, a, s, raw = cache["x"], cache["a"], cache["s"], cache["raw"]
    if normalize:
        intra, norms, g = cache["intra"], cache["norms"], cache["g"]
        flat = intra.ravel()
        if g > 0.0:
            du = dout / g - flat * (flat @ dout) / (g * g * g)
        else:
            du = np.zeros_like(dout)
        dintra = du.reshape(raw.shape)
        dot = (raw * dintra).sum(axis=1)
        safe = np.where(norms > 0.0, norms, 1.0)
        draw = dintra / safe[:, None] - raw * (dot / (safe ** 3))[:, None]
        draw[norms == 0.0] = 0.0
    else:
        draw = dout.reshape(raw.shape)
    da = x @ draw.T - (draw * c).sum(axis=1)[None, :]
    dc = -s[:, None] * draw
    dz = a * (da - (da * a).sum(axis=1, keepdims=True))
    dw = x.T @ dz
    db = dz.sum(axis=0)
    return dw, db, dc


def _moe_forward(hg: np.ndarray, w: Mapping[str, np.ndarray], config: ModelConfig):
    v, e = config.vocab_size, config.num_experts
    m = config.gate_mixtures
    wg = w["tower/gates/weights"]
    we = w["tower/experts/weights"]
    be = w["tower/experts/bias"]
    if hg.shape[1] != wg.shape[0]:
        raise ShapeError("moe: hidden width does not match the gate matrix")
    gate_logits = (hg @ wg).reshape(hg.shape[0], v, m)
    gates = _softmax_rows(gate_logits)
    expert_logits = (hg @ we + be).reshape(hg.shape[0], v, e)
    experts = _sigmoid(expert_logits)
    probs = np.einsum("bvm,bvm->bv", gates[..., :e], experts)
    return probs, {"gates": gates, "experts": experts}


def _forward_batch(
    config: ModelConfig,
    w: Mapping[str, np.ndarray],
    features: Sequence[FrameFeatures],
    mode: str,
    want_cache: bool = False,
):
    """Forward pass over a batch of videos.

    NetVLAD runs per video; the FC block runs jointly because train-mode
    batch norm couples the batch.  Returns (probs B x V, cache or None).
    """
    vlad_caches = []
    rows = []
    for f in features:
        xv = f.video.astype(np.float64)
        xa = f.audio.astype(np.float64)
        if xv.shape[1] != config.d_video or xa.shape[1] != config.d_audio:
            raise ShapeError("frame feature dims do not match the model config")
        v_out, v_cache = _vlad_forward(xv, w, "video_vlad", config.normalize_vlad)
        a_out, a_cache = _vlad_forward(xa, w, "audio_vlad", config.normalize_vlad)
        rows.append(np.concatenate([v_out, a_out]))
        vlad_caches.append((v_cache, a_cache))
    x1 = np.stack(rows)
    z1 = x1 @ w["tower/hidden1_weights/hidden1_weights"]
    y1, xhat, mean, var = _batch_norm(z1, w, mode)
    r = np.maximum(y1, 0.0)
    z2 = r @ w["tower/hidden2/weights"] + w["tower/hidden2/bias"]
    g1 = _sigmoid(z2 @ w["tower/hidden_gate/weights"] + w["tower/hidden_gate/bias"])
    hg = g1 * z2
    pm, moe_cache = _moe_forward(hg, w, config)
    g2 = _sigmoid(pm @ w["tower/gating_prob_weights"] + w["tower/gating_prob_bias"])
    out = g2 * pm
    if not want_cache:
        return out, None
    cache = {
        "vlad": vlad_caches, "x1": x1, "y1": y1, "xhat": xhat,
        "bn_mean": mean, "bn_var": var, "r": r, "z2": z2, "g1": g1,
        "hg": hg, "pm": pm, "g2": g2, "out": out, "moe": moe_cache,
    }
    return out, cache


BCE_CLIP = 1e-6


def _bce_loss_value(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs, BCE_CLIP, 1.0 - BCE_CLIP)
    terms = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return float(terms.mean())


def _bce_output_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = np.clip(probs, BCE_CLIP, 1.0 - BCE_CLIP)
    inside = (probs > BCE_CLIP) & (probs < 1.0 - BCE_CLIP)
    grad = (p - labels) / (p * (1.0 - p))
    grad = np.where(inside, grad, 0.0)
    return grad / probs.size


def loss_and_gradients(
    config: ModelConfig,
    weights: WeightsLike,
    features: Sequence[FrameFeatures],
    labels: np.ndarray,
):
    """Mean binary cross-entropy over a batch and its exact gradient.

    Returns (loss, probs, grads, (batch_mean, batch_var)).  Gradients cover
    every trainable tensor; the batch-norm moving statistics are not
    differentiated, the caller folds the returned batch statistics into them.
    """
    w = compute_weights(config, weights)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (len(features), config.vocab_size):
        raise ShapeError("labels must be batch x vocab")
    out, cache = _forward_batch(config, w, features, "train", want_cache=True)
    loss = _bce_loss_value(out, labels)
    dout = _bce_output_grad(out, labels)

    grads = {name: np.zeros_like(w[name]) for name in config.trainable_names()}
    v, e = config.vocab_size, config.num_experts

    # output context gate
    pm, g2 = cache["pm"], cache["g2"]
    dg2 = dout * pm
    dzp = dg2 * g2 * (1.0 - g2)
    grads["tower/gating_prob_weights"] = pm.T @ dzp
    grads["tower/gating_prob_bias"] = dzp.sum(axis=0)
    dpm = dout * g2 + dzp @ w["tower/gating_prob_weights"].T

    # mixture of experts
    gates = cache["moe"]["gates"]
    experts = cache["moe"]["experts"]
    hg = cache["hg"]
    dgates = np.zeros_like(gates)
    dgates[..., :e] = dpm[:, :, None] * experts
    dlg = gates * (dgates - (dgates * gates).sum(axis=-1, keepdims=True))
    dse = dpm[:, :, None] * gates[..., :e]
    dle = dse * experts * (1.0 - experts)
    dlg_flat = dlg.reshape(len(features), -1)
    dle_flat = dle.reshape(len(features), -1)
    grads["tower/gates/weights"] = hg.T @ dlg_flat
    grads["tower/experts/weights"] = hg.T @ dle_flat
    grads["tower/experts/bias"] = dle_flat.sum(axis=0)
    dhg = dlg_flat @ w["tower/gates/weights"].T + dle_flat @ w["tower/experts/weights"].T

    # hidden context gate
    z2, g1 = cache["z2"], cache["g1"]
    dg1 = dhg * z2
    dzg = dg1 * g1 * (1.0 - g1)
    grads["tower/hidden_gate/weights"] = z2.T @ dzg
    grads["tower/hidden_gate/bias"] = dzg.sum(axis=0)
    dz2 = dhg * g1 + dzg @ w["tower/hidden_gate/weights"].T

    # second FC layer
    r = cache["r"]
    grads["tower/hidden2/weights"] = r.T @ dz2
    grads["tower/hidden2/bias"] = dz2.sum(axis=0)
    dr = dz2 @ w["tower/hidden2/weights"].T

    # relu and batch norm (train-mode batch statistics)
    y1, xhat = cache["y1"], cache["xhat"]
    dy1 = dr * (y1 > 0.0)
    grads["tower/hidden1_bn/gamma"] = (dy1 * xhat).sum(axis=0)
    grads["tower/hidden1_bn/beta"] = dy1.sum(axis=0)
    dxhat = dy1 * w["tower/hidden1_bn/gamma"]
    inv = 1.0 / np.sqrt(cache["bn_var"] + BN_EPSILON)
    dz1 = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))

    # first FC layer
    x1 = cache["x1"]
    grads["tower/hidden1_weights/hidden1_weights"] = x1.T @ dz1
    dx1 = dz1 @ w["tower/hidden1_weights/hidden1_weights"].T

    # per-video NetVLAD
    split = config.k_video * config.d_video
    for i, (v_cache, a_cache) in enumerate(cache["vlad"]):
        for prefix, sub, grad_slice in (
            ("video_vlad", v_cache, dx1[i, :split]),
            ("audio_vlad", a_cache, dx1[i, split:]),
        ):
            dw_a, db_a, dc = _vlad_backward(
                grad_slice, sub, w[f"{prefix}/centroids"], config.normalize_vlad)
            grads[f"{prefix}/assign_weights"] += dw_a
            grads[f"{prefix}/assign_bias"] += db_a
            grads[f"{prefix}/centroids"] += dc

    return loss, out, grads, (cache["bn_mean"], cache["bn_var"])


def backward(
    config: ModelConfig,
    weights: WeightsLike,
    batch: Sequence[tuple[FrameFeatures, np.ndarray]],
) -> dict[str, np.ndarray]:
    """Gradient of the mean BCE loss over a batch of (features, labels)."""
    features = [f for f, _ in batch]
    labels = np.stack([np.asarray(y, dtype=np.float64) for _, y in batch])
    _, _, grads, _ = loss_and_gradients(config, weights, features, labels)
    return grads
