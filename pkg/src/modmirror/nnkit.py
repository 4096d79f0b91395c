"""Minimal dense networks with exact analytic gradients.

Everything here works in float64. Models are immutable: training code keeps a
flat parameter vector and rebuilds light views over it with ``*.from_flat``.

Flat layout (canonical): per layer the weight matrix in row-major order, then
the bias; layers in forward order. Weights have shape ``(fan_in, fan_out)`` so
a layer computes ``x @ W + b`` on a batch of row vectors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

EPS = 1e-12
LOG_EPS = float(np.log(EPS))

ACTIVATIONS = ("relu", "identity")


class InvalidInput(ValueError):
    """Raised when an operation receives malformed or inconsistent input."""


def _as_finite(x, name="input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# probability helpers


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = _as_finite(logits, "logits")
    if z.size == 0 or z.shape[-1] < 1:
        raise InvalidInput("logits must have at least one entry")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def temper(p, T: float) -> np.ndarray:
    """Sharpen or soften a distribution: ``p**(1/T)`` renormalised.

    Entries are floored at ``EPS`` before the log, so zeros are tolerated.
    """
    if not T > 0:
        raise InvalidInput(f"temperature must be positive, got {T}")
    p = _as_finite(p, "p")
    if T == 1.0:
        return p.copy()
    logp = np.log(np.maximum(p, EPS)) / T
    return softmax(logp)


def kl_div(p, q) -> float:
    """``sum p * ln(p / q)`` with ``0 ln 0 = 0`` and q floored at ``EPS``."""
    p = _as_finite(p, "p")
    q = _as_finite(q, "q")
    if p.shape != q.shape:
        raise InvalidInput(f"length mismatch: {p.shape} vs {q.shape}")
    mask = p > 0
    logp = np.log(np.maximum(p, EPS))
    logq = np.log(np.maximum(q, EPS))
    return float(np.sum(np.where(mask, p * (logp - logq), 0.0)))


# ---------------------------------------------------------------------------
# dense networks


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "identity"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size


@dataclass(frozen=True)
class DenseNet:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise InvalidInput("a DenseNet needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise InvalidInput(f"layer dims do not chain: {a.fan_out} -> {b.fan_in}")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise InvalidInput(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.fan_out,):
                raise InvalidInput("bias length must equal layer output dim")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def size(self) -> int:
        return sum(layer.size for layer in self.layers)

    @property
    def shape(self) -> tuple[tuple[int, int, str], ...]:
        return tuple((l.fan_in, l.fan_out, l.activation) for l in self.layers)

    def flatten(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.weight.ravel())
            parts.append(layer.bias)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, shape: Sequence[tuple[int, int, str]], flat) -> "DenseNet":
        flat = np.asarray(flat, dtype=np.float64)
        expected = sum(i * o + o for i, o, _ in shape)
        if flat.shape != (expected,):
            raise InvalidInput(f"flat vector has {flat.size} entries, topology needs {expected}")
        layers, pos = [], 0
        for fan_in, fan_out, act in shape:
            w = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = flat[pos : pos + fan_out]
            pos += fan_out
            layers.append(Layer(w, b, act))
        return cls(tuple(layers))

    @classmethod
    def init(cls, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> "DenseNet":
        """Glorot-uniform weights, zero biases."""
        if len(activations) != len(dims) - 1:
            raise InvalidInput("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(tuple(layers))


def net_shape(dims: Sequence[int], activations: Sequence[str]) -> tuple[tuple[int, int, str], ...]:
    return tuple(zip(dims[:-1], dims[1:], activations))


def dense_forward(net: DenseNet, x) -> tuple[np.ndarray, list]:
    """Forward a batch ``(n, input_dim)`` or a single vector.

    Returns the output and a cache of per-layer (input, pre-activation).
    """
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != net.input_dim:
        raise InvalidInput(f"expected input dim {net.input_dim}, got {h.shape[-1]}")
    cache = []
    for layer in net.layers:
        z = h @ layer.weight + layer.bias
        cache.append((h, z))
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h, cache


def dense_backward(net: DenseNet, cache: list, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backprop ``grad_out`` (same shape as the forward output).

    Returns (flat parameter gradient, gradient w.r.t. the input).
    """
    g = np.asarray(grad_out, dtype=np.float64)
    parts: list[np.ndarray] = []
    for layer, (h, z) in zip(reversed(net.layers), reversed(cache)):
        if layer.activation == "relu":
            g = g * (z > 0)
        if g.ndim == 1:
            dw = np.outer(h, g)
            db = g
        else:
            dw = h.T @ g
            db = g.sum(axis=0)
        parts.append(db)
        parts.append(dw.ravel())
        g = g @ layer.weight.T
    parts.reverse()
    return np.concatenate(parts), g


# ---------------------------------------------------------------------------
# audio and late-fusion models


@dataclass(frozen=True)
class Topology:
    """Dimensions shared by every model in a run."""

    audio_dim: int
    visual_dim: int
    num_classes: int
    hidden_dim: int = 64
    embed_dim: int = 32

    def encoder_shape(self, input_dim: int):
        return net_shape([input_dim, self.hidden_dim, self.embed_dim], ["relu", "identity"])

    @property
    def audio_encoder_shape(self):
        return self.encoder_shape(self.audio_dim)

    @property
    def visual_encoder_shape(self):
        return self.encoder_shape(self.visual_dim)

    @property
    def audio_head_shape(self):
        return net_shape([self.embed_dim, self.num_classes], ["identity"])

    @property
    def fusion_head_shape(self):
        return net_shape([2 * self.embed_dim, self.num_classes], ["identity"])

    def block_sizes(self) -> dict[str, int]:
        def n(shape):
            return sum(i * o + o for i, o, _ in shape)

        return {
            "audio_encoder": n(self.audio_encoder_shape),
            "visual_encoder": n(self.visual_encoder_shape),
            "audio_head": n(self.audio_head_shape),
            "fusion_head": n(self.fusion_head_shape),
        }


@dataclass(frozen=True)
class AudioModel:
    encoder: DenseNet
    head: DenseNet

    def __post_init__(self):
        if self.encoder.output_dim != self.head.input_dim:
            raise InvalidInput("audio head input must match encoder embedding dim")

    @property
    def num_classes(self) -> int:
        return self.head.output_dim

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.encoder.flatten(), self.head.flatten()])

    @classmethod
    def from_flat(cls, topo: Topology, flat) -> "AudioModel":
        flat = np.asarray(flat, dtype=np.float64)
        n_enc = topo.block_sizes()["audio_encoder"]
        return cls(
            DenseNet.from_flat(topo.audio_encoder_shape, flat[:n_enc]),
            DenseNet.from_flat(topo.audio_head_shape, flat[n_enc:]),
        )


@dataclass(frozen=True)
class MultimodalModel:
    audio_encoder: DenseNet
    visual_encoder: DenseNet
    fusion_head: DenseNet

    def __post_init__(self):
        a, v = self.audio_encoder.output_dim, self.visual_encoder.output_dim
        if a != v or self.fusion_head.input_dim != a + v:
            raise InvalidInput("fusion head input dim must equal twice the embedding dim")

    @property
    def num_classes(self) -> int:
        return self.fusion_head.output_dim

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.audio_encoder.flatten(), self.visual_encoder.flatten(), self.fusion_head.flatten()]
        )

    @classmethod
    def from_flat(cls, topo: Topology, flat) -> "MultimodalModel":
        flat = np.asarray(flat, dtype=np.float64)
        sizes = topo.block_sizes()
        a = sizes["audio_encoder"]
        v = a + sizes["visual_encoder"]
        return cls(
            DenseNet.from_flat(topo.audio_encoder_shape, flat[:a]),
            DenseNet.from_flat(topo.visual_encoder_shape, flat[a:v]),
            DenseNet.from_flat(topo.fusion_head_shape, flat[v:]),
        )


def forward_audio(model: AudioModel, x_audio):
    emb, enc_cache = dense_forward(model.encoder, x_audio)
    logits, head_cache = dense_forward(model.head, emb)
    return logits, (enc_cache, head_cache)


def forward_multimodal(model: MultimodalModel, x_audio, x_visual):
    ea, a_cache = dense_forward(model.audio_encoder, x_audio)
    ev, v_cache = dense_forward(model.visual_encoder, x_visual)
    if ea.shape[:-1] != ev.shape[:-1]:
        raise InvalidInput("audio and visual inputs must have the same batch size")
    logits, f_cache = dense_forward(model.fusion_head, np.concatenate([ea, ev], axis=-1))
    return logits, (a_cache, v_cache, f_cache)


def backward_audio(model: AudioModel, cache, dlogits) -> np.ndarray:
    enc_cache, head_cache = cache
    g_head, g_emb = dense_backward(model.head, head_cache, dlogits)
    g_enc, _ = dense_backward(model.encoder, enc_cache, g_emb)
    return np.concatenate([g_enc, g_head])


def backward_multimodal(model: MultimodalModel, cache, dlogits) -> np.ndarray:
    a_cache, v_cache, f_cache = cache
    g_fusion, g_cat = dense_backward(model.fusion_head, f_cache, dlogits)
    k = model.audio_encoder.output_dim
    g_a, _ = dense_backward(model.audio_encoder, a_cache, g_cat[..., :k])
    g_v, _ = dense_backward(model.visual_encoder, v_cache, g_cat[..., k:])
    return np.concatenate([g_a, g_v, g_fusion])


# ---------------------------------------------------------------------------
# losses and gradients


def _check_labels(labels, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise InvalidInput("empty batch")
    if y.size != n:
        raise InvalidInput(f"{y.size} labels for {n} samples")
    if y.min() < 0 or y.max() >= num_classes:
        raise InvalidInput("label out of range")
    return y


def ce_terms(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits.

    Log-probabilities below ``ln EPS`` are clamped; clamped samples contribute
    no gradient.
    """
    n = logits.shape[0]
    logp = log_softmax(logits)
    picked = logp[np.arange(n), y]
    loss = float(-np.maximum(picked, LOG_EPS).mean())
    d = np.exp(logp)
    d[np.arange(n), y] -= 1.0
    d[picked < LOG_EPS] = 0.0
    return loss, d / n


def kl_terms(student_logits: np.ndarray, teacher_probs: np.ndarray, T: float) -> tuple[float, np.ndarray]:
    """Mean ``KL(temper(p_s, T) || temper(p_t, T))`` and gradient w.r.t. student logits.

    Student probabilities come from logits, so the tempered student is
    ``softmax(z / T)`` exactly; the teacher is a constant.
    """
    n = student_logits.shape[0]
    log_s = log_softmax(student_logits / T)
    log_t = log_softmax(np.log(np.maximum(teacher_probs, EPS)) / T)
    log_t = np.maximum(log_t, LOG_EPS)
    s = np.exp(log_s)
    diff = log_s - log_t
    per_sample = np.sum(s * diff, axis=1)
    grad = s * (diff - per_sample[:, None]) / T
    return float(per_sample.mean()), grad / n


def _batch_2d(x, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise InvalidInput(f"{name} must have shape (n, {dim})")
    return x


def loss_and_grad_ce(model, batch) -> tuple[float, np.ndarray]:
    """Mean CE and flat gradient for an AudioModel or a MultimodalModel.

    ``batch`` is ``(x_audio, labels)`` for audio models and
    ``(x_audio, x_visual, labels)`` for late-fusion models.
    """
    if isinstance(model, AudioModel):
        xa, labels = batch
        xa = _batch_2d(xa, model.encoder.input_dim, "x_audio")
        y = _check_labels(labels, xa.shape[0], model.num_classes)
        logits, cache = forward_audio(model, xa)
        loss, d = ce_terms(logits, y)
        return loss, backward_audio(model, cache, d)
    if isinstance(model, MultimodalModel):
        xa, xv, labels = batch
        xa = _batch_2d(xa, model.audio_encoder.input_dim, "x_audio")
        xv = _batch_2d(xv, model.visual_encoder.input_dim, "x_visual")
        y = _check_labels(labels, xa.shape[0], model.num_classes)
        logits, cache = forward_multimodal(model, xa, xv)
        loss, d = ce_terms(logits, y)
        return loss, backward_multimodal(model, cache, d)
    raise InvalidInput(f"unsupported model type {type(model).__name__}")


def grad_ce(model, batch) -> np.ndarray:
    return loss_and_grad_ce(model, batch)[1]


def loss_and_grad_distill(
    student: AudioModel, teacher_probs, batch, T: float, kl_weight: float = 1.0
) -> tuple[float, np.ndarray]:
    """Composite ``CE + kl_weight * KL`` loss for an audio student.

    ``teacher_probs`` holds one probability row per sample; gradient flows
    only into the student.
    """
    if not T > 0:
        raise InvalidInput(f"temperature must be positive, got {T}")
    xa, labels = batch
    xa = _batch_2d(xa, student.encoder.input_dim, "x_audio")
    y = _check_labels(labels, xa.shape[0], student.num_classes)
    tp = np.asarray(teacher_probs, dtype=np.float64)
    if tp.ndim == 1:
        tp = tp[None, :]
    if tp.shape != (xa.shape[0], student.num_classes):
        raise InvalidInput("teacher_probs must have one row of class probabilities per sample")
    logits, cache = forward_audio(student, xa)
    loss, d = ce_terms(logits, y)
    if kl_weight != 0.0:
        kl, dk = kl_terms(logits, tp, T)
        loss += kl_weight * kl
        d = d + kl_weight * dk
    return loss, backward_audio(student, cache, d)


def grad_distill(student: AudioModel, teacher_probs, batch, T: float, kl_weight: float = 1.0) -> np.ndarray:
    return loss_and_grad_distill(student, teacher_probs, batch, T, kl_weight)[1]


def sgd_step(params, grad, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise InvalidInput(f"length mismatch: {params.shape} vs {grad.shape}")
    return params - lr * grad


# ---------------------------------------------------------------------------
# finite-difference checking


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-8) -> float:
    """Worst per-coordinate relative error.

    Coordinates where both values are within ``atol`` of zero are judged on
    absolute error instead (reported as 0 when that error is below ``atol``).
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    near_zero = scale <= atol
    rel = np.where(near_zero, np.where(diff <= atol, 0.0, np.inf), diff / np.maximum(scale, 1e-300))
    return float(rel.max()) if rel.size else 0.0
