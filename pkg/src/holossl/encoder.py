"""Desk-scale convolutional encoder with a projection head and exact backprop.

Backbone: ``len(conv_blocks)`` convolution + ReLU blocks followed by global
average pooling. Projection head: affine -> ReLU -> affine -> L2 normalisation.
Everything runs in float64 on NCHW arrays. Images are area-downsampled to
``input_size``, the background level (mean of the outer frame) is subtracted
and the result multiplied by a fixed layer-scale constant.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._io import Reader, atomic_write_bytes
from .imaging import IMAGE_SIZE, AugmentPolicy, ParticleImage, _area_matrix, augment

CHECKPOINT_MAGIC = b"BEMB1"
INPUT_SCALE = 4.0
BORDER = 4
SPACES = ("backbone", "projection")


@dataclass(frozen=True)
class EncoderConfig:
    conv_blocks: tuple[tuple[int, int, int], ...] = ((8, 3, 2), (16, 3, 2), (32, 3, 2), (64, 3, 2))
    feature_dim: int = 64
    proj_dim: int = 32
    input_size: int = 64

    def __post_init__(self):
        blocks = tuple(tuple(int(v) for v in b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        if not blocks:
            raise ValueError("at least one conv block is required")
        if not self.feature_dim >= self.proj_dim >= 2:
            raise ValueError("need feature_dim >= proj_dim >= 2")
        if blocks[-1][0] != self.feature_dim:
            raise ValueError("feature_dim must equal the last conv block's channel count")
        if not 1 <= self.input_size <= IMAGE_SIZE:
            raise ValueError(f"input_size must be in [1, {IMAGE_SIZE}]")
        size = self.input_size
        for out_ch, k, s in blocks:
            if out_ch < 1 or k < 1 or s < 1:
                raise ValueError(f"invalid conv block {(out_ch, k, s)}")
            size = (size + 2 * (k // 2) - k) // s + 1
            if size < 1:
                raise ValueError("conv stack downsamples the input to nothing")

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in declaration order."""
        shapes: dict[str, tuple[int, ...]] = {}
        in_ch = 1
        for i, (out_ch, k, _) in enumerate(self.conv_blocks):
            shapes[f"conv{i}.w"] = (out_ch, in_ch, k, k)
            shapes[f"conv{i}.b"] = (out_ch,)
            in_ch = out_ch
        shapes["proj0.w"] = (self.feature_dim, self.feature_dim)
        shapes["proj0.b"] = (self.feature_dim,)
        shapes["proj1.w"] = (self.proj_dim, self.feature_dim)
        shapes["proj1.b"] = (self.proj_dim,)
        return shapes

    def to_json(self) -> str:
        return json.dumps(
            {
                "conv_blocks": [list(b) for b in self.conv_blocks],
                "feature_dim": self.feature_dim,
                "proj_dim": self.proj_dim,
                "input_size": self.input_size,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        d = json.loads(text)
        return cls(tuple(tuple(b) for b in d["conv_blocks"]), d["feature_dim"], d["proj_dim"], d["input_size"])

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, np.ndarray]
    seed: int = 0

    def __post_init__(self):
        shapes = self.config.tensor_shapes()
        if list(self.tensors) != list(shapes):
            raise ValueError("parameter names do not match the encoder config")
        for name, shape in shapes.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"{name}: shape {t.shape} does not match config {shape}")
            if not np.isfinite(t).all():
                raise ValueError(f"{name}: non-finite parameter values")

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def equals(self, other: "EncoderParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


@dataclass
class EmbeddingBatch:
    vectors: np.ndarray
    space: str
    normalized: bool

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown embedding space {self.space!r}")
        if self.vectors.ndim != 2 or not np.isfinite(self.vectors).all():
            raise ValueError("embeddings must be a finite 2-D matrix")
        if self.normalized:
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.abs(norms - 1.0).max(initial=0.0) > 1e-6:
                raise ValueError("normalized embeddings must have unit rows")

    def __len__(self):
        return self.vectors.shape[0]


def init_params(config: EncoderConfig, seed: int) -> EncoderParams:
    """He (fan-in) initialisation with zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    return EncoderParams(config, tensors, seed)


# ---------------------------------------------------------------------------
# layers


def _conv_forward(x, w, b, stride):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(n, c * k * k, ho * wo)
    out = np.matmul(w.reshape(o, -1), cols) + b[:, None]
    return out.reshape(n, o, ho, wo), cols


def _conv_backward(dout, cols, w, x_shape, stride, need_dx):
    n, o, ho, wo = dout.shape
    _, c, k, _ = w.shape
    d = dout.reshape(n, o, ho * wo)
    dw = np.tensordot(d, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = d.sum(axis=(0, 2))
    if not need_dx:
        return None, dw, db
    pad = k // 2
    h, wd = x_shape[2], x_shape[3]
    dcols = np.matmul(w.reshape(o, -1).T, d).reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


def prepare_inputs(images, input_size: int) -> np.ndarray:
    """Stack images into an (N, 1, S, S) background-subtracted array at encoder resolution."""
    if isinstance(images, np.ndarray):
        arr = images.astype(np.float64, copy=False)
        if arr.ndim == 4:
            arr = arr[:, 0]
    else:
        arr = np.stack([im.pixels if isinstance(im, ParticleImage) else np.asarray(im) for im in images])
    if arr.ndim != 3 or len(arr) == 0:
        raise ValueError("expected a non-empty batch of 2-D images")
    if arr.shape[1] != input_size or arr.shape[2] != input_size:
        if arr.shape[1] != arr.shape[2]:
            raise ValueError("images must be square")
        m = _area_matrix(arr.shape[1], input_size)
        arr = np.matmul(np.matmul(m, arr), m.T)
    b = min(BORDER, input_size // 4) or 1
    frame = np.ones((input_size, input_size), dtype=bool)
    frame[b:-b, b:-b] = False
    background = arr[:, frame].mean(axis=1)
    return ((arr - background[:, None, None]) * INPUT_SCALE)[:, None]


def _forward(params: EncoderParams, x: np.ndarray, space: str):
    """Forward pass on prepared inputs; returns (output, cache)."""
    if space not in SPACES:
        raise ValueError(f"unknown embedding space {space!r}")
    cfg = params.config
    t = params.tensors
    if x.shape[1:] != (1, cfg.input_size, cfg.input_size):
        raise ValueError(f"input shape {x.shape[1:]} does not match config")
    cache = {"convs": []}
    h = x
    for i, (_, _, stride) in enumerate(cfg.conv_blocks):
        z, cols = _conv_forward(h, t[f"conv{i}.w"], t[f"conv{i}.b"], stride)
        cache["convs"].append((h.shape, cols, z > 0))
        h = np.maximum(z, 0.0)
    feat = h.mean(axis=(2, 3))
    cache["last_shape"] = h.shape
    if space == "backbone":
        return feat, cache
    a = feat @ t["proj0.w"].T + t["proj0.b"]
    hid = np.maximum(a, 0.0)
    u = hid @ t["proj1.w"].T + t["proj1.b"]
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    if (norm == 0).any():
        raise ValueError("projection output has zero norm; cannot normalise")
    zout = u / norm
    cache.update(feat=feat, a_mask=a > 0, hid=hid, norm=norm, z=zout)
    return zout, cache


def _backward(params: EncoderParams, cache, upstream: np.ndarray, space: str) -> dict[str, np.ndarray]:
    t = params.tensors
    grads = {k: np.zeros_like(v) for k, v in t.items()}
    if space == "projection":
        z, norm = cache["z"], cache["norm"]
        du = (upstream - z * (z * upstream).sum(axis=1, keepdims=True)) / norm
        grads["proj1.w"] = du.T @ cache["hid"]
        grads["proj1.b"] = du.sum(axis=0)
        da = (du @ t["proj1.w"]) * cache["a_mask"]
        grads["proj0.w"] = da.T @ cache["feat"]
        grads["proj0.b"] = da.sum(axis=0)
        dfeat = da @ t["proj0.w"]
    else:
        dfeat = upstream
    n, c, h, w = cache["last_shape"]
    dh = np.broadcast_to((dfeat / (h * w))[:, :, None, None], (n, c, h, w))
    cfg = params.config
    for i in range(len(cfg.conv_blocks) - 1, -1, -1):
        x_shape, cols, mask = cache["convs"][i]
        dz = dh * mask
        dh, dw, db = _conv_backward(dz, cols, t[f"conv{i}.w"], x_shape, cfg.conv_blocks[i][2], need_dx=i > 0)
        grads[f"conv{i}.w"] = dw
        grads[f"conv{i}.b"] = db
    return grads


def forward(params: EncoderParams, images, space: str = "backbone") -> EmbeddingBatch:
    """Embed a batch of images in backbone (raw) or projection (unit-norm) space."""
    x = prepare_inputs(images, params.config.input_size)
    out, _ = _forward(params, x, space)
    return EmbeddingBatch(out, space, normalized=space == "projection")


def backward(params: EncoderParams, images, upstream_grad: np.ndarray, space: str = "backbone") -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream_grad * forward(...))`` w.r.t. every parameter."""
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if not np.isfinite(upstream_grad).all():
        raise ValueError("upstream gradient must be finite")
    x = prepare_inputs(images, params.config.input_size)
    out, cache = _forward(params, x, space)
    if upstream_grad.shape != out.shape:
        raise ValueError(f"upstream gradient shape {upstream_grad.shape} != output shape {out.shape}")
    return _backward(params, cache, upstream_grad, space)


def embed(params: EncoderParams, images, space: str = "backbone", batch_size: int = 256) -> np.ndarray:
    """Backbone features for many images, computed in chunks."""
    chunks = []
    for start in range(0, len(images), batch_size):
        chunks.append(forward(params, images[start:start + batch_size], space).vectors)
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# optimisation


class SGD:
    """Plain SGD with heavy-ball momentum over a dict of tensors."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], names=None) -> None:
        for name in names or grads:
            v = self.velocity.get(name)
            v = grads[name].copy() if v is None else self.momentum * v + grads[name]
            self.velocity[name] = v
            tensors[name] -= self.lr * v


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def supervised_pretrain(
    params: EncoderParams,
    images: Sequence[ParticleImage] | np.ndarray,
    labels: Sequence[int],
    epochs: int,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 32,
    policy: AugmentPolicy | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> EncoderParams:
    """Train the backbone with a temporary softmax head; the head is discarded.

    Returns a new parameter set; the input is never modified. With a
    ``policy``, every sample is augmented afresh each epoch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = len(np.unique(labels))
    if n_classes < 2:
        raise ValueError("supervised pre-training needs at least two classes")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("labels must be integers 0..C-1")
    out = params.copy()
    if epochs <= 0:
        return out
    cfg = out.config
    rng = np.random.default_rng([seed, 1])
    head_w = rng.normal(0.0, math.sqrt(1.0 / cfg.feature_dim), size=(n_classes, cfg.feature_dim))
    head_b = np.zeros(n_classes)
    tensors = dict(out.tensors)
    tensors["head.w"] = head_w
    tensors["head.b"] = head_b
    backbone_names = [k for k in out.tensors if k.startswith("conv")]
    opt = SGD(lr)
    static = prepare_inputs(images, cfg.input_size) if policy is None else None
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if static is not None:
                x = static[idx]
            else:
                views = [augment(images[i], policy, int(s)) for i, s in
                         zip(idx, rng.integers(0, 2**63, size=len(idx)))]
                x = prepare_inputs(views, cfg.input_size)
            feat, cache = _forward(out, x, "backbone")
            loss, dlogits = _softmax_xent(feat @ head_w.T + head_b, labels[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = _backward(out, cache, dlogits @ head_w, "backbone")
            grads["head.w"] = dlogits.T @ feat
            grads["head.b"] = dlogits.sum(axis=0)
            opt.step(tensors, grads, backbone_names + ["head.w", "head.b"])
            losses.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)))
    return EncoderParams(cfg, {k: tensors[k] for k in out.tensors}, out.seed)


# ---------------------------------------------------------------------------
# checkpoint container


def checkpoint_bytes(params: EncoderParams) -> bytes:
    cfg_json = params.config.to_json().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, params.config.digest(), struct.pack("<I", len(cfg_json)), cfg_json,
             struct.pack("<q", params.seed)]
    for name in params.config.tensor_shapes():
        parts.append(params.tensors[name].astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> EncoderParams:
    r = Reader(Path(path).read_bytes(), str(path))
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an encoder checkpoint (bad magic)")
    digest = r.take(32)
    config = EncoderConfig.from_json(r.take(r.u32()).decode("utf-8"))
    if config.digest() != digest:
        raise ValueError(f"{path}: config digest mismatch")
    seed = struct.unpack("<q", r.take(8))[0]
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float64).reshape(shape)
    if not r.at_end():
        raise ValueError(f"{path}: trailing bytes after tensors")
    return EncoderParams(config, tensors, seed)
