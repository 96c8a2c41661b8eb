"""SimCLR-style contrastive refinement of an encoder."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .encoder import SGD, EncoderParams, _backward, _forward, prepare_inputs
from .imaging import AugmentPolicy, ParticleImage, make_view_pair


@dataclass
class ContrastiveBatch:
    """Projections ordered (a1, b1, a2, b2, ...): rows 2i and 2i+1 are a positive pair."""

    projections: np.ndarray
    temperature: float

    def __post_init__(self):
        z = self.projections
        if z.ndim != 2 or z.shape[0] % 2:
            raise ValueError("projections must be a 2-D matrix with an even row count")
        if z.shape[0] < 4:
            raise ValueError("contrastive loss needs N >= 2 pairs; with N < 2 there are no negatives")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not np.isfinite(z).all() or np.abs(np.linalg.norm(z, axis=1) - 1.0).max() > 1e-6:
            raise ValueError("projection rows must be finite and unit-norm")

    @property
    def n(self) -> int:
        return self.projections.shape[0] // 2


@dataclass
class SslConfig:
    batch_n: int = 64
    temperature: float = 0.5
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    seed: int = 0

    def __post_init__(self):
        if self.batch_n < 2:
            raise ValueError("batch_n must be >= 2")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def nt_xent(rows: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Loss and gradient for arbitrary non-zero rows; similarity is cosine.

    The gradient includes the row normalisation, so on unit rows it is the
    tangential part of the dot-product gradient.
    """
    m = rows.shape[0]
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    z = rows / norms
    logits = (z @ z.T) / temperature
    np.fill_diagonal(logits, -np.inf)
    pos = np.arange(m) ^ 1
    row_max = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - row_max)
    denom = expd.sum(axis=1, keepdims=True)
    lse = np.log(denom[:, 0]) + row_max[:, 0]
    loss = float(np.mean(lse - logits[np.arange(m), pos]))

    g = expd / denom
    g[np.arange(m), pos] -= 1.0
    g /= m
    dz = (g + g.T) @ z / temperature
    drows = (dz - z * (z * dz).sum(axis=1, keepdims=True)) / norms
    return loss, drows


def nt_xent_loss(batch: ContrastiveBatch) -> tuple[float, np.ndarray]:
    """Normalised temperature-scaled cross entropy averaged over all 2N anchors."""
    return nt_xent(batch.projections, batch.temperature)


def _view_inputs(images: Sequence[ParticleImage], policy: AugmentPolicy, seed: int, input_size: int) -> np.ndarray:
    seeds = np.random.SeedSequence(seed).generate_state(len(images), dtype=np.uint64)
    views = []
    for img, s in zip(images, seeds):
        views.extend(make_view_pair(img, policy, int(s)))
    return prepare_inputs(views, input_size)


def build_contrastive_batch(
    params: EncoderParams,
    images: Sequence[ParticleImage],
    policy: AugmentPolicy,
    temperature: float,
    seed: int,
) -> ContrastiveBatch:
    if len(images) < 2:
        raise ValueError("a contrastive batch needs at least 2 images")
    x = _view_inputs(images, policy, seed, params.config.input_size)
    z, _ = _forward(params, x, "projection")
    return ContrastiveBatch(z, temperature)


def simclr_refine(
    params: EncoderParams,
    images: Sequence[ParticleImage],
    config: SslConfig,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> EncoderParams:
    """Refine backbone and projection head with the contrastive objective.

    ``on_epoch(epoch, mean_loss, wall_seconds)`` is called after every epoch.
    Trailing items that would form a batch smaller than 2 are skipped.
    """
    if len(images) < 2 * config.batch_n:
        raise ValueError(f"need at least {2 * config.batch_n} unlabelled images, got {len(images)}")
    out = params.copy()
    if config.epochs <= 0:
        return out
    rng = np.random.default_rng([config.seed, 2])
    opt = SGD(config.lr, config.momentum)
    size = out.config.input_size
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), config.batch_n):
            idx = order[start:start + config.batch_n]
            if len(idx) < 2:
                continue
            x = _view_inputs([images[i] for i in idx], config.policy, int(rng.integers(2**63)), size)
            z, cache = _forward(out, x, "projection")
            loss, dz = nt_xent(z, config.temperature)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite contrastive loss at epoch {epoch}, step {start // config.batch_n}")
            opt.step(out.tensors, _backward(out, cache, dz, "projection"))
            losses.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(losses)), time.perf_counter() - t0)
    return out
