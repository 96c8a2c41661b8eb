"""Episode sampling and the two few-shot heads on frozen embeddings.

Labels inside episodes and heads are integer indices into an ordered taxa
list; :func:`predict` maps them back to taxon names.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import Reader, atomic_write_bytes

HEAD_MAGIC = b"BHEAD1"


@dataclass
class LabelledEmbeddings:
    """Embedding rows with their record ids and taxon labels."""

    ids: list[str]
    vectors: np.ndarray
    taxa: list[str]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.ids) != len(self.vectors) or len(self.taxa) != len(self.ids):
            raise ValueError("ids, vectors and taxa must have matching lengths")

    def __len__(self):
        return len(self.ids)

    def taxon_order(self) -> list[str]:
        return sorted(set(self.taxa))


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    support_ids: list[str]
    query_x: np.ndarray
    query_y: np.ndarray
    query_ids: list[str]
    taxa: list[str]
    k: int
    draw_seed: int


@dataclass
class LinearHead:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    taxa: list[str]
    normalize: bool = False

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class PrototypeHead:
    prototypes: np.ndarray  # (C, D), unit rows
    scale: float
    taxa: list[str]

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("prototype scale must be positive")

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]


def sample_episode(data: LabelledEmbeddings, k: int, seed: int, taxa: Sequence[str] | None = None) -> Episode:
    """Stratified draw of ``k`` support items per taxon; everything else is query."""
    if k < 1:
        raise ValueError("k must be >= 1")
    taxa = list(taxa) if taxa is not None else data.taxon_order()
    labels = np.asarray(data.taxa)
    rng = np.random.default_rng(seed)
    sup, qry = [], []
    for t in taxa:
        idx = np.flatnonzero(labels == t)
        if len(idx) < k + 1:
            raise ValueError(
                f"insufficient query remainder: taxon {t!r} has {len(idx)} items, needs at least {k + 1}"
            )
        perm = rng.permutation(len(idx))
        sup.append(idx[perm[:k]])
        qry.append(np.sort(idx[perm[k:]]))
    sup_idx = np.concatenate(sup)
    qry_idx = np.concatenate(qry)
    lookup = {t: i for i, t in enumerate(taxa)}
    y = np.array([lookup.get(t, -1) for t in data.taxa])
    return Episode(
        support_x=data.vectors[sup_idx],
        support_y=y[sup_idx],
        support_ids=[data.ids[i] for i in sup_idx],
        query_x=data.vectors[qry_idx],
        query_y=y[qry_idx],
        query_ids=[data.ids[i] for i in qry_idx],
        taxa=taxa,
        k=k,
        draw_seed=seed,
    )


# ---------------------------------------------------------------------------
# one-vs-all logistic regression


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def logistic_objective(weights: np.ndarray, bias: np.ndarray, x: np.ndarray, targets: np.ndarray, l2: float):
    """Per-taxon regularised binary cross-entropy and its gradients.

    ``weights`` is (D, C), ``targets`` a (N, C) 0/1 matrix. Returns the (C,)
    objective vector and gradients w.r.t. weights and bias. The bias is not
    regularised.
    """
    s = x @ weights + bias
    n = x.shape[0]
    obj = (np.logaddexp(0.0, s) - targets * s).sum(axis=0) / n + 0.5 * l2 * (weights**2).sum(axis=0)
    ds = (0.5 * (1.0 + np.tanh(0.5 * s)) - targets) / n
    return obj, x.T @ ds + l2 * weights, ds.sum(axis=0)


def fit_linear(
    x: np.ndarray,
    y: np.ndarray,
    taxa: Sequence[str],
    l2: float = 1e-3,
    max_iter: int = 1000,
    tol: float = 1e-5,
    normalize: bool = False,
    trace: list | None = None,
) -> LinearHead:
    """One binary classifier per taxon by full-batch gradient descent with backtracking.

    The C problems are independent and are solved side by side, each with its
    own step size. The step is doubled after an accepted step and halved until
    the Armijo condition holds. If ``trace`` is given, the (C,) objective
    vector is appended after every iteration.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n_taxa = len(taxa)
    if n_taxa < 2:
        raise ValueError("one-vs-all logistic regression needs at least two taxa")
    if not np.isfinite(x).all():
        raise ValueError("embeddings must be finite")
    if normalize:
        x = _unit_rows(x)
    targets = (y[:, None] == np.arange(n_taxa)[None]).astype(np.float64)
    d = x.shape[1]
    w = np.zeros((d, n_taxa))
    b = np.zeros(n_taxa)
    step = np.ones(n_taxa)
    obj, gw, gb = logistic_objective(w, b, x, targets, l2)
    if trace is not None:
        trace.append(obj.copy())
    for _ in range(max_iter):
        gnorm2 = (gw**2).sum(axis=0) + gb**2
        active = np.sqrt(gnorm2) >= tol
        if not active.any():
            break
        todo = active.copy()
        for _ in range(60):
            eta = np.where(todo, step, 0.0)
            w_new = w - eta * gw
            b_new = b - eta * gb
            obj_new, gw_new, gb_new = logistic_objective(w_new, b_new, x, targets, l2)
            ok = todo & (obj_new <= obj - 0.5 * eta * gnorm2)
            w[:, ok], b[ok] = w_new[:, ok], b_new[ok]
            obj[ok], gw[:, ok], gb[ok] = obj_new[ok], gw_new[:, ok], gb_new[ok]
            step[ok] *= 2.0
            todo &= ~ok
            if not todo.any():
                break
            step[todo] *= 0.5
        if trace is not None:
            trace.append(obj.copy())
    return LinearHead(w.T.copy(), b, list(taxa), normalize)


# ---------------------------------------------------------------------------
# cosine prototypes


def prototype_objective(prototypes: np.ndarray, x_unit: np.ndarray, y: np.ndarray, scale: float):
    """Cross-entropy of softmax(scale * cosine) and its gradient w.r.t. raw prototypes."""
    norms = np.linalg.norm(prototypes, axis=1, keepdims=True)
    p = prototypes / norms
    logits = scale * (x_unit @ p.T)
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = len(y)
    loss = float(-logp[np.arange(n), y].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dp = scale * (dlogits.T @ x_unit) / n
    dproto = (dp - p * (p * dp).sum(axis=1, keepdims=True)) / norms
    return loss, dproto


def fit_prototypes(
    x: np.ndarray,
    y: np.ndarray,
    taxa: Sequence[str],
    scale: float = 10.0,
    epochs: int = 100,
    lr: float = 0.1,
    trace: list | None = None,
) -> PrototypeHead:
    """Learn one unit-norm prototype per taxon on L2-normalised embeddings.

    Prototypes start at the normalised class means and are re-normalised after
    every gradient step.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n_taxa = len(taxa)
    if n_taxa < 2:
        raise ValueError("prototype learning needs at least two taxa")
    if not np.isfinite(x).all():
        raise ValueError("embeddings must be finite")
    xu = _unit_rows(x)
    protos = np.zeros((n_taxa, x.shape[1]))
    for c in range(n_taxa):
        m = xu[y == c].sum(axis=0)
        norm = np.linalg.norm(m)
        if norm <= 1e-12:
            raise ValueError(f"support embeddings of taxon {taxa[c]!r} sum to zero; prototype undefined")
        protos[c] = m / norm
    for _ in range(epochs):
        loss, grad = prototype_objective(protos, xu, y, scale)
        if trace is not None:
            trace.append(loss)
        protos = protos - lr * grad
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return PrototypeHead(protos, float(scale), list(taxa))


def head_scores(head: LinearHead | PrototypeHead, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.feature_dim:
        raise ValueError(f"embedding width {x.shape[-1]} does not match head width {head.feature_dim}")
    if isinstance(head, LinearHead):
        if head.normalize:
            x = _unit_rows(x)
        return x @ head.weights.T + head.bias
    return head.scale * (_unit_rows(x) @ head.prototypes.T)


def predict(head: LinearHead | PrototypeHead, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Taxon labels and the (N, C) score matrix; ties go to the earlier taxon."""
    scores = head_scores(head, x)
    return np.asarray(head.taxa, dtype=object)[scores.argmax(axis=1)], scores


# ---------------------------------------------------------------------------
# serialisation


def head_bytes(head: LinearHead | PrototypeHead) -> bytes:
    if isinstance(head, LinearHead):
        meta = {"kind": "linear", "taxa": head.taxa, "normalize": head.normalize, "dim": head.feature_dim}
        arrays = [head.weights, head.bias]
    else:
        meta = {"kind": "prototype", "taxa": head.taxa, "scale": head.scale, "dim": head.feature_dim}
        arrays = [head.prototypes]
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return HEAD_MAGIC + struct.pack("<I", len(raw)) + raw + b"".join(a.astype("<f4").tobytes() for a in arrays)


def save_head(head: LinearHead | PrototypeHead, path: str | Path) -> None:
    atomic_write_bytes(path, head_bytes(head))


def load_head(path: str | Path) -> LinearHead | PrototypeHead:
    r = Reader(Path(path).read_bytes(), str(path))
    if r.take(len(HEAD_MAGIC)) != HEAD_MAGIC:
        raise ValueError(f"{path}: not a head file (bad magic)")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    c, d = len(meta["taxa"]), meta["dim"]

    def tensor(*shape):
        return np.frombuffer(r.take(4 * int(np.prod(shape))), dtype="<f4").astype(np.float64).reshape(shape)

    if meta["kind"] == "linear":
        head = LinearHead(tensor(c, d), tensor(c), meta["taxa"], meta["normalize"])
    elif meta["kind"] == "prototype":
        head = PrototypeHead(tensor(c, d), meta["scale"], meta["taxa"])
    else:
        raise ValueError(f"{path}: unknown head kind {meta['kind']!r}")
    if not r.at_end():
        raise ValueError(f"{path}: trailing bytes")
    return head
