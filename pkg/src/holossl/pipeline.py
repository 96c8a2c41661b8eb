"""Glue between the modules: pre-training, refinement, embedding, caches."""
from __future__ import annotations

from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .cache import EmbeddingCache
from .config import ExperimentConfig
from .encoder import EncoderParams, embed, init_params, supervised_pretrain
from .fewshot import LabelledEmbeddings
from .imaging import DatasetRecord, ParticleImage, generate_generic_corpus, load_image
from .ssl import simclr_refine

EvalSets = dict[tuple[str, str, str], LabelledEmbeddings]


def pretrain_generic(cfg: ExperimentConfig, on_epoch: Callable[[int, float], None] | None = None) -> EncoderParams:
    images, labels = generate_generic_corpus(cfg.generic_per_class, cfg.seed)
    params = init_params(cfg.encoder_config(), cfg.seed)
    return supervised_pretrain(params, images, labels, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.seed,
                               cfg.pretrain_batch, on_epoch=on_epoch)


def refine(params: EncoderParams, images: Sequence[ParticleImage], cfg: ExperimentConfig,
           on_epoch: Callable[[int, float, float], None] | None = None) -> EncoderParams:
    return simclr_refine(params, images, cfg.ssl_config(), on_epoch)


def build_caches(
    params: EncoderParams | None,
    items: Iterable[tuple[ParticleImage, DatasetRecord, str]],
    feature_source: str,
    digest: bytes,
) -> dict[str, EmbeddingCache]:
    """Embed labelled items into one cache per instrument.

    ``items`` yields (image, record, record_id); unlabelled records are skipped.
    """
    grouped: dict[str, list] = {}
    for img, rec, rid in items:
        if rec.split != "unlabelled":
            grouped.setdefault(rec.instrument, []).append((img, rec, rid))
    caches = {}
    for inst, rows in grouped.items():
        vectors = embed(params, [img for img, _, _ in rows])
        caches[inst] = EmbeddingCache(
            feature_source, digest, [rid for _, _, rid in rows], [inst] * len(rows),
            [r.taxon for _, r, _ in rows], [r.split for _, r, _ in rows], vectors,
        )
    return caches


def sets_from_caches(caches: Iterable[EmbeddingCache]) -> EvalSets:
    sets: EvalSets = {}
    for cache in caches:
        for inst in sorted(set(cache.instruments)):
            for split in ("train", "test"):
                idx = [i for i, (a, s) in enumerate(zip(cache.instruments, cache.splits)) if a == inst and s == split]
                if idx:
                    sets[(cache.feature_source, inst, split)] = LabelledEmbeddings(
                        [cache.ids[i] for i in idx], cache.vectors[idx].astype(np.float64), [cache.taxa[i] for i in idx]
                    )
    return sets


def embed_sets(encoders: dict[str, EncoderParams],
               data: Sequence[tuple[ParticleImage, DatasetRecord]]) -> EvalSets:
    """In-memory shortcut: embed labelled data for every named encoder."""
    caches = []
    for source, params in encoders.items():
        items = ((img, rec, rec.image_path) for img, rec in data)
        caches.extend(build_caches(params, items, source, bytes(32)).values())
    return sets_from_caches(caches)


def load_records(manifest: Path, records: Sequence[DatasetRecord]) -> list[ParticleImage]:
    base = Path(manifest).parent
    return [load_image(base / r.image_path) for r in records]
