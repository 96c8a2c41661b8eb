"""Contrastive self-supervision and few-shot heads for holographic particle images."""

from .encoder import EmbeddingBatch, EncoderConfig, EncoderParams, backward, forward, init_params, supervised_pretrain
from .evaluation import EvalReport, balanced_accuracy, confusion, shift_comparison, sweep_k
from .fewshot import (Episode, LabelledEmbeddings, LinearHead, PrototypeHead, fit_linear, fit_prototypes, predict,
                      sample_episode)
from .imaging import (AugmentPolicy, DatasetRecord, ParticleImage, SyntheticSpec, augment, generate_synthetic,
                      load_image, make_view_pair)
from .ssl import ContrastiveBatch, SslConfig, build_contrastive_batch, nt_xent_loss, simclr_refine

__version__ = "0.1.0"
