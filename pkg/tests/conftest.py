import time
from dataclasses import dataclass

import numpy as np
import pytest

from holossl.config import ExperimentConfig
from holossl.encoder import EncoderConfig, EncoderParams
from holossl.imaging import ParticleImage, SyntheticSpec, generate_synthetic
from holossl.pipeline import pretrain_generic, refine

# Small network used for finite-difference checks (well under 10k parameters).
TINY = EncoderConfig(conv_blocks=((4, 3, 2), (8, 3, 2)), feature_dim=8, proj_dim=4, input_size=64)

# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: dict[int, str] = {}


def random_images(n, seed=0):
    rng = np.random.default_rng(seed)
    return [ParticleImage(rng.uniform(0.2, 0.9, size=(200, 200))) for _ in range(n)]


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def three_class_data():
    spec = SyntheticSpec(n_classes=3, per_class_count=60, test_fraction=0.3)
    return generate_synthetic(spec, seed=11)


@dataclass
class Benchmark:
    cfg: ExperimentConfig
    data: list
    generic: EncoderParams
    refined: EncoderParams
    pretrain_losses: list
    ssl_losses: list
    train_seconds: float

    @property
    def labelled(self):
        return [(img, rec) for img, rec in self.data if rec.split != "unlabelled"]


@pytest.fixture(scope="session")
def benchmark():
    """Default experiment: synthetic data, generic pre-training, contrastive refinement.

    Trained once per session and shared by the SSL integration tests and the
    acceptance module.
    """
    cfg = ExperimentConfig(seed=0)
    t0 = time.perf_counter()
    data = generate_synthetic(cfg.synthetic_spec(), cfg.seed)
    unlabelled = [img for img, rec in data if rec.split == "unlabelled"]
    pre, ssl = [], []
    generic = pretrain_generic(cfg, lambda e, loss: pre.append(loss))
    refined = refine(generic, unlabelled, cfg, lambda e, loss, wall: ssl.append(loss))
    return Benchmark(cfg, data, generic, refined, pre, ssl, time.perf_counter() - t0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
