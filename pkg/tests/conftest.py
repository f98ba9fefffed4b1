import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from fgadialog.config import RunConfig  # noqa: E402
from fgadialog.harness.synthetic import SyntheticSpec, generate_synthetic, suggested_config  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def small_config(**kw) -> RunConfig:
    """Tiny float64 model with deterministic layers."""
    base = dict(vocab_size=12, n_question=5, n_caption=4, n_history=3, n_answer_tokens=3,
                history_rounds=1, n_answers=6, n_regions=6, d_embed=4, d_question=6,
                d_caption=5, d_history=4, d_answer=6, d_image=8, d_round=3,
                dropout_image=0.0, dropout_local=0.0, dropout_fusion=0.0, batch_size=3,
                dtype="float64")
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_spec():
    return SyntheticSpec()


@pytest.fixture(scope="session")
def synth_data(synth_spec):
    """(config, train records, val records) for the default answer task."""
    cfg = suggested_config(synth_spec)
    train = generate_synthetic(synth_spec, 1)
    val = generate_synthetic(SyntheticSpec(count=50), 2)
    return cfg, train.records(cfg), val.records(cfg)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
