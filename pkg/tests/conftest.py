import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mobidiary.datakit import GenSpec, gen_samples  # noqa: E402
from mobidiary.model import CaptionModel, ModelConfig  # noqa: E402
from mobidiary.sensor_encoder import EncoderConfig, PatchConfig  # noqa: E402
from mobidiary.text import build_vocab  # noqa: E402

# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")


def tiny_config(D=2, C=6, dtype="float64", **enc) -> ModelConfig:
    kw = dict(D=D, C=C, num_placements=6, patch=PatchConfig(4, 4), d_model=16, n_heads=2,
              n_sa_layers=1, ffn_width=24, n_convffn_blocks=1, dw_kernel=3)
    kw.update(enc)
    return ModelConfig(encoder=EncoderConfig(**kw), n_text_layers=1, t_max=12, dtype=dtype)


@pytest.fixture(scope="session")
def small_samples():
    """Twelve short IMU clips restricted to two devices."""
    spec = GenSpec(n_samples=12, seed=3, rate_hz=30.0, actions_per_sample=(1, 3), action_duration_s=(1.0, 1.5),
                   patch_length=4)
    from mobidiary.datakit import select_devices

    return select_devices(gen_samples(spec), [0, 4])


@pytest.fixture(scope="session")
def small_vocab(small_samples):
    return build_vocab(s.caption for s in small_samples)


@pytest.fixture
def tiny_model(small_vocab):
    return CaptionModel.create(tiny_config(), small_vocab, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
