import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from robustnd import scm_data, trainer  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scm():
    return scm_data.ScmConfig(train_id=64, test_id=24, test_ood=24, aux_per_class=40, seed=0)


@pytest.fixture(scope="session")
def tiny_data(tiny_scm):
    return scm_data.generate_dataset(tiny_scm)


@pytest.fixture(scope="session")
def tiny_teacher_path(tiny_data, tmp_path_factory):
    """A briefly pretrained teacher; accuracy floor disabled, only the weights matter."""
    torch.set_num_threads(1)
    path = tmp_path_factory.mktemp("teacher") / "teacher.bin"
    trainer.pretrain_teacher(tiny_data.aux_pretrain, trainer.PretrainConfig(epochs=3, min_accuracy=0.0), path)
    return path


def random_image(rng, c=3, h=16, w=16):
    return rng.random((c, h, w)).astype(np.float32)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
