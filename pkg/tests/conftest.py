import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from propcredit.schedules import build_train_schedule  # noqa: E402
from propcredit.toybench.data import ring_dataset  # noqa: E402
from propcredit.toybench.pretrain import pretrain  # noqa: E402


@pytest.fixture(scope="session")
def ring():
    return ring_dataset()


@pytest.fixture(scope="session")
def base_diffusion(ring):
    return pretrain(ring, build_train_schedule(), seed=0)


@pytest.fixture(scope="session")
def base_flow(ring):
    return pretrain(ring, "flow", seed=0)


@pytest.fixture(scope="session")
def bases(base_diffusion, base_flow):
    return {"diffusion": base_diffusion, "flow": base_flow}
