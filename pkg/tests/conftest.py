import pytest
import torch

from hmkg.slide_geometry import Cohort
from tests.unit.helpers import build_tiny_cohort


@pytest.fixture(autouse=True)
def reset_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_cohort() -> Cohort:
    return build_tiny_cohort(size=8, seed=7)


@pytest.fixture
def tiny_cohort_dir(tmp_path) -> str:
    out_dir = str(tmp_path / "cohort")
    build_tiny_cohort(size=8, seed=7, out_dir=out_dir)
    return out_dir
