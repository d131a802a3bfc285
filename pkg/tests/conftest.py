import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from adversary import generate_stream  # noqa: E402
from oracle import exact_oracle  # noqa: E402
from rand_core import Seed  # noqa: E402


@pytest.fixture
def master_seed():
    return Seed(0x5EED)


@pytest.fixture
def zipf_stream(master_seed):
    def build(n=200, m=2000, s=1.1, seed=None):
        return generate_stream("zipf", n, m, seed or master_seed, s=s)

    return build


@pytest.fixture
def exact_oracle_factory():
    return exact_oracle


@pytest.fixture(autouse=True)
def _practical_constants(monkeypatch):
    monkeypatch.delenv("SKETCH_CONSTANTS", raising=False)
