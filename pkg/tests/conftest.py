# tests/conftest.py
import sys
from pathlib import Path

import numpy as np
import pytest

# 和 scripts/ 里的模块一样按名字导入
sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end training runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
