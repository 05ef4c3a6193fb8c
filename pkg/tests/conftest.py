import numpy as np
import pytest

from hybridvmr.synthdata import reset_label_audit


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _clean_label_audit():
    """Each test observes only its own ground-truth label accesses."""
    reset_label_audit()
    yield
    reset_label_audit()
