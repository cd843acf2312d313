import numpy as np
import pytest

from heartbeit.model import ModelConfig
from heartbeit.signal import MEASURED_LEADS, EcgRecord

# one PASS/FAIL line per acceptance criterion, printed after the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_record(rng, n=5000, record_id="r0", patient_id="p0", label=None, leads=MEASURED_LEADS):
    return EcgRecord(record_id, patient_id, 500, {k: rng.normal(0, 0.5, n) for k in leads}, label=label)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """2 layers, hidden 8, 2 heads over 4-px patches of 32x32 images (64 patches)."""
    return ModelConfig(layers=2, hidden=8, heads=2, patch_size=4, image_side=32, vocab_size=16)
