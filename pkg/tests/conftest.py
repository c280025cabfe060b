import datetime as dt
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pair():
    """A tiny source/target pair shared by data-level tests."""
    from calfront.synthgen import PairLayout, SceneSpec, TARGET_TEXTURE, generate_domain_pair

    src = SceneSpec(height=32, width=32, speckle=0.15)
    tgt = SceneSpec(height=32, width=32, texture=TARGET_TEXTURE, speckle=0.15)
    layout = PairLayout(n_source=2, n_target_train=2, n_val=1, n_test=1, melange_widths=(4, 6))
    return generate_domain_pair(src, tgt, layout, seed=3)


class Dated:
    """Minimal dated item for composer tests."""

    def __init__(self, date: dt.date, name: str = ""):
        self.date = date
        self.name = name or date.isoformat()

    def __repr__(self):
        return f"Dated({self.name})"
