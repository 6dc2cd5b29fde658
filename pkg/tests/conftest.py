import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def small_synth():
    from medfuse.ehr_data import GenConfig, synth_generate

    return synth_generate(GenConfig(n_samples=400, n_items=12, n_labels=4, d_text=8), 3)


@pytest.fixture(scope="session")
def small_mltm(small_synth):
    """A quickly pretrained lab model over ``small_synth``."""
    from medfuse.mltm import MltmConfig, pretrain_dataset

    cfg = MltmConfig(n_items=12, d_model=16, encoder_depth=2, decoder_depth=1, heads=2, epochs=2, batch_size=64)
    ck, _ = pretrain_dataset(small_synth.dataset, cfg, seed=0)
    return ck


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}
N_CRITERIA = 11


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = f"#{number:<2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        assert passed, ACCEPTANCE[number]

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(ACCEPTANCE.get(n, f"#{n:<2} ----  not run, or stopped before reporting"))
