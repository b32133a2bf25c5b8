from pathlib import Path

import numpy as np
import pytest
from PIL import Image

FIXTURES = Path(__file__).parent / "fixtures"


def save_gray(path, array):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="L").save(path)
    return path


@pytest.fixture
def mirror_dir():
    return FIXTURES / "ddsm_mirror"


@pytest.fixture
def archive(tmp_path):
    """A small Mini-DDSM-style archive: Status/<case>/<case>.<SIDE>_<VIEW>.png + sidecars."""
    rng = np.random.default_rng(11)
    root = tmp_path / "archive"
    ages = {"Normal": [45, 52, 61, 70], "Cancer": [55, 63, 68, 74, 80], "Benign": [41, 49, 58]}
    prefix = {"Normal": "A", "Cancer": "C", "Benign": "B"}
    for status, status_ages in ages.items():
        for i, age in enumerate(status_ages):
            case = f"{prefix[status]}_{i + 1:04d}_1"
            for view in ("LEFT_CC", "RIGHT_MLO"):
                h, w = rng.integers(125, 321, size=2)
                # brightness tracks age so baseline features carry signal
                img = np.clip(rng.normal(age * 2.5, 20, (h, w)), 0, 255)
                p = save_gray(root / status / case / f"{case}.{view}.png", img)
                p.with_name(p.name + ".json").write_text(f'{{"age": {age}}}')
    return root


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
