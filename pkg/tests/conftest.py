import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from semcd.raster import L1  # noqa: E402
from semcd.validation import ImagePair  # noqa: E402


def make_pair(rng, size=32, channels=3, pair_id="p", n_classes=5, change_rate=0.1):
    """Random labelled pair whose change map agrees with its land cover maps."""
    lcm1 = rng.integers(1, n_classes + 1, size=(size, size)).astype(np.uint8)
    lcm2 = lcm1.copy()
    flip = rng.random((size, size)) < change_rate
    lcm2[flip] = (lcm1[flip] % n_classes) + 1
    img1 = rng.random((size, size, channels)).astype(np.float32)
    img2 = rng.random((size, size, channels)).astype(np.float32)
    change = (lcm1 != lcm2).astype(np.uint8)
    return ImagePair(img1, img2, lcm1, lcm2, change, pair_id=pair_id, nomenclature=L1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from semcd.synth import synth_generate

    root = tmp_path_factory.mktemp("tiny")
    return synth_generate(root, seed=3, n_pairs=6, size=64, change_density=0.1, n_test=2)


# Acceptance criteria report one line each; the lines are repeated in the
# terminal summary so they are visible without ``-s``.
ACCEPTANCE_RESULTS = {}


def record_acceptance(number, passed, detail=""):
    line = f"ACCEPTANCE criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
