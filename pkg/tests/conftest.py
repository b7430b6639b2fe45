from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

torch.set_num_threads(1)

# lines appended by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def demo_assets(tmp_path_factory):
    from hasanet import corpus
    root = tmp_path_factory.mktemp("assets")
    return corpus.synthesize_assets(root, {"validation": 6, "test": 4}, seed=3, duration=(0.5, 0.7), n_rirs=4)


def stub_assets(root: Path, subsets: dict, n_rirs: int = 3):
    """Asset set of empty placeholder files: enough for planning, not for rendering."""
    from hasanet.corpus import AssetSet, CleanItem, RirItem
    clean = []
    for subset, n in subsets.items():
        d = root / "clean" / subset
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            p = d / f"{subset}_{i:05d}.wav"
            p.touch()
            clean.append(CleanItem(p.stem, str(p.relative_to(root)), subset))
    (root / "noise").mkdir(exist_ok=True)
    (root / "noise" / "n.wav").touch()
    (root / "rir").mkdir(exist_ok=True)
    rirs = []
    for j in range(n_rirs):
        (root / "rir" / f"r{j}.wav").touch()
        rirs.append(RirItem(f"r{j}", f"rir/r{j}.wav"))
    return AssetSet(root, clean, ["noise/n.wav"], rirs)
