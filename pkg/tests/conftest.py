import numpy as np
import pytest
import torch

from uttdistill.corpus import synthesize_corpus, load_manifest


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """40 utterances, 4 classes, 4 speakers."""
    out = tmp_path_factory.mktemp("corpus40")
    return synthesize_corpus(40, 4, 4, seed=7, out_dir=out)


@pytest.fixture(scope="session")
def small_records(small_corpus):
    return load_manifest(small_corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def samples_for_frames(n_frames: int) -> int:
    """Smallest input length giving ``n_frames`` with the default extractor."""
    n = n_frames
    for k, s in reversed(list(zip((10, 3, 3, 3, 3, 2, 2), (5, 2, 2, 2, 2, 2, 2)))):
        n = (n - 1) * s + k
    return n


@pytest.fixture
def short_wave():
    g = torch.Generator().manual_seed(0)
    return 0.5 * torch.randn(samples_for_frames(8), generator=g, dtype=torch.float64)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, with the detail each test recorded."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            number = int(nodeid.split("test_criterion_")[1].split("_")[0])
            detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
            lines.append((number, f"criterion {number}: {'PASS' if outcome == 'passed' else 'FAIL'}"
                                  + (f" ({detail})" if detail else "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
