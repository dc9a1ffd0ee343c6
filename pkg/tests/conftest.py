import numpy as np
import pytest

from mssenet.data import SyntheticSpec, generate_synthetic_corpus, load_features, load_manifest

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, title: str, passed: bool, detail: str = "") -> None:
    """Remember one acceptance verdict; printed in the terminal summary."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:2d}: {title}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _corpus(root, clips_per_class, seed):
    manifest_path = generate_synthetic_corpus(
        SyntheticSpec(n_classes=6, clips_per_class=clips_per_class, seed=seed), root)
    manifest = load_manifest(manifest_path)
    return manifest_path, manifest, load_features(manifest)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """60 clips, 6 classes: (manifest path, manifest, features)."""
    return _corpus(tmp_path_factory.mktemp("corpus60"), 10, 0)


@pytest.fixture(scope="session")
def cv_corpus(tmp_path_factory):
    return _corpus(tmp_path_factory.mktemp("corpus300"), 50, 11)
