import numpy as np
import pytest
import torch

from balagan.data import SplitManifest

from synth import two_modality_dataset

ACCEPTANCE_RESULTS = []


def record_criterion(number: int, name: str, passed: bool, detail: str = ""):
    """Collect one acceptance-criterion verdict for the terminal summary."""
    ACCEPTANCE_RESULTS.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        verdict = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d} [{verdict}] {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _fixed_torch_threads():
    torch.set_num_threads(min(4, torch.get_num_threads()))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def shapes_dataset(tmp_path_factory):
    """Session-wide synthetic dataset: 64 two-style source + 16 target images."""
    root = tmp_path_factory.mktemp("shapes")
    source_ids, target_ids = two_modality_dataset(root, size=32, seed=7)
    manifest = SplitManifest(tuple(source_ids), tuple(target_ids), seed=7)
    manifest_path = root / "split.manifest"
    manifest.save(manifest_path)
    return {"root": root, "manifest": manifest, "manifest_path": manifest_path,
            "source_ids": source_ids, "target_ids": target_ids}
