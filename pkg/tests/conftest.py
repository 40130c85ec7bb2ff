import numpy as np
import pytest
import torch

from gendistill.pyramid import FeaturePyramid

torch.set_num_threads(1)


def make_pyramid(arrays: dict, resolution=(16, 16), requires_grad=False) -> FeaturePyramid:
    levels = {
        l: torch.tensor(np.asarray(a), dtype=torch.float64, requires_grad=requires_grad) for l, a in arrays.items()
    }
    return FeaturePyramid(levels, resolution)


def random_levels(rng: np.random.Generator, batch=2, channels=(3, 4), levels=(2, 3), resolution=16):
    return {
        l: rng.standard_normal((batch, c, resolution // 2**l, resolution // 2**l))
        for l, c in zip(levels, channels)
    }


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            name = nodeid.split("::")[-1]
            number = int(name.split("_")[2])
            detail = dict(getattr(rep, "user_properties", [])).get("detail", "")
            lines.append((number, f"criterion {number}: {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
