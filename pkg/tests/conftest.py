import numpy as np
import pytest

from ltdistill.config import from_dict
from ltdistill.model import init_mlp
from ltdistill.numcore import RngStream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_net():
    return init_mlp((4, 6, 3), "tanh", RngStream(3))


def tiny_config(**overrides):
    """A config small enough for a few-second pipeline run."""
    raw = {
        "data": {"num_classes": 4, "dim": 4, "base_count": 120, "imbalance_factor": 20.0,
                 "test_per_class": 50},
        "teacher": {"epochs": 10},
        "distill": {"ipc": 3, "steps": 20},
        "relabel": {"epochs": 2},
        "eval": {"net": {"epochs": 20}},
        "perturb": {"total_budget": 200, "num_varied": 1, "sweep": [10, 40]},
        "bound": {"num_dd": 10},
        "seeds": [0],
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            raw.setdefault(section, {}).update(values)
        else:
            raw[section] = values
    return from_dict(raw)


ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
