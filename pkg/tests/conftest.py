from __future__ import annotations

import time

import numpy as np
import pytest

from statsmerging.checkpoint import ArchSpec, as_pretrained, init_checkpoint
from statsmerging.harness import run_experiment


def pytest_configure(config):
    config._acceptance = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, detail = results[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} -- {detail}")


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig._acceptance


@pytest.fixture(scope="session")
def default_run():
    """The committed default experiment: (report, outcomes, seconds)."""
    outcomes: dict = {}
    start = time.perf_counter()
    report = run_experiment(keep_outcomes=outcomes)
    return report, outcomes, time.perf_counter() - start


@pytest.fixture
def tiny_arch():
    return ArchSpec.mlp([3, 5, 4])


@pytest.fixture
def tiny_base(tiny_arch):
    return as_pretrained(init_checkpoint(tiny_arch, seed=11))


def perturbed(base, seed, scale=0.1, task_id=None):
    """A task-role checkpoint sharing ``base``'s fingerprint."""
    rng = np.random.default_rng(seed)
    params = [p + scale * rng.standard_normal(p.shape) for p in base.tensors()]
    return base.with_params(params, role="task", task_id=task_id)


def scalar_models(values, base_value=0.0):
    """Single-layer 1->1 identity-activation models with weight [[v]] and zero bias."""
    arch = ArchSpec.mlp([1, 1])
    base = as_pretrained(init_checkpoint(arch, 0, zero=True))
    base = base.with_params([np.array([[base_value]]), np.zeros((1, 1))])
    return base, [base.with_params([np.array([[v]]), np.zeros((1, 1))], role="task") for v in values]
