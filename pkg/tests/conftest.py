import pytest
import torch

from moc.config import ExperimentConfig


def tiny_config(**over) -> ExperimentConfig:
    """A configuration small enough for a few outer episodes in a unit test."""
    base = dict(
        n_envs=2, n_steps=64, T_inner=64, T_outer=2, minibatch=32, n_epochs=2, buffer_size=5000,
        critic_updates=2, outer_batch=16, hyper_hidden=8, hyper_z=3, base_hidden=4, mem_rows=4, mem_cols=6,
        policy_hidden=(16,), q_hidden=(16,), max_steps=20, visitation_bins=10,
    )
    base.update(over)
    return ExperimentConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str, seconds: float) -> None:
    ACCEPTANCE_LINES.append(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail} [{seconds:.1f}s]")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
