import numpy as np
import pytest
import torch

from diffvoc.noise_model import NetworkConfig, init_params

torch.set_num_threads(1)

# (criterion id, passed, detail) collected by the acceptance suite
CRITERIA: list[tuple[str, bool, str]] = []
INFO: list[str] = []


def record_criterion(cid: str, passed: bool, detail: str) -> None:
    CRITERIA.append((cid, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {cid}: {detail}")


def record_info(text: str) -> None:
    INFO.append(text)
    print(f"[INFO] {text}")


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {cid}  {detail}")
    for text in INFO:
        terminalreporter.write_line(f"INFO  {text}")


@pytest.fixture(scope="session")
def desk_net():
    return NetworkConfig.desk()


@pytest.fixture
def predictor(desk_net):
    model = init_params(desk_net, seed=7)
    # larger output scale so gradients are not dominated by the skip path
    with torch.no_grad():
        model.out.weight.mul_(10.0)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
