import pytest

from mmfl.config import ExperimentConfig


def tiny_config(n_devices=4, features=4, epochs=2, **fl):
    """Seconds-scale config: few devices, small GRUs, short episodes."""
    c = ExperimentConfig()
    c.network.n_devices = n_devices
    c.data.n_features = features
    c.data.flows_per_device = 12
    c.data.test_flows = 40
    c.data.edge_flows = 10
    c.models.specs = [
        {"model_id": "small", "input_dim": features, "cell": "gru", "hidden_dim": 3, "output_dim": 1},
        {"model_id": "large", "input_dim": features, "cell": "gru", "hidden_dim": 5, "output_dim": 1},
    ]
    c.models.master = "large"
    c.attack = c.attack.__class__(compromised_min=1, compromised_max=min(2, n_devices))
    c.fl.epochs = epochs
    for k, v in fl.items():
        setattr(c.fl, k, v)
    c.episodes = 3
    c.repetitions = 1
    return c


@pytest.fixture
def tiny():
    return tiny_config()


ACCEPTANCE = []


def record_criterion(number, ok, detail):
    """Remember one acceptance outcome so the run ends with a per-criterion summary."""
    ACCEPTANCE.append((number, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
