import numpy as np
import pytest

from tsjepa.config import ExperimentConfig
from tsjepa.pipeline import fit_actor, make_datasets, quick_config, with_stats
from tsjepa.actor import train_supervised_baseline
from tsjepa.jepa import train_jepa
from tsjepa.plant import design_controller, PlantParams
from tsjepa.seeding import child_rng
from tsjepa.sim import Models


@pytest.fixture(scope="session")
def params():
    return PlantParams()


@pytest.fixture(scope="session")
def gains(params):
    return design_controller(params)


@pytest.fixture(scope="session")
def tiny():
    """Seconds-scale trained stack shared by the integration tests."""
    cfg = quick_config(ExperimentConfig())
    data = make_datasets(cfg, 0)
    train = data["train"]
    res = train_jepa(train, cfg.jepa, child_rng(0, "train"), cfg.augment)
    actor, _ = fit_actor(cfg, res.model, with_stats(data["actor"], train), 0)
    sup, _ = train_supervised_baseline(train, cfg.supervised_kappa, cfg.supervised, child_rng(0, "supervised"),
                                       cfg.augment, cfg.jepa.frame_hw)
    models = Models(cfg.plant, design_controller(cfg.plant), cfg.render, cfg.augment, res.model, actor, sup)
    return {"cfg": cfg, "data": data, "result": res, "models": models}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from report import INFO, LINES
    if not LINES and not INFO:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(LINES):
        terminalreporter.write_line(LINES[n])
    for line in INFO:
        terminalreporter.write_line("info  " + line)
