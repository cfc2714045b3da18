import time

import numpy as np
import pytest

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
# wall-clock seconds spent in the shared training fixtures
FIXTURE_SECONDS: dict[str, float] = {}

SEEDS = (0, 1, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class _Timer:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        FIXTURE_SECONDS[self.name] = time.perf_counter() - self.start


# -- shared desk-scale training (toy motion task, 4,000 train / 1,000 eval) ------------

@pytest.fixture(scope="session")
def toy_data():
    from fewbit.train import make_data

    return make_data(0, n_train=4000, n_eval=1000)


@pytest.fixture(scope="session")
def base_config():
    from fewbit.train import TrainConfig

    return TrainConfig(seed=0, n_bits=10, epochs=3)


@pytest.fixture(scope="session")
def motion_sweep(toy_data, base_config):
    """FeatComp-N for every sweep level plus the Floats and Q-only baselines, 3 seeds."""
    from fewbit.train import bit_sweep

    with _Timer("motion_sweep"):
        return bit_sweep(base_config, toy_data, "motion", seeds=SEEDS, keep_models=True)


@pytest.fixture(scope="session")
def ablation_runs(toy_data, base_config, motion_sweep):
    """R-only (on each seed's Floats extractor) and FeatComp+R at N=10."""
    from fewbit.train import train_r_only, train_task_plus_r

    runs = {"r_only": [], "task_plus_r": []}
    with _Timer("ablation"):
        for s in SEEDS:
            cfg = base_config.replace(seed=s, n_bits=10)
            backbone = motion_sweep.run("floats", None, s).model
            runs["r_only"].append(train_r_only(cfg, toy_data, "motion", backbone=backbone))
            runs["task_plus_r"].append(train_task_plus_r(cfg, toy_data, "motion"))
    return runs


@pytest.fixture(scope="session")
def transfer_runs(toy_data, base_config, motion_sweep):
    """2x2 code-transfer matrix at N=10 (seed 0) and the shape-task baselines."""
    from fewbit.train import train_q_only, train_task, transfer_matrix

    with _Timer("transfer"):
        cfg = base_config.replace(seed=0, n_bits=10)
        shape_run = train_task(cfg, toy_data, "shape")
        sources = {"motion": motion_sweep.run("task", 10, 0).model, "shape": shape_run.model}
        matrix, report = transfer_matrix(cfg, toy_data, ("motion", "shape"), sources=sources)
        q_only = {"motion": motion_sweep.run("q_only", None, 0).accuracy,
                  "shape": train_q_only(cfg, toy_data, "shape").accuracy}
    own = {"motion": motion_sweep.run("task", 10, 0).accuracy, "shape": shape_run.accuracy}
    return {"matrix": matrix, "report": report, "q_only": q_only, "own": own}
