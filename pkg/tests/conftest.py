import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deep_ucsl.data import SynthConfig, gen_synthetic
from deep_ucsl.nn import ModelParams

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], print_blob=True
)
settings.load_profile("default")


def random_q(rng, n, k):
    q = rng.uniform(0.05, 1.0, size=(n, k))
    return q / q.sum(axis=1, keepdims=True)


def random_labels(rng, n):
    return rng.choice((-1, 1), size=n)


def manual_params(encoder, expert, cluster, activation="relu"):
    f = lambda a: np.asarray(a, dtype=np.float64)
    return ModelParams(
        [(f(w), f(b)) for w, b in encoder],
        (f(expert[0]), f(expert[1])),
        (f(cluster[0]), f(cluster[1])),
        activation,
    )


@pytest.fixture(scope="session")
def small_benchmark():
    """Mild-nuisance generator where the subgroup signal is learnable quickly."""
    cfg = SynthConfig(n_pos=120, n_neg=120, k=2, nuisance_scale=0.5, seed=3)
    return gen_synthetic(cfg, stream=1), gen_synthetic(cfg, stream=2)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
