import numpy as np
import pytest

from mpbt import ModelParams

FIG1_LAM = (0.1, 0.5)
FIG1_S = ((0.0, 0.1), (0.2, 0.0))


@pytest.fixture
def fig1():
    return ModelParams.from_rates(FIG1_LAM, FIG1_S)


def random_params(rng, m, lam_range=(0.05, 2.0), s_range=(0.01, 1.0)):
    """Log-uniform rates; a random pi so pi handling is exercised too."""
    lam = np.exp(rng.uniform(*np.log(lam_range), size=m))
    s = np.exp(rng.uniform(*np.log(s_range), size=(m, m)))
    np.fill_diagonal(s, 0.0)
    pi = rng.dirichlet(np.ones(m))
    return ModelParams.from_rates(lam, s if m > 1 else None, pi)


def random_params_list(seed, n, ms=(1, 2, 3, 5)):
    rng = np.random.default_rng(seed)
    return [random_params(rng, ms[k % len(ms)]) for k in range(n)]


_SINGLE_TREE_CACHE: dict = {}


def single_tree_reports(T, seeds=range(20), n_starts=20):
    """Recovery reports from one all-eligible tree per seed; cached across
    test modules since each depth takes minutes.  A tree with no eligible
    triple yields ``None``."""
    from mpbt.gdist import ExtractionMode
    from mpbt.identify import FitError, SimulatedTrees, recovery_experiment

    key = (T, tuple(seeds), n_starts)
    if key not in _SINGLE_TREE_CACHE:
        truth = ModelParams.from_rates(FIG1_LAM, FIG1_S)
        source = SimulatedTrees(T=T, mode=ExtractionMode.ALL_ELIGIBLE)
        reports = []
        for seed in seeds:
            try:
                reports.append(recovery_experiment(truth, None, source, n_starts, seed))
            except FitError:
                reports.append(None)
        _SINGLE_TREE_CACHE[key] = reports
    return _SINGLE_TREE_CACHE[key]


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    lines = test_acceptance.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
