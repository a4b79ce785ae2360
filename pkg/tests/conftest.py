import numpy as np
import pytest
from hypothesis import settings

from dcdc.chains import build_chain, quad_sgd_1d, regulated_walk, tandem_fluid
from dcdc.net import NetSpec, ValueNet

settings.register_profile("dcdc", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("dcdc")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def logistic_chain():
    return build_chain("logistic", {}, seed=0)


@pytest.fixture(scope="session")
def all_chains(logistic_chain):
    return {
        "quad1d": quad_sgd_1d(),
        "logistic": logistic_chain,
        "tandem": tandem_fluid(),
        "walk": regulated_walk(),
    }


def small_net(chain, widths=(8,), seed=0):
    spec = NetSpec(chain.domain.dim, widths, input_lower=chain.domain.lower, input_upper=chain.domain.upper)
    return ValueNet.init(spec, np.random.default_rng(seed))


_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def record_criterion(request):
    """Record ``(passed, detail)`` for an acceptance criterion; summarised at the end of the session."""
    results = request.config.stash[_CRITERIA]

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        results[number] = (title, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {title}  [{detail}]")
