import pytest

from ufm_model import ProblemSpec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance trainings")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_spec(K=3, counts=None, widths=(4,), lam=5e-3, lambda_h=None, loss="mse", bias="none", lambda_b=0.0):
    counts = counts or (2,) * K
    return ProblemSpec(
        K=K,
        class_counts=tuple(counts),
        widths=tuple(widths),
        lambda_w=(lam,) * len(widths),
        lambda_h=lam if lambda_h is None else lambda_h,
        loss=loss,
        bias_mode=bias,
        lambda_b=lambda_b,
    )


@pytest.fixture
def small_spec():
    return make_spec(K=3, counts=(2, 2, 2), widths=(4, 4, 4))


@pytest.fixture
def balanced_deep():
    return make_spec(K=4, counts=(5,) * 4, widths=(6, 6, 6), lam=1e-2)


@pytest.fixture
def imbalanced_deep():
    return make_spec(K=4, counts=(8, 4, 2, 2), widths=(6, 6), lam=1e-2)
