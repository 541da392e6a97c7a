import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scmtf.data import CohortDataset, stratified_split
from scmtf.model import BiasTerms, ScmtfParams
from scmtf.classifier import init_classifier
from scmtf.tensor_core import FactorSet

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_factors(rng, I, J, K, S, r, low=0.0):
    return FactorSet(rng.uniform(0.5, 1.5, r), rng.uniform(low, 1, (I, r)), rng.uniform(low, 1, (J, r)),
                     rng.uniform(low, 1, (K, r)), rng.uniform(low, 1, (S, r)))


def random_instance(seed, I=6, J=5, K=4, S=3, r=3, missing=0.3, labels=True, positive=False):
    """Small dataset plus parameters with a classifier head."""
    rng = np.random.default_rng(seed)
    tensor = rng.random((I, J, K))
    mask = (rng.random((I, J, K)) >= missing).astype(float)
    statics = rng.random((I, S))
    y = None
    split = None
    if labels:
        y = rng.integers(0, 2, (I, 2)).astype(float)
        split = np.array(["train"] * (I - 2) + ["test"] * 2, dtype=object)
    d = CohortDataset(tensor, mask, statics, y, split=split)
    low = 0.05 if positive else 0.0
    f = random_factors(rng, I, J, K, S, r, low)
    b = BiasTerms(rng.normal(0, 0.3, J), rng.normal(0, 0.3, I))
    head = init_classifier(r, rng) if labels else None
    return d, ScmtfParams(f, b, head)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, echoed once more in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
