import numpy as np
import pytest

from gigaslide.autograd import WIDE, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def wide_tensor(rng, shape, scale=1.0, requires_grad=True):
    return Tensor((rng.standard_normal(shape) * scale).astype(WIDE), requires_grad=requires_grad, dtype=WIDE)


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criterion lines, which are otherwise captured."""
    import sys

    mod = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
