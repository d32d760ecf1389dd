import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def directional_check(f, x, n_dirs=4, h=1e-6, seed=0):
    """Largest relative error between autograd and central differences.

    ``f`` maps a float64 tensor to a scalar tensor.  The analytic gradient
    is projected on random unit directions and compared with
    (f(x + h v) - f(x - h v)) / 2h.
    """
    x = x.detach().clone().double().requires_grad_(True)
    grad, = torch.autograd.grad(f(x), x)
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        v = torch.randn(x.shape, generator=g, dtype=torch.float64)
        v /= v.norm()
        fd = (f(x + h * v) - f(x - h * v)).detach() / (2 * h)
        an = (grad * v).sum()
        worst = max(worst, float((an - fd).abs() / max(float(fd.abs()), float(an.abs()), 1e-8)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
