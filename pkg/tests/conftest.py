import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(fn, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` (float64), element by element."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = float(fn(x))
        flat[i] = orig - step
        down = float(fn(x))
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def autograd_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def assert_gradients_match(fn, x, rtol=1e-3, step=1e-4):
    numeric = central_difference(fn, x, step)
    analytic = autograd_gradient(fn, x)
    err = (analytic - numeric).abs().max().item()
    scale = max(numeric.abs().max().item(), 1e-12)
    assert err / scale < rtol, f"relative gradient error {err / scale:.2e}"
    return err / scale


# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
