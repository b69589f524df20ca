import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_seeds():
    """Every test starts from the same RNG state; tests that need their own
    seed set it explicitly on top."""
    torch.manual_seed(0)
    np.random.seed(0)
    yield


def central_difference(fn, x: torch.Tensor, index, step: float) -> float:
    """Central finite difference of scalar fn at one coordinate of x."""
    x_plus = x.detach().clone()
    x_plus[index] += step
    x_minus = x.detach().clone()
    x_minus[index] -= step
    return (fn(x_plus) - fn(x_minus)).item() / (2.0 * step)


def assert_grad_matches_fd(fn, x: torch.Tensor, indices, step=1e-3, rel_tol=1e-2, abs_floor=1e-6):
    """Check autograd gradients of scalar fn against central differences.

    Relative error |a - f| <= rel_tol * max(|a|, |f|) with a small absolute
    floor for coordinates whose true gradient is zero.
    """
    x_var = x.detach().clone().requires_grad_(True)
    fn(x_var).backward()
    grad = x_var.grad
    for index in indices:
        analytic = grad[index].item()
        numeric = central_difference(fn, x, index, step)
        err = abs(analytic - numeric)
        bound = rel_tol * max(abs(analytic), abs(numeric)) + abs_floor
        assert err <= bound, (
            f"gradient mismatch at {index}: analytic={analytic:.6g} "
            f"numeric={numeric:.6g} err={err:.3g} > {bound:.3g}"
        )
