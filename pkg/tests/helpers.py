"""Shared test oracles, independent of the library's own gradient path."""

import numpy as np

from protopop.autodiff import Tensor, zero_grads


def finite_diff_grad(loss_fn, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss wrt one parameter tensor."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn().item()
        flat[i] = orig - h
        fm = loss_fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max |a - n| / max(|a|, |n|, floor); the floor guards near-zero grads
    against finite-difference noise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(loss_fn, params, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Run loss_fn once with backward, compare every param grad against
    central finite differences. Returns the worst relative error seen."""
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = finite_diff_grad(loss_fn, p, h=h)
        worst = max(worst, max_rel_error(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst
