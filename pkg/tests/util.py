"""Shared test helpers: finite-difference gradient checking."""

import numpy as np

from nre import tensor as T

FD_STEP = 1e-5
FD_RTOL = 1e-4


def numeric_grad(make_loss, x, eps=FD_STEP):
    """Central finite differences of make_loss() w.r.t. the entries of x.data."""
    grad = np.zeros_like(x.data)
    flat = x.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(make_loss().data)
        flat[i] = orig - eps
        fm = float(make_loss().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def check_grad(make_loss, tensors, rtol=FD_RTOL):
    """Compare analytic gradients of a scalar loss against finite differences.

    make_loss must rebuild the loss from the tensors' current .data so the
    numeric path sees perturbations. Returns the worst relative error.
    """
    for t in tensors:
        t.grad = None
    loss = make_loss()
    T.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(make_loss, t)
        denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-6)
        err = np.abs(analytic - numeric).max() / denom
        worst = max(worst, err)
        assert err < rtol, f"gradient mismatch: rel err {err:.3e} on shape {t.data.shape}"
    return worst


def rand_tensor(rng, shape, requires_grad=True, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad)
