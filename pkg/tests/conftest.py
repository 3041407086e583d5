"""Shared test helpers: the central finite-difference gradient oracle."""

import numpy as np

from revmux.tensor import GradTape, Tensor


def numeric_grad(f, t: Tensor, eps: float = 1e-5, indices=None) -> dict[tuple, float]:
    """Central-difference df/dt[idx] for a scalar-valued closure ``f()``.

    ``f`` must recompute the forward from current tensor contents on every
    call. Returns {index: derivative} for the requested flat indices (all
    elements when ``indices`` is None).
    """
    flat = t.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grads = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f())
        flat[i] = orig - eps
        lo = float(f())
        flat[i] = orig
        grads[i] = (hi - lo) / (2.0 * eps)
    return grads


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-4)


def check_grads(build_loss, params, rng=None, eps=1e-5, tol=1e-4, max_samples=8):
    """Assert analytic grads of ``build_loss()`` match central differences.

    ``build_loss`` runs a fresh forward pass and returns the scalar loss
    Tensor. Parameters must be float64 for the stated tolerances to hold.
    Samples up to ``max_samples`` coordinates per parameter.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    worst = 0.0
    for p in params:
        size = p.data.size
        if size <= max_samples:
            idx = list(range(size))
        else:
            idx = sorted(rng.choice(size, size=max_samples, replace=False).tolist())
        num = numeric_grad(lambda: build_loss().data, p, eps=eps, indices=idx)
        a = analytic[id(p)].reshape(-1)
        for i, n in num.items():
            err = rel_err(float(a[i]), n)
            worst = max(worst, err)
            assert err <= tol, (
                f"gradient mismatch at param shape {p.shape} index {i}: "
                f"analytic={a[i]:.8g} numeric={n:.8g} rel_err={err:.3g}"
            )
    return worst
