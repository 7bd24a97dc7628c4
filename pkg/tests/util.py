"""Shared test oracles."""

import numpy as np

from diffmoe.tensor import Tape, backward


def numeric_grad(fn, param, h=1e-6, coords=None):
    """Central finite differences of a scalar-valued fn wrt one Parameter."""
    flat = param.data.ravel()
    if coords is None:
        coords = range(flat.size)
    grads = {}
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        grads[i] = (fp - fm) / (2.0 * h)
    return grads


def gradcheck(fn, params, h=1e-6, rtol=1e-6, atol=1e-8, max_coords=None, seed=0):
    """Compare reverse-mode gradients of fn() against central differences.

    fn must be pure (re-evaluable). Checks every coordinate unless max_coords
    caps the per-parameter sample. Returns the worst relative error seen.
    """
    for p in params:
        p.zero_grad()
    with Tape():
        loss = fn()
        backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    rng = np.random.default_rng(seed)
    for p, a in zip(params, analytic):
        n = p.data.size
        if max_coords is not None and n > max_coords:
            coords = sorted(rng.choice(n, size=max_coords, replace=False).tolist())
        else:
            coords = range(n)
        num = numeric_grad(fn, p, h=h, coords=coords)
        aflat = a.ravel()
        for i, nv in num.items():
            av = aflat[i]
            err = abs(av - nv)
            denom = max(abs(av), abs(nv), 1e-8)
            worst = max(worst, err / denom)
            assert err <= atol + rtol * max(abs(av), abs(nv)), (
                f"grad mismatch at {p.name or 'param'}[{i}]: "
                f"analytic={av:.12g} numeric={nv:.12g}"
            )
    return worst
