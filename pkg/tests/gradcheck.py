"""Central-difference gradient checking shared by tests.

Relative error uses a noise floor proportional to the scalar's magnitude:
central differences of f cannot resolve gradients below ~eps*|f|/h, so
parameters whose true gradient sits under that floor (e.g. a bias that a
following normalization cancels exactly) count as agreeing when both
estimates are below it.
"""

import numpy as np
import torch


def finite_difference_check(scalar_fn, params, n_checks=20, h=1e-5, seed=0,
                            rel_tol=1e-4):
    """Compare autograd gradients of `scalar_fn()` against central differences
    at `n_checks` randomly chosen parameter entries. Returns the worst
    relative error; asserts every check is within rel_tol."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        if p.grad is not None:
            p.grad = None
    value = scalar_fn()
    value.backward()
    floor = 1e-6 * max(1.0, abs(float(value.detach())))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_checks):
        p = params[int(rng.integers(len(params)))]
        flat = p.detach().reshape(-1)
        idx = int(rng.integers(flat.numel()))
        with torch.no_grad():
            orig = flat[idx].item()
            flat[idx] = orig + h
            f_plus = float(scalar_fn())
            flat[idx] = orig - h
            f_minus = float(scalar_fn())
            flat[idx] = orig
        fd = (f_plus - f_minus) / (2 * h)
        an = p.grad.reshape(-1)[idx].item()
        rel = abs(fd - an) / max(abs(fd), abs(an), floor)
        worst = max(worst, rel)
        assert rel < rel_tol, (fd, an, rel)
    return worst
