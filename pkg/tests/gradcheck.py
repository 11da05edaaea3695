"""Central finite-difference helpers shared by the gradient tests."""
import numpy as np


def numeric_grad(f, x, idx, h=1e-6):
    """d f / d x[idx] by central differences; ``x`` is perturbed in place and restored."""
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-7)


def check_entries(f, x, analytic, n=6, rng=None, h=1e-6):
    """Compare analytic gradient entries against finite differences.

    Probes the ``n`` largest-magnitude analytic entries plus ``n`` random ones;
    returns the worst relative error.
    """
    rng = rng or np.random.default_rng(0)
    flat = np.abs(analytic).ravel()
    picks = list(np.argsort(flat)[-n:]) + list(rng.integers(0, flat.size, n))
    worst = 0.0
    for p in picks:
        idx = np.unravel_index(int(p), x.shape)
        num = numeric_grad(f, x, idx, h)
        a = analytic[idx]
        if max(abs(a), abs(num)) < 1e-9:
            continue
        worst = max(worst, rel_err(a, num))
    return worst
