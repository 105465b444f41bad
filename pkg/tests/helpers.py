"""Shared test oracles: central-difference gradients and error measures.

These stay independent of the engine they check: they only mutate raw
numpy buffers and re-run a closure.
"""

import numpy as np


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. buffer ``x``.

    ``f`` must recompute its value from the current contents of ``x``.
    """
    g = np.zeros_like(x, dtype=np.float64)
    xf = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        fp = float(f())
        xf[i] = orig - h
        fm = float(f())
        xf[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def numerical_grad_sampled(f, x: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences at a subset of flat coordinates of ``x``."""
    g = np.zeros(len(indices), dtype=np.float64)
    xf = x.reshape(-1)
    for j, i in enumerate(indices):
        orig = xf[i]
        xf[i] = orig + h
        fp = float(f())
        xf[i] = orig - h
        fm = float(f())
        xf[i] = orig
        g[j] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest component error relative to the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
