"""Central finite-difference gradient oracle."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np


def finite_diff_gradient(scalar_fn: Callable[[], float], params: dict[str, np.ndarray],
                         h: float = 1e-5) -> dict[str, np.ndarray]:
    """Estimate ``d scalar_fn / d params`` by ``(f(p+h) - f(p-h)) / 2h``.

    ``params`` are perturbed in place one coordinate at a time and restored;
    ``scalar_fn`` must read them on every call.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    out = {}
    for name, p in params.items():
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError(f"parameter {name} is not contiguous")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(scalar_fn())
            flat[i] = orig - h
            fm = float(scalar_fn())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite function value while perturbing {name}[{i}]")
            g.reshape(-1)[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max-norm relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)
