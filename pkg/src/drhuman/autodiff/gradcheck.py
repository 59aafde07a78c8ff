"""Central finite-difference oracle for analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad, session


class GradcheckError(RuntimeError):
    """The checked function produced a non-finite value."""


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    with session():
        xt = Tensor(x, requires_grad=True)
        loss = f(xt)
        if not np.all(np.isfinite(loss.data)):
            raise GradcheckError(f"f returned non-finite value {loss.data}")
        loss.backward()
        return np.zeros_like(xt.data) if xt.grad is None else xt.grad.copy()


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5,
                 coords=None) -> np.ndarray:
    """Central differences ``(f(x+eps e_i) - f(x-eps e_i)) / 2eps``.

    Only the flat indices in ``coords`` are evaluated (all when None); the
    rest of the result is NaN.
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(x)).item()
            flat[i] = orig - eps
            fm = f(Tensor(x)).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradcheckError(f"f is non-finite near coordinate {i}")
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5,
                      coords=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``coords`` optionally restricts the comparison to a subset of flat indices,
    which keeps checks on large weight tensors affordable.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    a = analytic_grad(f, x).reshape(-1)
    n = numeric_grad(f, x, eps, coords).reshape(-1)
    sel = np.arange(a.size) if coords is None else np.asarray(coords, dtype=np.int64)
    if sel.size == 0:
        return 0.0
    return float(relative_error(a[sel], n[sel]).max())
