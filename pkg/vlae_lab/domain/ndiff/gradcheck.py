from __future__ import annotations

from collections.abc import Callable

import numpy as np

from vlae_lab.domain.errors import NumericError
from vlae_lab.domain.ndiff.tensor import Tape, Tensor, variable


def _scalar(value: Tensor) -> float:
    out = value.item()
    if not np.isfinite(out):
        raise NumericError("grad_check: non-finite function value")
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with Tape() as tape:
        xv = variable(base)
        loss = f(xv)
        if loss.tape is not tape:
            # f が x に依存しない場合は解析勾配 0
            analytic = np.zeros_like(base)
        else:
            (analytic,) = tape.gradient(loss, [xv])
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        up = _scalar(f(Tensor(bumped.reshape(base.shape))))
        bumped[i] -= 2 * eps
        down = _scalar(f(Tensor(bumped.reshape(base.shape))))
        numeric.reshape(-1)[i] = (up - down) / (2 * eps)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("grad_check: non-finite analytic gradient")
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0


def jacobian(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Dense Jacobian d f(x) / d x, one backward pass per output element."""
    base = np.array(x, dtype=np.float64)
    with Tape() as tape:
        xv = variable(base)
        out = f(xv)
        rows = []
        for k in range(out.size):
            picked = out[np.unravel_index(k, out.shape)] if out.ndim else out
            if picked.tape is not tape:
                rows.append(np.zeros(base.size))
                continue
            (g,) = tape.gradient(picked, [xv])
            rows.append(g.reshape(-1))
    return np.stack(rows).reshape(out.shape + base.shape)
