"""Central finite-difference checks against reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, gradient


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    deterministic: bool = True

    def passed(self, tol: float = 1e-4) -> bool:
        return self.deterministic and self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                     indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the array ``x``, perturbed in place."""
    out = np.zeros_like(x)
    it = indices if indices is not None else list(np.ndindex(*x.shape))
    for idx in it:
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def finite_difference_check(function: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences at ``point``.

    ``function`` maps a tensor to a scalar tensor. Returns ``inf`` if repeated
    evaluations disagree (the check cannot be trusted for a non-deterministic map).
    """
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    if x.dtype != np.float64:
        raise TypeError("finite_difference_check runs in 64-bit only")
    loss = function(x)
    if float(function(x).data) != float(loss.data):
        return float("inf")
    g = gradient(loss, [x])[x].data

    def f():
        return float(function(Tensor(x.data)).data)

    num = numeric_gradient(f, x.data, h)
    return float(relative_error(g, num).max()) if g.size else 0.0


def check_parameters(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                     max_coords: int | None = None, rng: np.random.Generator | None = None,
                     shortcuts: dict[str, Callable[[], Tensor]] | None = None) -> GradcheckReport:
    """Compare gradients of ``loss_fn`` for named parameters against central differences.

    ``max_coords`` subsamples coordinates per tensor when given. ``shortcuts`` maps a parameter name
    to a cheaper function that must return the same loss whenever only that parameter moves.
    """
    shortcuts = shortcuts or {}
    loss = loss_fn()
    again = loss_fn()
    deterministic = float(loss.data) == float(again.data)
    grads = gradient(loss, list(params.values()))

    report = GradcheckReport(0.0, deterministic=deterministic)
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"check_parameters: {name} is {p.dtype}, need float64")
        idx = list(np.ndindex(*p.shape))
        if max_coords is not None and len(idx) > max_coords:
            pick = (rng or np.random.default_rng(0)).choice(len(idx), max_coords, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        probe = shortcuts.get(name, loss_fn)
        num = numeric_gradient(lambda: float(probe().data), p.data, h, idx)
        ana = grads[p].data
        errs = [relative_error(ana[i], num[i]) for i in idx]
        report.per_tensor[name] = float(np.max(errs)) if errs else 0.0
    report.max_rel_error = max(report.per_tensor.values(), default=0.0)
    return report
