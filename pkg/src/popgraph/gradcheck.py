"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, backward

# Gradients smaller than this are compared in absolute terms (scaled by it).
GRAD_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``f``.

    ``f`` must rebuild the scalar loss from the current contents of
    ``params`` on every call. With ``max_coords`` set, tensors larger than
    that are spot-checked at that many random coordinates.
    """
    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(max_rel_error=0.0, tol=tol, checked=0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = f().item()
            flat[c] = orig - eps
            down = f().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[name].reshape(-1)[c]
            err = relative_error(a, numeric)
            report.checked += 1
            report.max_rel_error = max(report.max_rel_error, err)
            if err >= tol:
                report.failures.append((name, np.unravel_index(c, p.shape), a, numeric))
    return report


def finite_difference_check(
    f: Callable[[Tensor], Tensor], point, eps: float = 1e-5, tol: float = 1e-4
) -> GradCheckReport:
    """Gradient check of a scalar function of a single tensor argument."""
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    return check_gradients(lambda: f(x), {"x": x}, eps=eps, tol=tol)
