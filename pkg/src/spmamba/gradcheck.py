"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DeterminismError, UsageError
from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    worst: tuple[int, tuple[int, ...]] | None  # (input index, coordinate)
    tol: float

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_rel_error:.3e} (tol {self.tol:g}, {self.n_checked} coords)"


def _digest(t: Tensor) -> str:
    return hashlib.sha256(np.ascontiguousarray(t.data).tobytes()).hexdigest()


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(f: Callable[[], Tensor], inputs: Tensor | Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``f()`` against central differences.

    ``inputs`` are leaf tensors that ``f`` closes over; they are perturbed in
    place one coordinate at a time and restored afterwards.  With
    ``max_coords`` set, a seeded random subset of coordinates is checked
    instead of all of them.
    """
    if not 0 < h <= 1e-3:
        raise UsageError(f"step h must lie in (0, 1e-3], got {h}")
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        if not t.requires_grad:
            raise UsageError("every checked input must have requires_grad=True")

    first, second = f(), f()
    if first.size != 1:
        raise UsageError(f"f must be scalar-valued, got shape {first.shape}")
    if _digest(first) != _digest(second):
        raise DeterminismError("f returned different values on identical inputs")

    for t in tensors:
        t.grad = None
    backward(f())
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    coords = [(i, c) for i, t in enumerate(tensors) for c in np.ndindex(t.shape)]
    if max_coords is not None and len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    worst, worst_at = 0.0, None
    for i, c in coords:
        arr = tensors[i].data
        orig = arr[c]
        arr[c] = orig + h
        fp = f().item()
        arr[c] = orig - h
        fm = f().item()
        arr[c] = orig
        numeric = (fp - fm) / (2 * h)
        err = relative_error(float(analytic[i][c]), numeric)
        if err > worst or worst_at is None:
            worst, worst_at = err, (i, c)
    return GradCheckReport(worst, worst <= tol, len(coords), worst_at, tol)
