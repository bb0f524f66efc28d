"""Central-finite-difference validation of taped gradients.

The checker evaluates a scalar function twice per probed coordinate
(theta +/- h) and compares the slope against the taped gradient.  With
h = 1e-5 in float64 the difference quotient is good to ~1e-10 absolute,
so a relative tolerance of 1e-4 has orders of magnitude of headroom and
failures indicate a wrong backward rule, not noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError
from .core import Tape, Tensor, backward

# Below this magnitude the difference quotient is dominated by roundoff,
# so errors are measured against the floor instead of the tiny true value.
_REL_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference sweep."""

    passed: bool
    max_rel_err: float
    tol: float
    worst_param: int = -1
    worst_coord: int = -1
    per_param: list = field(default_factory=list)

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {verdict}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.1e}) at param {self.worst_param} "
                f"coord {self.worst_coord}")


def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Tensor | Sequence[Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare taped gradients of ``f(params)`` against central differences.

    ``f`` must be a pure scalar function of the parameter values: calling it
    twice with the same data must give the same loss.  When a parameter has
    more coordinates than ``max_coords_per_param``, a seeded subsample of
    coordinates is probed (the taped gradient is still computed in full).
    """
    if isinstance(params, Tensor):
        params = [params]
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.zero_grad()

    with Tape() as tape:
        loss = f(params)
    if loss.size != 1:
        raise NumericError(f"gradcheck target returned shape {loss.shape}, not a scalar")
    backward(tape, loss)
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    rng = np.random.default_rng(seed)
    max_err = 0.0
    worst = (-1, -1)
    per_param = []
    for pi, (p, g) in enumerate(zip(params, grads)):
        n = p.size
        coords = np.arange(n)
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        p_err = 0.0
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            hi = f(params).item()
            flat[ci] = orig - h
            lo = f(params).item()
            flat[ci] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("gradcheck target returned non-finite loss")
            fd = (hi - lo) / (2.0 * h)
            ad = gflat[ci]
            err = abs(ad - fd) / max(abs(ad), abs(fd), _REL_FLOOR)
            if err > p_err:
                p_err = err
            if err > max_err:
                max_err = err
                worst = (pi, int(ci))
        per_param.append(p_err)

    return GradCheckReport(
        passed=max_err < tol, max_rel_err=max_err, tol=tol,
        worst_param=worst[0], worst_coord=worst[1], per_param=per_param)


__all__ = ["GradCheckReport", "finite_difference_check"]
