"""Central finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Tensor


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor],
               h: float = 1e-5) -> float:
    """Max relative error between autodiff and numeric gradients.

    ``f`` rebuilds the scalar loss from the current leaf values.  Each
    coordinate is perturbed in place and restored afterwards.
    """
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise TypeError("grad_check requires float64 leaves")
        leaf.grad = None
    f().backward()
    worst = 0.0
    for leaf in leaves:
        auto = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        afl = auto.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(afl[i])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
