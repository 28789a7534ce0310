"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .autograd import Parameter, Tensor, backward, no_grad, reset_graph


def finite_difference_check(f: Callable[[], Tensor], params: Mapping[str, Parameter] | Sequence[Parameter],
                            eps: float = 1e-5, max_coords: int = 40, seed: int = 0, order: int = 2) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` re-evaluates a scalar loss from the current parameter values. Up to
    ``max_coords`` coordinates per parameter are sampled (all of them when the
    parameter is small). ``order=4`` uses the five-point central stencil, which
    tolerates a larger ``eps`` and so loses less to roundoff on tiny gradients.
    """
    if not eps > 0:
        raise ValueError(f"finite_difference_check: step size must be positive, got {eps}")
    if order not in (2, 4):
        raise ValueError(f"finite_difference_check: order must be 2 or 4, got {order}")
    # (offset, weight) applied to f(x + k*eps) - f(x - k*eps)
    stencil = ((1, 0.5),) if order == 2 else ((1, 8 / 12), (2, -1 / 12))
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    for p in plist:
        p.grad = None
    reset_graph()
    loss = f()
    backward(loss, plist)
    analytic = [p.grad.copy() for p in plist]
    reset_graph()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(plist, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
            for c in coords:
                orig = flat[c]
                num = 0.0
                for k, weight in stencil:
                    flat[c] = orig + k * eps
                    fp = float(f().data)
                    flat[c] = orig - k * eps
                    num += weight * (fp - float(f().data))
                flat[c] = orig
                num /= eps
                a = float(ga.reshape(-1)[c])
                err = abs(a - num) / max(abs(a), abs(num), 1e-12)
                worst = max(worst, err)
    for p in plist:
        p.grad = None
    return worst
