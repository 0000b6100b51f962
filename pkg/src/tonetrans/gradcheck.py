"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .tensor import Tensor, gradient_of


def finite_difference_check(
    f: Callable[[], Tensor],
    params,
    epsilon: float = 1e-5,
    max_coords_per_param: int = 16,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``f`` rebuilds the scalar loss from the parameters' current arrays on
    every call; ``params`` is a dict (name -> Tensor) or iterable of leaf
    tensors. Each parameter's array is perturbed in place one sampled
    coordinate at a time. Returns the worst relative error

        |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)

    over all sampled coordinates. The 1e-6 floor keeps roundoff on
    near-zero gradients from registering as spurious failures while still
    flagging any gradient that is wrong at the scale the loss actually
    varies.
    """
    if isinstance(params, Mapping):
        items = list(params.items())
    elif isinstance(params, Iterable):
        items = [(f"param{i}", t) for i, t in enumerate(params)]
    else:
        raise TypeError("params must be a mapping or an iterable of tensors")

    tensors = [t for _, t in items]
    analytic = gradient_of(f(), tensors)
    rng = np.random.default_rng(seed)

    worst = 0.0
    for (name, tensor), grad in zip(items, analytic):
        flat = tensor.data.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        gflat = grad.reshape(-1)
        for idx in coords:
            saved = flat[idx]
            flat[idx] = saved + epsilon
            plus = f().item()
            flat[idx] = saved - epsilon
            minus = f().item()
            flat[idx] = saved
            numeric = (plus - minus) / (2.0 * epsilon)
            a = float(gflat[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            if err > worst:
                worst = err
    return worst
