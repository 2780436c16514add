"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence, Tuple

import numpy as np

from . import kinks
from .tensor import Tensor, no_grad


EXTENDED = np.finfo(np.longdouble).eps < 1e-18


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               extended: bool = EXTENDED) -> float:
    """Max relative error between backprop and central differences.

    ``f`` must rebuild its graph from the current ``data`` of ``inputs`` on
    every call. The denominator is ``max(|a|, |b|, 1e-8)``. With ``extended``
    the differences are evaluated in ``np.longdouble`` (64-bit mantissa where
    the platform has one), which removes most of the round-off that otherwise
    swamps small gradient coordinates; the analytic side stays float64.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data, dtype=np.float64)
        t.zero_grad()
    f().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    saved = [t.data for t in inputs]
    fd_type = np.longdouble if extended else np.float64
    worst = 0.0
    try:
        for t in inputs:
            t.data = t.data.astype(fd_type)
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                with no_grad():
                    flat[k] = orig + fd_type(eps)
                    fp = f().data
                    flat[k] = orig - fd_type(eps)
                    fm = f().data
                flat[k] = orig
                num = float((fp - fm) / (2 * fd_type(eps)))
                err = abs(num - gflat[k]) / max(abs(num), abs(gflat[k]), 1e-8)
                worst = max(worst, err)
    finally:
        for t, d in zip(inputs, saved):
            t.data = d
            t.zero_grad()
    return worst


def fd_conditioning(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> Tuple[float, float]:
    """How well central differences can resolve the gradient of ``f`` here.

    Returns ``(kink_margin, weakest)``: the smallest distance of any ReLU
    input or max-pool gap from a nondifferentiable point, and the smallest
    nonzero analytic gradient magnitude relative to ``|f|``. Coordinates far
    below ``ulp(f) / eps`` cannot be measured by finite differences at all.
    """
    for t in inputs:
        t.zero_grad()
    with kinks.track() as rec:
        y = f()
    y.backward()
    grads = np.concatenate([np.abs(t.grad).ravel() for t in inputs if t.grad is not None])
    nz = grads[grads > 0]
    weakest = float(nz.min() / max(abs(float(y.data)), 1e-300)) if nz.size else np.inf
    for t in inputs:
        t.zero_grad()
    return rec[0], weakest
