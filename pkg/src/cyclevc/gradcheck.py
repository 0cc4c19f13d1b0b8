"""Finite-difference verification suite for every differentiable operator.

Each case builds small random float64 inputs (kernels and normalization
parameters are checked alongside the data input) and returns the worst
relative error over at least 100 sampled coordinates.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .ops import Grid, OpParams

N_SAMPLES = 120
TOLERANCE = 1e-4


def _g(rng, *shape) -> Grid:
    return Grid(rng.standard_normal(shape))


def _conv_case(x_shape, k_shape, stride, pad, one_d=False, seed=0) -> float:
    rng = np.random.default_rng(seed)
    x, k, b = _g(rng, *x_shape), _g(rng, *k_shape), _g(rng, k_shape[0])
    fn = ops.conv1d if one_d else ops.conv2d
    return ops.grad_check(lambda x, k, b: fn(x, OpParams(k, b, stride, pad)), [x, k, b], n_samples=N_SAMPLES, seed=seed)


def check_conv1d() -> float:
    return _conv_case((2, 4, 1, 16), (6, 4, 1, 3), (1, 1), (0, 1), one_d=True)


def check_conv2d() -> float:
    return _conv_case((2, 3, 7, 9), (4, 3, 3, 3), (1, 1), (1, 1), seed=1)


def check_conv2d_strided() -> float:
    return _conv_case((1, 2, 9, 12), (3, 2, 5, 5), (2, 2), (2, 2), seed=2)


def check_glu() -> float:
    rng = np.random.default_rng(3)
    return ops.grad_check(ops.glu, _g(rng, 2, 6, 4, 5), n_samples=N_SAMPLES, seed=3)


def check_instance_norm() -> float:
    rng = np.random.default_rng(4)
    x, gamma, beta = _g(rng, 2, 3, 4, 6), _g(rng, 3), _g(rng, 3)
    return ops.grad_check(lambda x, g, b: ops.instance_norm(x, g, b), [x, gamma, beta], n_samples=N_SAMPLES, seed=4)


def check_pixel_shuffle() -> float:
    rng = np.random.default_rng(5)
    return ops.grad_check(lambda x: ops.pixel_shuffle(x, 2), _g(rng, 2, 8, 3, 4), n_samples=N_SAMPLES, seed=5)


CASES: dict[str, Callable[[], float]] = {
    "conv1d": check_conv1d,
    "conv2d": check_conv2d,
    "conv2d_strided": check_conv2d_strided,
    "glu": check_glu,
    "instance_norm": check_instance_norm,
    "pixel_shuffle": check_pixel_shuffle,
}


def run_all(cases: dict[str, Callable[[], float]] | None = None) -> dict[str, float]:
    return {name: fn() for name, fn in (cases or CASES).items()}
