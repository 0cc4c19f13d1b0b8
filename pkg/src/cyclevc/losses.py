"""Least-squares adversarial losses plus the L1 cycle-consistency and identity terms.

Every loss takes and returns :class:`~cyclevc.ops.Grid` objects so that it
can sit at the end of a differentiable graph; ``float(loss.data)`` gives
the value.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from . import ops
from .ops import Grid, ShapeError


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_id: float = 5.0
    adv_steps: int = 2

    def __post_init__(self):
        if self.lambda_cyc < 0 or self.lambda_id < 0:
            raise ValueError("loss weights must be non-negative")
        if self.adv_steps not in (1, 2):
            raise ValueError(f"adv_steps must be 1 or 2, got {self.adv_steps}")


@dataclass
class LossReport:
    adv_g: float = 0.0
    adv_d: float = 0.0
    adv2_g: float = 0.0
    adv2_d: float = 0.0
    cyc: float = 0.0
    id: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def values(self) -> tuple[float, ...]:
        return astuple(self)

    def log_line(self, iteration: int) -> str:
        return ",".join([str(iteration)] + [repr(float(v)) for v in self.values()])

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _as_grid(x) -> Grid:
    return x if isinstance(x, Grid) else Grid(np.asarray(x, dtype=np.float64))


def _nonempty(g: Grid, what: str) -> None:
    if g.data.size == 0:
        raise ShapeError(f"{what}: empty score grid")


def lsgan_d_loss(real_scores, fake_scores) -> Grid:
    """mean((real - 1)^2) + mean(fake^2)."""
    real, fake = _as_grid(real_scores), _as_grid(fake_scores)
    _nonempty(real, "real scores")
    _nonempty(fake, "fake scores")
    return ops.sum_all([(1.0, ops.mean_square_to(real, 1.0)), (1.0, ops.mean_square_to(fake, 0.0))])


def lsgan_g_loss(fake_scores) -> Grid:
    """mean((fake - 1)^2)."""
    fake = _as_grid(fake_scores)
    _nonempty(fake, "fake scores")
    return ops.mean_square_to(fake, 1.0)


def _paired_l1(a, a_hat, b, b_hat) -> Grid:
    a, a_hat, b, b_hat = map(_as_grid, (a, a_hat, b, b_hat))
    for u, v in ((a, a_hat), (b, b_hat)):
        if u.shape != v.shape:
            raise ShapeError(f"shape mismatch {u.shape} vs {v.shape}")
    return ops.sum_all([(1.0, ops.mean_abs_diff(a_hat, a)), (1.0, ops.mean_abs_diff(b_hat, b))])


def cycle_loss(x, x_cyc, y, y_cyc) -> Grid:
    """Mean absolute reconstruction error of both cycles."""
    return _paired_l1(x, x_cyc, y, y_cyc)


def identity_loss(y, g_xy_of_y, x, g_yx_of_x) -> Grid:
    """Mean absolute change each generator makes to a sample of its own output domain."""
    return _paired_l1(y, g_xy_of_y, x, g_yx_of_x)


def second_adversarial_loss(x, x_cyc, d2) -> tuple[Grid, Grid]:
    """Adversarial terms on a circularly converted sample.

    ``d2`` is the second-step discriminator of the cycle's start domain
    (any callable mapping a grid to scores). Returns ``(g_term, d_term)``:
    the generator term scores ``d2(x_cyc)`` against the real target; the
    discriminator term is computed on a detached ``x_cyc``.
    """
    if d2 is None:
        raise ConfigurationError("second-step adversarial loss needs a second discriminator (adv_steps=2)")
    x, x_cyc = _as_grid(x), _as_grid(x_cyc)
    if x.shape != x_cyc.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_cyc.shape}")
    g_term = lsgan_g_loss(d2(x_cyc))
    d_term = lsgan_d_loss(d2(x.detach()), d2(x_cyc.detach()))
    return g_term, d_term


def total_objective(parts: LossReport, w: LossWeights, identity_active: bool = True) -> tuple[float, float]:
    """Assemble the weighted generator and discriminator totals."""
    if w.adv_steps == 1 and (parts.adv2_g or parts.adv2_d):
        raise ConfigurationError("second-step terms are nonzero with adv_steps=1")
    total_g = parts.adv_g + w.lambda_cyc * parts.cyc
    total_d = parts.adv_d
    if w.adv_steps == 2:
        total_g += parts.adv2_g
        total_d += parts.adv2_d
    if identity_active:
        total_g += w.lambda_id * parts.id
    return total_g, total_d
