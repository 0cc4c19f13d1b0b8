"""Differentiable operator kernels on N x C x H x W grids.

Each op computes its forward result with numpy and, when any input takes
part in differentiation, records a closure that accumulates gradients into
its inputs. ``Grid.backward`` walks the recorded graph in reverse
topological order. Only the operators the conversion networks need are
provided; this is not a general autodiff engine.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operator receives inputs of incompatible shape."""


class Grid:
    """A 4-D value array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Grid, ...] = parents
        self._backward: Callable[[np.ndarray], None] | None = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Grid(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> Grid:
        return Grid(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this node; a scalar node defaults to d(self)=1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar grid")
            grad = np.ones_like(self.data)
        order: list[Grid] = []
        seen: set[int] = set()
        stack: list[tuple[Grid, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior buffers are not needed once propagated
                if node._parents:
                    node.grad = None
                    node._backward = None
                    node._parents = ()


def _result(data: np.ndarray, parents: Sequence[Grid], backward) -> Grid:
    if any(p.requires_grad for p in parents):
        return Grid(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Grid(data)


def parameter(data) -> Grid:
    return Grid(np.asarray(data), requires_grad=True)


@dataclass
class OpParams:
    """Convolution weights together with stride and padding."""

    kernel: Grid
    bias: Grid
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        k = self.kernel.shape
        if len(k) != 4:
            raise ShapeError(f"kernel must be 4-D (out, in, kh, kw), got {k}")
        if k[2] < 1 or k[3] < 1:
            raise ShapeError(f"kernel extent must be >= 1, got {k[2:]}")
        if min(self.stride) < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.bias.shape != (k[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_channels {k[0]}")


def conv_output_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Stack shifted slices of a padded input into (N, C*kh*kw, Ho*Wo)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        hi = i + sh * (ho - 1) + 1
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:hi:sh, j : j + sw * (wo - 1) + 1 : sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    d = dcols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=dcols.dtype)
    for i in range(kh):
        hi = i + sh * (ho - 1) + 1
        for j in range(kw):
            out[:, :, i:hi:sh, j : j + sw * (wo - 1) + 1 : sw] += d[:, :, i, j]
    return out


def conv2d(x: Grid, p: OpParams) -> Grid:
    n, c, h, wd = x.shape
    o, ci, kh, kw = p.kernel.shape
    sh, sw = p.stride
    ph, pw = p.padding
    if c != ci:
        raise ShapeError(f"channels: input has {c}, kernel expects {ci}")
    if h + 2 * ph < kh:
        raise ShapeError(f"height: padded extent {h + 2 * ph} < kernel height {kh}")
    if wd + 2 * pw < kw:
        raise ShapeError(f"width: padded extent {wd + 2 * pw} < kernel width {kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(wd, kw, sw, pw)
    w2 = p.kernel.data.reshape(o, ci * kh * kw)
    pointwise = kh == kw == 1 and sh == sw == 1
    if pointwise:
        cols = xp.reshape(n, c, ho * wo)
    else:
        cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    out = np.matmul(w2, cols)
    out += p.bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(n, o, ho * wo)
        if p.bias.requires_grad:
            p.bias.accumulate(g2.sum(axis=(0, 2)))
        if p.kernel.requires_grad:
            dw = g2[0] @ cols[0].T
            for b in range(1, n):
                dw += g2[b] @ cols[b].T
            p.kernel.accumulate(dw.reshape(p.kernel.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            if pointwise:
                dxp = dcols.reshape(xp.shape)
            else:
                dxp = _col2im(dcols, xp.shape, kh, kw, sh, sw, ho, wo)
            x.accumulate(dxp[:, :, ph : ph + h, pw : pw + wd])

    return _result(out, (x, p.kernel, p.bias), backward)


def conv1d(x: Grid, p: OpParams) -> Grid:
    """1-D convolution over the width axis of a height-1 grid."""
    if x.shape[2] != 1:
        raise ShapeError(f"height: conv1d expects height 1, got {x.shape[2]}")
    if p.kernel.shape[2] != 1:
        raise ShapeError(f"height: conv1d kernel must have height 1, got {p.kernel.shape[2]}")
    return conv2d(x, p)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form does not overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def glu(x: Grid) -> Grid:
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"channels: glu needs an even channel count, got {c}")
    half = c // 2
    a = x.data[:, :half]
    s = _sigmoid(x.data[:, half:])
    out = a * s

    def backward(g: np.ndarray) -> None:
        dx = np.empty_like(x.data)
        dx[:, :half] = g * s
        dx[:, half:] = g * a * s * (1.0 - s)
        x.accumulate(dx)

    return _result(out, (x,), backward)


_constant_stats = False


@contextmanager
def constant_norm_stats():
    """Treat instance-norm mean and variance as constants during backward.

    Normalization statistics couple every position of a grid, so the true
    gradient of one output location reaches the whole input. Inside this
    context the backward pass skips the statistics terms, which exposes the
    convolutional receptive field. Training never uses it.
    """
    global _constant_stats
    prev, _constant_stats = _constant_stats, True
    try:
        yield
    finally:
        _constant_stats = prev


def instance_norm(x: Grid, gamma: Grid, beta: Grid, eps: float = 1e-5) -> Grid:
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"channels: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    m = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = gamma.data[None, :, None, None]
    out = gm * xhat + beta.data[None, :, None, None]
    stats_constant = _constant_stats

    def backward(g: np.ndarray) -> None:
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gm
            if stats_constant:
                x.accumulate(inv * dxhat)
                return
            s1 = dxhat.sum(axis=(2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
            x.accumulate(inv * (dxhat - (s1 + xhat * s2) / m))

    return _result(out, (x, gamma, beta), backward)


def _shuffle_factors(r) -> tuple[int, int]:
    if isinstance(r, int):
        return r, r
    return int(r[0]), int(r[1])


def pixel_shuffle(x: Grid, r) -> Grid:
    """Move channel blocks into space: (C*rh*rw, H, W) -> (C, H*rh, W*rw).

    ``r`` is an int for square upsampling or an (rh, rw) pair; (1, 2) gives
    the 1-D shuffler used on height-1 grids.
    """
    rh, rw = _shuffle_factors(r)
    n, c, h, w = x.shape
    if c % (rh * rw):
        raise ShapeError(f"channels: {c} not divisible by {rh * rw}")
    co = c // (rh * rw)
    out = x.data.reshape(n, co, rh, rw, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * rh, w * rw)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g.reshape(n, co, h, rh, w, rw).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w))

    return _result(out, (x,), backward)


def pixel_unshuffle(x: Grid, r) -> Grid:
    """Inverse of :func:`pixel_shuffle`."""
    rh, rw = _shuffle_factors(r)
    n, c, h, w = x.shape
    if h % rh or w % rw:
        raise ShapeError(f"spatial size ({h}, {w}) not divisible by ({rh}, {rw})")
    ho, wo = h // rh, w // rw
    out = x.data.reshape(n, c, ho, rh, wo, rw).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * rh * rw, ho, wo)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g.reshape(n, c, rh, rw, ho, wo).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w))

    return _result(out, (x,), backward)


# -- structural helpers ------------------------------------------------------


def reshape(x: Grid, shape: tuple[int, ...]) -> Grid:
    out = x.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g.reshape(x.shape))

    return _result(out, (x,), backward)


def add(a: Grid, b: Grid) -> Grid:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _result(a.data + b.data, (a, b), backward)


def pad_height(x: Grid, top: int, bottom: int) -> Grid:
    """Zero-pad the height axis."""
    h = x.shape[2]
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (0, 0)))

    def backward(g: np.ndarray) -> None:
        x.accumulate(g[:, :, top : top + h])

    return _result(out, (x,), backward)


def crop_height(x: Grid, start: int, stop: int) -> Grid:
    out = x.data[:, :, start:stop]

    def backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        dx[:, :, start:stop] = g
        x.accumulate(dx)

    return _result(out, (x,), backward)


def concat_batch(grids: Sequence[Grid]) -> Grid:
    sizes = [gr.shape[0] for gr in grids]
    out = np.concatenate([gr.data for gr in grids], axis=0)

    def backward(g: np.ndarray) -> None:
        start = 0
        for gr, k in zip(grids, sizes):
            if gr.requires_grad:
                gr.accumulate(g[start : start + k])
            start += k

    return _result(out, tuple(grids), backward)


def take_batch(x: Grid, start: int, stop: int) -> Grid:
    out = x.data[start:stop]

    def backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        x.accumulate(dx)

    return _result(out, (x,), backward)


def sum_all(terms: Sequence[tuple[float, Grid]]) -> Grid:
    """Weighted sum of scalar grids."""
    total = sum(float(w) * float(t.data.reshape(-1)[0]) for w, t in terms)
    out = np.array(total, dtype=np.float64).reshape(1, 1, 1, 1)

    def backward(g: np.ndarray) -> None:
        for w, t in terms:
            if t.requires_grad:
                t.accumulate(np.full(t.shape, w * g.reshape(-1)[0], dtype=t.dtype))

    return _result(out, tuple(t for _, t in terms), backward)


def mean_square_to(x: Grid, target: float) -> Grid:
    """mean((x - target)^2) as a scalar grid."""
    if x.data.size == 0:
        raise ShapeError("mean_square_to: empty grid")
    d = x.data - target
    out = np.array(np.mean(d * d, dtype=np.float64)).reshape(1, 1, 1, 1)

    def backward(g: np.ndarray) -> None:
        x.accumulate((2.0 * g.reshape(-1)[0] / d.size) * d)

    return _result(out, (x,), backward)


def mean_abs_diff(a: Grid, b: Grid) -> Grid:
    """mean(|a - b|) as a scalar grid; the subgradient at 0 is taken as 0."""
    if a.shape != b.shape:
        raise ShapeError(f"mean_abs_diff: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    out = np.array(np.mean(np.abs(d), dtype=np.float64)).reshape(1, 1, 1, 1)

    def backward(g: np.ndarray) -> None:
        s = np.sign(d) * (g.reshape(-1)[0] / d.size)
        if a.requires_grad:
            a.accumulate(s)
        if b.requires_grad:
            b.accumulate(-s)

    return _result(out, (a, b), backward)


# -- optimisation ----------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    def __init__(self, iteration: int, name: str = ""):
        self.iteration = iteration
        self.name = name
        where = f" in {name}" if name else ""
        super().__init__(f"non-finite gradient{where} at iteration {iteration}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def like(cls, params: np.ndarray) -> AdamState:
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
    name: str = "",
) -> None:
    """One bias-corrected Adam update applied in place to ``params`` and ``state``."""
    if t < 1:
        raise ValueError(f"Adam step counter must be >= 1, got {t}")
    if state.m.shape != params.shape or state.v.shape != params.shape:
        raise ShapeError("Adam state does not match parameter shape")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient(t, name)
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * (grads * grads)
    mhat = state.m / (1.0 - beta1**t)
    vhat = state.v / (1.0 - beta2**t)
    params -= lr * mhat / (np.sqrt(vhat) + eps)


# -- finite-difference verification ----------------------------------------


def grad_check(
    op: Callable[..., Grid],
    inputs: Grid | Sequence[Grid],
    h: float = 1e-5,
    n_samples: int = 100,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` is called with the input grids positionally. The scalar objective
    is a fixed random projection of the op's output. Up to ``n_samples``
    coordinates are sampled across all inputs (all of them if fewer exist).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-6, 1e-3]")
    grids = [inputs] if isinstance(inputs, Grid) else list(inputs)
    for gr in grids:
        gr.data = gr.data.astype(np.float64)
        gr.requires_grad = True
        gr.grad = None
    rng = np.random.default_rng(seed)
    probe = rng.standard_normal(op(*[Grid(gr.data) for gr in grids]).shape)

    def objective() -> float:
        out = op(*[Grid(gr.data) for gr in grids])
        return float(np.sum(out.data * probe))

    out = op(*grids)
    out.backward(probe.copy())
    analytic = [gr.grad if gr.grad is not None else np.zeros_like(gr.data) for gr in grids]

    coords = [(i, j) for i, gr in enumerate(grids) for j in range(gr.data.size)]
    if len(coords) > n_samples:
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    # entries whose true gradient is ~0 are dominated by round-off in the
    # difference quotient, so the denominator floor follows the gradient scale
    floor = max(1e-8, 1e-6 * max(float(np.max(np.abs(a))) if a.size else 0.0 for a in analytic))
    worst = 0.0
    for i, j in coords:
        flat = grids[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = objective()
        flat[j] = orig - h
        fm = objective()
        flat[j] = orig
        fd = (fp - fm) / (2.0 * h)
        an = analytic[i].reshape(-1)[j]
        err = abs(an - fd) / max(abs(an), abs(fd), floor)
        worst = max(worst, err)
    return worst
