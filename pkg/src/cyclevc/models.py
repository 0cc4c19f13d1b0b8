"""Generator and discriminator networks.

Generators map a batch of normalized feature sequences ``(N, Q, T)`` to the
same shape. Three topologies are available:

``2-1-2d``
    2-D strided downsampling, a 1-D residual core between 1x1 channel
    adapters, and 2-D pixel-shuffle upsampling.
``1d``
    Everything 1-D with the feature dimension on the channel axis.
``2d``
    Everything 2-D, including the residual core.

Discriminators score a batch of ``(N, Q, T)`` sequences. ``patch`` ends in a
convolution and returns a score per local patch; ``full`` ends in a fully
connected layer and returns one score per input (it therefore needs a fixed
input length).

Channel counts are given in multiples of ``width``; ``width=128`` reproduces
the reference layer table (stem 128, downsampling 256/512, 2304-channel
reshape at Q=35, residual 512/256, upsampling 1024/512). Channel counts
listed for gated layers are the convolution outputs before the GLU halves
them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import ops
from .ops import Grid, OpParams

GENERATOR_KINDS = ("1d", "2d", "2-1-2d")
DISCRIMINATOR_KINDS = ("full", "patch")


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str = "2-1-2d"
    q: int = 35
    width: int = 128
    n_residual: int = 6

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ArchitectureError(f"unknown generator kind {self.kind!r}; expected one of {GENERATOR_KINDS}")
        if self.q <= 0:
            raise ArchitectureError(f"feature dimension must be positive, got {self.q}")
        if self.width < 2 or self.width % 2:
            raise ArchitectureError(f"width must be an even number >= 2, got {self.width}")
        if self.n_residual < 0:
            raise ArchitectureError("n_residual must be >= 0")


@dataclass(frozen=True)
class DiscriminatorSpec:
    kind: str = "patch"
    q: int = 35
    width: int = 128
    frames: int = 128  # input length; only binding for kind="full"

    def __post_init__(self):
        if self.kind not in DISCRIMINATOR_KINDS:
            raise ArchitectureError(
                f"unknown discriminator kind {self.kind!r}; expected one of {DISCRIMINATOR_KINDS}"
            )
        if self.q <= 0:
            raise ArchitectureError(f"feature dimension must be positive, got {self.q}")
        if self.width < 2 or self.width % 2:
            raise ArchitectureError(f"width must be an even number >= 2, got {self.width}")


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


class Network:
    """Named parameters plus a forward function built from them."""

    def __init__(self, spec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.params: dict[str, Grid] = {}
        self._rng = rng
        self._dtype = dtype
        self._forward: Callable[[Grid], Grid] = self._build()
        del self._rng

    # -- parameter factories ------------------------------------------------

    def _conv(self, name: str, cin: int, cout: int, k, stride=1, pad=None) -> OpParams:
        kh, kw = _pair(k)
        ph, pw = _pair(pad) if pad is not None else (kh // 2, kw // 2)
        fan_in = cin * kh * kw
        w = self._rng.standard_normal((cout, cin, kh, kw)) / np.sqrt(fan_in)
        kernel = ops.parameter(w.astype(self._dtype))
        bias = ops.parameter(np.zeros(cout, dtype=self._dtype))
        self.params[f"{name}.kernel"] = kernel
        self.params[f"{name}.bias"] = bias
        return OpParams(kernel, bias, _pair(stride), (ph, pw))

    def _norm(self, name: str, c: int) -> tuple[Grid, Grid]:
        gamma = ops.parameter(np.ones(c, dtype=self._dtype))
        beta = ops.parameter(np.zeros(c, dtype=self._dtype))
        self.params[f"{name}.gamma"] = gamma
        self.params[f"{name}.beta"] = beta
        return gamma, beta

    def _build(self) -> Callable[[Grid], Grid]:
        raise NotImplementedError

    # -- public surface -----------------------------------------------------

    def __call__(self, x: Grid) -> Grid:
        return self._forward(x)

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        """Copies of the parameter arrays, safe to keep across updates."""
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ArchitectureError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for k, p in self.params.items():
            a = arrays[k]
            if a.shape != p.data.shape:
                raise ArchitectureError(f"{k}: stored shape {a.shape} != expected {p.data.shape}")
            p.data = np.array(a, dtype=p.data.dtype, copy=True)


def _gated(x: Grid, conv: OpParams, norm=None, shuffle=None) -> Grid:
    h = ops.conv2d(x, conv)
    if shuffle is not None:
        h = ops.pixel_shuffle(h, shuffle)
    if norm is not None:
        h = ops.instance_norm(h, *norm)
    return ops.glu(h)


def _normed(x: Grid, conv: OpParams, norm) -> Grid:
    return ops.instance_norm(ops.conv2d(x, conv), *norm)


class Generator(Network):
    spec: GeneratorSpec

    @property
    def padded_q(self) -> int:
        q = self.spec.q
        return q if self.spec.kind == "1d" else -(-q // 4) * 4

    def _build(self):
        s = self.spec
        w = s.width
        trunk = 2 * w
        if s.kind == "1d":
            return self._build_1d(w, trunk)
        two_d_core = s.kind == "2d"
        qp = self.padded_q
        h4 = qp // 4

        stem = self._conv("stem", 1, w, (5, 15))
        down1 = self._conv("down1", w // 2, 2 * w, 5, stride=2)
        n_down1 = self._norm("down1.in", 2 * w)
        down2 = self._conv("down2", w, 4 * w, 5, stride=2)
        n_down2 = self._norm("down2.in", 4 * w)
        if two_d_core:
            res = self._residual_stack(trunk, (3, 3))
        else:
            pre = self._conv("pre_1x1", trunk * h4, trunk, 1)
            n_pre = self._norm("pre_1x1.in", trunk)
            res = self._residual_stack(trunk, (1, 3))
            post = self._conv("post_1x1", trunk, trunk * h4, 1)
            n_post = self._norm("post_1x1.in", trunk * h4)
        up1 = self._conv("up1", trunk, 8 * w, 5)
        n_up1 = self._norm("up1.in", 2 * w)
        up2 = self._conv("up2", w, 4 * w, 5)
        n_up2 = self._norm("up2.in", w)
        out = self._conv("out", w // 2, 1, (5, 15))
        q = s.q

        def forward(x: Grid) -> Grid:
            n, _, t = x.shape
            h = ops.reshape(x, (n, 1, q, t))
            if qp != q:
                h = ops.pad_height(h, 0, qp - q)
            h = ops.glu(ops.conv2d(h, stem))
            h = _gated(h, down1, n_down1)
            h = _gated(h, down2, n_down2)
            if two_d_core:
                h = res(h)
            else:
                c, hh, tt = h.shape[1:]
                h = ops.reshape(h, (n, c * hh, 1, tt))
                h = _normed(h, pre, n_pre)
                h = res(h)
                h = _normed(h, post, n_post)
                h = ops.reshape(h, (n, c, hh, tt))
            h = _gated(h, up1, n_up1, shuffle=2)
            h = _gated(h, up2, n_up2, shuffle=2)
            h = ops.conv2d(h, out)
            if qp != q:
                h = ops.crop_height(h, 0, q)
            return ops.reshape(h, (n, q, t))

        return forward

    def _residual_stack(self, c: int, k):
        blocks = []
        for i in range(self.spec.n_residual):
            c1 = self._conv(f"res{i}.conv1", c, 2 * c, k)
            n1 = self._norm(f"res{i}.in1", 2 * c)
            c2 = self._conv(f"res{i}.conv2", c, c, k)
            n2 = self._norm(f"res{i}.in2", c)
            blocks.append((c1, n1, c2, n2))

        def run(h: Grid) -> Grid:
            for c1, n1, c2, n2 in blocks:
                r = _gated(h, c1, n1)
                r = _normed(r, c2, n2)
                h = ops.add(h, r)
            return h

        return run

    def _build_1d(self, w: int, trunk: int):
        q = self.spec.q
        stem = self._conv("stem", q, w, (1, 15))
        down1 = self._conv("down1", w // 2, 2 * w, (1, 5), stride=(1, 2))
        n_down1 = self._norm("down1.in", 2 * w)
        down2 = self._conv("down2", w, 4 * w, (1, 5), stride=(1, 2))
        n_down2 = self._norm("down2.in", 4 * w)
        res = self._residual_stack(trunk, (1, 3))
        up1 = self._conv("up1", trunk, 8 * w, (1, 5))
        n_up1 = self._norm("up1.in", 4 * w)
        up2 = self._conv("up2", 2 * w, 4 * w, (1, 5))
        n_up2 = self._norm("up2.in", 2 * w)
        out = self._conv("out", w, q, (1, 15))

        def forward(x: Grid) -> Grid:
            n, _, t = x.shape
            h = ops.reshape(x, (n, q, 1, t))
            h = ops.glu(ops.conv2d(h, stem))
            h = _gated(h, down1, n_down1)
            h = _gated(h, down2, n_down2)
            h = res(h)
            h = _gated(h, up1, n_up1, shuffle=(1, 2))
            h = _gated(h, up2, n_up2, shuffle=(1, 2))
            h = ops.conv2d(h, out)
            return ops.reshape(h, (n, q, t))

        return forward


class Discriminator(Network):
    spec: DiscriminatorSpec

    def _build(self):
        s = self.spec
        w = s.width
        q = s.q
        c1 = self._conv("conv1", 1, w, 3)
        c2 = self._conv("conv2", w // 2, 2 * w, 3, stride=2)
        n2 = self._norm("conv2.in", 2 * w)
        c3 = self._conv("conv3", w, 4 * w, 3, stride=2)
        n3 = self._norm("conv3.in", 4 * w)
        h3 = ops.conv_output_size(ops.conv_output_size(q, 3, 2, 1), 3, 2, 1)
        kh4 = min(6, h3)
        c4 = self._conv("conv4", 2 * w, 8 * w, (kh4, 3), stride=(1, 2), pad=(0, 1))
        n4 = self._norm("conv4.in", 8 * w)
        if s.kind == "patch":
            head = self._conv("out", 4 * w, 1, (1, 3))
        else:
            t4 = s.frames
            for k, st, p in ((3, 2, 1), (3, 2, 1), (3, 2, 1)):
                t4 = ops.conv_output_size(t4, k, st, p)
            h4 = h3 - kh4 + 1
            if t4 < 1:
                raise ArchitectureError(f"frames={s.frames} too short for the full discriminator")
            head = self._conv("fc", 4 * w, 1, (h4, t4), pad=0)

        def forward(x: Grid) -> Grid:
            n, qq, t = x.shape
            if qq != q:
                raise ops.ShapeError(f"feature dimension {qq} != discriminator Q {q}")
            if s.kind == "full" and t != s.frames:
                raise ops.ShapeError(f"full discriminator needs T={s.frames}, got {t}")
            h = ops.reshape(x, (n, 1, q, t))
            h = ops.glu(ops.conv2d(h, c1))
            h = _gated(h, c2, n2)
            h = _gated(h, c3, n3)
            h = _gated(h, c4, n4)
            return ops.conv2d(h, head)

        return forward


def build_generator(spec: GeneratorSpec, seed: int, dtype=np.float32) -> Generator:
    return Generator(spec, np.random.default_rng(seed), dtype)


def build_discriminator(spec: DiscriminatorSpec, seed: int, dtype=np.float32) -> Discriminator:
    return Discriminator(spec, np.random.default_rng(seed), dtype)


def check_length(t: int) -> None:
    if t < 16 or t % 4:
        valid = max(16, -(-t // 4) * 4)
        raise ops.ShapeError(f"sequence length {t} must be a multiple of 4 and >= 16; pad to {valid}")


def generator_forward(g: Generator, x: np.ndarray) -> np.ndarray:
    """Convert one ``Q x T`` sequence (no gradient)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != g.spec.q:
        raise ops.ShapeError(f"expected a {g.spec.q} x T sequence, got shape {x.shape}")
    check_length(x.shape[1])
    dtype = next(iter(g.params.values())).dtype
    out = g(Grid(x[None].astype(dtype)))
    return out.data[0]


def convert_sequence(g: Generator, x: np.ndarray) -> np.ndarray:
    """Convert a sequence of any length by reflection-padding to a valid length."""
    t = x.shape[1]
    target = max(16, -(-t // 4) * 4)
    if target == t:
        return generator_forward(g, x)
    extra = target - t
    mode = "reflect" if t > extra else "symmetric"
    if t == 1:
        mode = "edge"
    padded = np.pad(x, ((0, 0), (0, extra)), mode=mode)
    while padded.shape[1] < target:  # symmetric padding of very short inputs
        padded = np.pad(padded, ((0, 0), (0, target - padded.shape[1])), mode="symmetric")
    return generator_forward(g, padded)[:, :t]


def discriminator_forward(d: Discriminator, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    dtype = next(iter(d.params.values())).dtype
    return d(Grid(x[None].astype(dtype))).data[0, 0]


def spec_dict(spec) -> dict:
    return asdict(spec)


@dataclass
class ModelSet:
    g_xy: Generator
    g_yx: Generator
    d_x: Discriminator
    d_y: Discriminator
    d2_x: Discriminator | None = None
    d2_y: Discriminator | None = None

    def generators(self) -> dict[str, Generator]:
        return {"g_xy": self.g_xy, "g_yx": self.g_yx}

    def discriminators(self) -> dict[str, Discriminator]:
        out = {"d_x": self.d_x, "d_y": self.d_y}
        if self.d2_x is not None:
            out["d2_x"] = self.d2_x
            out["d2_y"] = self.d2_y
        return out

    def networks(self) -> dict[str, Network]:
        return {**self.generators(), **self.discriminators()}


def build_model_set(
    g_spec: GeneratorSpec, d_spec: DiscriminatorSpec, adv_steps: int, seed: int, dtype=np.float32
) -> ModelSet:
    if adv_steps not in (1, 2):
        raise ValueError(f"adv_steps must be 1 or 2, got {adv_steps}")
    seeds = np.random.SeedSequence(seed).spawn(6)
    mk_g = lambda ss: Generator(g_spec, np.random.default_rng(ss), dtype)  # noqa: E731
    mk_d = lambda ss: Discriminator(d_spec, np.random.default_rng(ss), dtype)  # noqa: E731
    models = ModelSet(mk_g(seeds[0]), mk_g(seeds[1]), mk_d(seeds[2]), mk_d(seeds[3]))
    if adv_steps == 2:
        models.d2_x = mk_d(seeds[4])
        models.d2_y = mk_d(seeds[5])
    return models
