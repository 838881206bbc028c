"""Spatial attenuation context module.

A module pass reduces its input with a 1x1 convolution, disperses the
reduced map with damped directional scans (one per attenuation factor and
direction), blends the scan outputs with learned per-pixel attention over
the factors, and repeats for a configurable number of rounds before a 1x1
exit projection back to the module width.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .ops import (ConvParams, GroupNormParams, VjpFn, conv2d, conv_init,
                  group_norm, group_norm_init, pick_group_count, relu,
                  softmax_over_factors)
from .tensor import ShapeError, Tensor

DIRECTIONS = ("up", "down", "left", "right")

# scan axis in NCHW terms and whether the scan runs against ascending index
_DIR_AXIS = {"up": (2, False), "down": (2, True),
             "left": (3, False), "right": (3, True)}


def alpha_schedule(n: int) -> list[float]:
    """Attenuation factors (n-k)/n for k = 1..n, strongest damping first."""
    if n < 1:
        raise ValueError("need at least one attenuation factor")
    return [(n - k) / n for k in range(1, n + 1)]


@dataclass
class ScanParams:
    """One directional scan: damping factor plus per-channel negative slope."""

    direction: str
    alpha: float
    beta: np.ndarray

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class SacConfig:
    n: int = 3
    rounds: int = 2
    width: int = 64
    beta_init: float = 0.1
    learn_beta: bool = True
    attention_hidden: Optional[int] = None  # None -> width
    gn_groups: Optional[int] = None         # None -> min(32, C) divisor rule
    directions: tuple = DIRECTIONS
    uniform_attention: bool = False

    def __post_init__(self):
        if self.n < 1 or self.rounds < 1:
            raise ValueError("n and rounds must be >= 1")
        if self.width // self.n < 1:
            raise ValueError(f"width {self.width} too narrow for n={self.n}")
        bad = [d for d in self.directions if d not in DIRECTIONS]
        if bad or not self.directions:
            raise ValueError(f"bad direction set {self.directions}")
        # canonical order keeps fusion layout deterministic
        object.__setattr__(self, "directions",
                           tuple(d for d in DIRECTIONS if d in self.directions))

    @property
    def per_map(self) -> int:
        return self.width // self.n

    @property
    def hidden(self) -> int:
        return self.attention_hidden or self.width

    @property
    def fused_channels(self) -> int:
        return len(self.directions) * self.n * self.per_map


@dataclass
class PsiWeights:
    """Attention trunk: 3x3 conv, GN, ReLU, 3x3 conv, GN, ReLU, 1x1 conv."""

    conv1: ConvParams
    gn1: GroupNormParams
    conv2: ConvParams
    gn2: GroupNormParams
    conv3: ConvParams

    def astype(self, dtype) -> "PsiWeights":
        return PsiWeights(self.conv1.astype(dtype), self.gn1.astype(dtype),
                          self.conv2.astype(dtype), self.gn2.astype(dtype),
                          self.conv3.astype(dtype))


@dataclass
class RoundWeights:
    # betas[d, k] is the per-channel negative slope for direction d, factor k
    betas: np.ndarray
    psi: Optional[PsiWeights]
    reduce: Optional[ConvParams]

    def astype(self, dtype) -> "RoundWeights":
        return RoundWeights(self.betas.astype(dtype),
                            self.psi.astype(dtype) if self.psi else None,
                            self.reduce.astype(dtype) if self.reduce else None)


@dataclass
class SacWeights:
    entry: ConvParams
    rounds: list[RoundWeights]
    exit_conv: ConvParams
    exit_gn: GroupNormParams

    def astype(self, dtype) -> "SacWeights":
        return SacWeights(self.entry.astype(dtype),
                          [r.astype(dtype) for r in self.rounds],
                          self.exit_conv.astype(dtype),
                          self.exit_gn.astype(dtype))

    def named_params(self):
        yield "entry.kernel", self.entry.kernel
        yield "entry.bias", self.entry.bias
        for i, r in enumerate(self.rounds):
            yield f"round{i}.betas", r.betas
            if r.psi is not None:
                p = r.psi
                for tag, conv in (("conv1", p.conv1), ("conv2", p.conv2), ("conv3", p.conv3)):
                    yield f"round{i}.psi.{tag}.kernel", conv.kernel
                    yield f"round{i}.psi.{tag}.bias", conv.bias
                for tag, gn in (("gn1", p.gn1), ("gn2", p.gn2)):
                    yield f"round{i}.psi.{tag}.gamma", gn.gamma
                    yield f"round{i}.psi.{tag}.beta", gn.beta
            if r.reduce is not None:
                yield f"round{i}.reduce.kernel", r.reduce.kernel
                yield f"round{i}.reduce.bias", r.reduce.bias
        yield "exit_conv.kernel", self.exit_conv.kernel
        yield "exit_conv.bias", self.exit_conv.bias
        yield "exit_gn.gamma", self.exit_gn.gamma
        yield "exit_gn.beta", self.exit_gn.beta


def sac_init(cfg: SacConfig, rng: np.random.Generator, dtype=np.float32) -> SacWeights:
    """Fresh module weights; scan slopes start at ``cfg.beta_init``."""
    n, cpm, w = cfg.n, cfg.per_map, cfg.width
    nd = len(cfg.directions)

    def gn(channels):
        cap = cfg.gn_groups or 32
        return group_norm_init(channels, dtype=dtype,
                               groups=pick_group_count(channels, cap))

    rounds = []
    for r in range(cfg.rounds):
        betas = np.full((nd, n, cpm), cfg.beta_init, dtype=dtype)
        psi = None
        if not cfg.uniform_attention:
            hid = cfg.hidden
            psi = PsiWeights(
                conv_init(hid, w, 3, rng, dtype=dtype), gn(hid),
                conv_init(hid, hid, 3, rng, dtype=dtype), gn(hid),
                conv_init(n, hid, 1, rng, dtype=dtype),
            )
        reduce = None
        if r < cfg.rounds - 1:
            reduce = conv_init(cpm, cfg.fused_channels, 1, rng, dtype=dtype)
        rounds.append(RoundWeights(betas, psi, reduce))
    return SacWeights(
        entry=conv_init(cpm, w, 1, rng, dtype=dtype),
        rounds=rounds,
        exit_conv=conv_init(w, cfg.fused_channels, 1, rng, dtype=dtype),
        exit_gn=gn(w),
    )


# ---------------------------------------------------------------------------
# directional scan


def _scan_core(xs: np.ndarray, decays: np.ndarray, betas: np.ndarray, axis: int):
    """Damped recurrence along ``axis`` (ascending) for stacked lanes.

    xs: (L, B, C, H, W); decays: (L,); betas: (L, C).  Returns the scanned
    features and the pre-activation carries needed by the backward pass.
    Elementwise arithmetic matches a per-pixel unrolled recurrence bit for
    bit, which the oracle tests rely on.
    """
    steps = xs.shape[axis]
    l, _, c, _, _ = xs.shape
    dec = decays.reshape(l, 1, 1, 1)
    bet = betas.reshape(l, 1, c, 1)
    r = np.empty_like(xs)
    f = np.empty_like(xs)
    idx = [slice(None)] * 5

    def at(i):
        idx[axis] = i
        return tuple(idx)

    prev = np.zeros_like(xs[at(0)])
    for i in range(steps):
        ri = xs[at(i)] + dec * prev
        r[at(i)] = ri
        prev = np.maximum(ri, 0) + bet * np.minimum(ri, 0)
        f[at(i)] = prev
    return f, r


def _scan_core_vjp(g: np.ndarray, r: np.ndarray, decays: np.ndarray,
                   betas: np.ndarray, axis: int):
    """Reverse scan carrying the cotangent; returns (dx, dbeta (L, C))."""
    steps = r.shape[axis]
    l, _, c, _, _ = r.shape
    dec = decays.reshape(l, 1, 1, 1)
    bet = betas.reshape(l, 1, c, 1)
    dx = np.empty_like(r)
    dbeta = np.zeros((l, c), dtype=r.dtype)
    idx = [slice(None)] * 5

    def at(i):
        idx[axis] = i
        return tuple(idx)

    dr_next = np.zeros_like(r[at(0)])
    for i in reversed(range(steps)):
        ri = r[at(i)]
        ci = g[at(i)] + dec * dr_next
        dbeta += (ci * np.minimum(ri, 0)).sum(axis=(1, 3))
        dr_next = np.where(ri >= 0, ci, bet * ci)
        dx[at(i)] = dr_next
    return dx, dbeta


def attenuated_scan(x: Tensor, p: ScanParams) -> tuple[Tensor, VjpFn]:
    """Propagate features along one direction with damping ``alpha``.

    Carry update per pixel: r = (1 - alpha) * f_prev + x, then
    f = max(r, 0) + beta_c * min(r, 0); the state before the first scanned
    row/column is zero.  alpha is a fixed hyperparameter; vjp returns
    (dx, dbeta).
    """
    b, c, h, w = x.shape
    beta = np.asarray(p.beta, dtype=x.data.dtype)
    if beta.shape != (c,):
        raise ShapeError(f"beta length {beta.shape} != channel count {c}")
    axis, rev = _DIR_AXIS[p.direction]
    saxis = axis + 1  # lane dim in front
    xs = x.data[None]
    if rev:
        xs = np.flip(xs, saxis)
    decays = np.array([1.0 - p.alpha], dtype=x.data.dtype)
    f, r = _scan_core(np.ascontiguousarray(xs), decays, beta[None], saxis)
    out = np.flip(f, saxis)[0] if rev else f[0]

    def vjp(g: np.ndarray):
        gs = g[None]
        if rev:
            gs = np.flip(gs, saxis)
        dx, dbeta = _scan_core_vjp(np.ascontiguousarray(gs), r, decays,
                                   beta[None], saxis)
        dx = np.flip(dx, saxis)[0] if rev else dx[0]
        return np.ascontiguousarray(dx), dbeta[0]

    return Tensor(np.ascontiguousarray(out)), vjp


def _round_scans(m: np.ndarray, betas: np.ndarray, alphas: Sequence[float],
                 directions: Sequence[str]):
    """All (direction, factor) scans of one round, batched by orientation.

    Returns scans[k][d] arrays (directions in the given order) and a vjp
    mapping same-nested cotangents to (dm, dbetas).
    """
    n = len(alphas)
    dtype = m.dtype
    scans: list[list] = [[None] * len(directions) for _ in range(n)]
    ctx = []
    for axis in (2, 3):
        lanes = [(di, k) for di, d in enumerate(directions)
                 if _DIR_AXIS[d][0] == axis for k in range(n)]
        if not lanes:
            continue
        saxis = axis + 1
        xs = np.empty((len(lanes),) + m.shape, dtype=dtype)
        dec = np.empty(len(lanes), dtype=dtype)
        bet = np.empty((len(lanes), m.shape[1]), dtype=dtype)
        for li, (di, k) in enumerate(lanes):
            rev = _DIR_AXIS[directions[di]][1]
            xs[li] = np.flip(m, axis) if rev else m
            dec[li] = dtype.type(1.0 - alphas[k])
            bet[li] = betas[di, k]
        f, r = _scan_core(xs, dec, bet, saxis)
        for li, (di, k) in enumerate(lanes):
            rev = _DIR_AXIS[directions[di]][1]
            fi = np.flip(f[li], axis) if rev else f[li]
            scans[k][di] = np.ascontiguousarray(fi)
        ctx.append((axis, lanes, r, dec, bet))

    def vjp(g_nested):
        dm = np.zeros_like(m)
        dbetas = np.zeros_like(betas)
        for axis, lanes, r, dec, bet in ctx:
            saxis = axis + 1
            gs = np.empty_like(r)
            for li, (di, k) in enumerate(lanes):
                rev = _DIR_AXIS[directions[di]][1]
                gi = g_nested[k][di]
                gs[li] = np.flip(gi, axis) if rev else gi
            dx, dbeta_l = _scan_core_vjp(gs, r, dec, bet, saxis)
            for li, (di, k) in enumerate(lanes):
                rev = _DIR_AXIS[directions[di]][1]
                dxi = np.flip(dx[li], axis) if rev else dx[li]
                dm += dxi
                dbetas[di, k] += dbeta_l[li]
        return dm, dbetas

    return scans, vjp


# ---------------------------------------------------------------------------
# attention and fusion


def attention_weights(feat: Tensor, psi: PsiWeights) -> tuple[Tensor, VjpFn]:
    """Per-pixel softmax weights over the attenuation factors.

    vjp -> (dfeat, grads) with grads keyed conv1/gn1/conv2/gn2/conv3.
    """
    a1, v1 = conv2d(feat, psi.conv1)
    a2, v2 = group_norm(a1, psi.gn1)
    a3, v3 = relu(a2)
    a4, v4 = conv2d(a3, psi.conv2)
    a5, v5 = group_norm(a4, psi.gn2)
    a6, v6 = relu(a5)
    a7, v7 = conv2d(a6, psi.conv3)
    w, v8 = softmax_over_factors(a7)

    def vjp(g: np.ndarray):
        (d7,) = v8(g)
        d6, k3, b3 = v7(d7)
        (d5,) = v6(d6)
        d4, g2, be2 = v5(d5)
        d3, k2, b2 = v4(d4)
        (d2,) = v3(d3)
        d1, g1, be1 = v2(d2)
        dfeat, k1, b1 = v1(d1)
        grads = {"conv1.kernel": k1, "conv1.bias": b1,
                 "gn1.gamma": g1, "gn1.beta": be1,
                 "conv2.kernel": k2, "conv2.bias": b2,
                 "gn2.gamma": g2, "gn2.beta": be2,
                 "conv3.kernel": k3, "conv3.bias": b3}
        return dfeat, grads

    return w, vjp


def fuse_round(scans: Sequence[Sequence[Tensor]], weights: Tensor) -> tuple[Tensor, VjpFn]:
    """Attention-weighted concatenation of the scan outputs.

    ``scans[k]`` holds one tensor per direction for factor k; each factor
    block is the direction concat scaled channel-wise by the factor's
    weight map.  Blocks are concatenated in factor order.
    vjp -> (nested scan cotangents, dweights).
    """
    n = len(scans)
    wd = weights.data
    if wd.shape[1] != n:
        raise ShapeError(f"fuse_round: {wd.shape[1]} weight channels for {n} factors")
    cats = []
    blocks = []
    for k in range(n):
        cat = np.concatenate([t.data for t in scans[k]], axis=1)
        cats.append(cat)
        blocks.append(cat * wd[:, k:k + 1])
    out = np.concatenate(blocks, axis=1)
    nd = len(scans[0])
    cpm = cats[0].shape[1] // nd

    def vjp(g: np.ndarray):
        dweights = np.empty_like(wd)
        dnested = []
        block_c = nd * cpm
        for k in range(n):
            gb = g[:, k * block_c:(k + 1) * block_c]
            dweights[:, k] = (gb * cats[k]).sum(axis=1)
            dcat = gb * wd[:, k:k + 1]
            dnested.append([np.ascontiguousarray(dcat[:, d * cpm:(d + 1) * cpm])
                            for d in range(nd)])
        return dnested, dweights

    return Tensor(out), vjp


# ---------------------------------------------------------------------------
# full module


def sac_forward(feat: Tensor, cfg: SacConfig, wts: SacWeights) -> tuple[Tensor, VjpFn]:
    """Full module pass: entry reduction, scan/fuse rounds, exit projection.

    Output spatial size and channel count match the input.  vjp returns
    (dfeat, grads) with grads keyed by the names of ``wts.named_params``.
    """
    b, c, h, w = feat.shape
    if c != cfg.width:
        raise ShapeError(f"sac_forward: input has {c} channels, config width {cfg.width}")
    alphas = alpha_schedule(cfg.n)
    dirs = cfg.directions
    dtype = feat.data.dtype

    m_t, vjp_entry = conv2d(feat, wts.entry)
    m = m_t.data
    rounds_ctx = []
    fused = None
    for r in range(cfg.rounds):
        rw = wts.rounds[r]
        if cfg.uniform_attention:
            watt = Tensor(np.full((b, cfg.n, h, w), 1.0 / cfg.n, dtype=dtype))
            vjp_att = None
        else:
            watt, vjp_att = attention_weights(feat, rw.psi)
        scans, vjp_scans = _round_scans(m, rw.betas, alphas, dirs)
        scan_ts = [[Tensor(scans[k][d]) for d in range(len(dirs))]
                   for k in range(cfg.n)]
        fused, vjp_fuse = fuse_round(scan_ts, watt)
        vjp_reduce = None
        if r < cfg.rounds - 1:
            m_t, vjp_reduce = conv2d(fused, rw.reduce)
            m = m_t.data
        rounds_ctx.append((vjp_att, vjp_scans, vjp_fuse, vjp_reduce))

    z1, vjp_exit = conv2d(fused, wts.exit_conv)
    z2, vjp_gn = group_norm(z1, wts.exit_gn)
    out, vjp_relu = relu(z2)

    def vjp(g: np.ndarray):
        grads: dict[str, np.ndarray] = {}
        (dz2,) = vjp_relu(g)
        dz1, dgam, dbet = vjp_gn(dz2)
        grads["exit_gn.gamma"] = dgam
        grads["exit_gn.beta"] = dbet
        dfused, dk, db = vjp_exit(dz1)
        grads["exit_conv.kernel"] = dk
        grads["exit_conv.bias"] = db
        dfeat = np.zeros((b, c, h, w), dtype=g.dtype)
        dm = None
        for r in reversed(range(cfg.rounds)):
            vjp_att, vjp_scans, vjp_fuse, vjp_reduce = rounds_ctx[r]
            if dm is not None:
                # cotangent entering through the next round's reduction conv
                dfused, drk, drb = vjp_reduce(dm)
                grads[f"round{r}.reduce.kernel"] = drk
                grads[f"round{r}.reduce.bias"] = drb
            dnested, dwatt = vjp_fuse(dfused)
            dm, dbetas = vjp_scans(dnested)
            grads[f"round{r}.betas"] = dbetas
            if vjp_att is not None:
                dfeat_att, psi_grads = vjp_att(dwatt)
                dfeat += dfeat_att
                for k2, v2_ in psi_grads.items():
                    grads[f"round{r}.psi.{k2}"] = v2_
        dfeat_entry, dek, deb = vjp_entry(dm)
        grads["entry.kernel"] = dek
        grads["entry.bias"] = deb
        dfeat += dfeat_entry
        return dfeat, grads

    return out, vjp


def uniform_variant(cfg: SacConfig, wts: SacWeights) -> tuple[SacConfig, SacWeights]:
    """The same module with attention removed (constant 1/n weights)."""
    ucfg = replace(cfg, uniform_attention=True)
    urounds = [RoundWeights(r.betas, None, r.reduce) for r in wts.rounds]
    return ucfg, SacWeights(wts.entry, urounds, wts.exit_conv, wts.exit_gn)
