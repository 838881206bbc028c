"""Differentiable primitive layers.

Every forward returns ``(Tensor, vjp)`` where ``vjp`` maps an output
cotangent array to the cotangents of the op's differentiable inputs, in
declaration order.  ``grad_check`` validates any such pair against central
finite differences computed on a float64 twin of the same function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor

VjpFn = Callable[[np.ndarray], tuple]


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvParams:
    """2-D convolution weights: kernel (out_c, in_c, kh, kw) plus bias."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        oc, ic, kh, kw = self.kernel.shape
        if kh not in (1, 3) or kw not in (1, 3):
            raise ShapeError(f"kernel size must be 1 or 3, got {kh}x{kw}")
        if self.bias.shape != (oc,):
            raise ShapeError(f"bias length {self.bias.shape} != out channels {oc}")

    def astype(self, dtype) -> "ConvParams":
        return ConvParams(self.kernel.astype(dtype), self.bias.astype(dtype),
                          self.stride, self.padding)


def conv_init(out_c: int, in_c: int, k: int, rng: np.random.Generator,
              stride: int = 1, dtype=np.float32) -> ConvParams:
    """He-normal kernel, zero bias, 'same' padding for stride 1."""
    fan_in = in_c * k * k
    kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))
    return ConvParams(kernel.astype(dtype), np.zeros(out_c, dtype=dtype),
                      stride=stride, padding=k // 2)


@dataclass
class GroupNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    groups: int
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.shape[0]
        if self.beta.shape != (c,):
            raise ShapeError("gamma/beta length mismatch")
        if c % self.groups != 0:
            raise ShapeError(f"groups {self.groups} does not divide channels {c}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def astype(self, dtype) -> "GroupNormParams":
        return GroupNormParams(self.gamma.astype(dtype), self.beta.astype(dtype),
                               self.groups, self.eps)


def pick_group_count(channels: int, cap: int = 32) -> int:
    """min(cap, C), falling back to the largest divisor of C that is <= cap."""
    g = min(cap, channels)
    while channels % g != 0:
        g -= 1
    return g


def group_norm_init(channels: int, dtype=np.float32, groups: Optional[int] = None,
                    eps: float = 1e-5) -> GroupNormParams:
    if groups is None:
        groups = pick_group_count(channels)
    return GroupNormParams(np.ones(channels, dtype=dtype),
                           np.zeros(channels, dtype=dtype), groups, eps)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, p: ConvParams) -> tuple[Tensor, VjpFn]:
    """Direct 2-D convolution (cross-correlation) with stride and zero padding.

    Lowered to one GEMM per batch over unfolded patches; arithmetic is
    deterministic for a fixed environment.  vjp -> (dx, dkernel, dbias).
    """
    b, c, h, w = x.shape
    oc, ic, kh, kw = p.kernel.shape
    if ic != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ic}")
    s, pad = p.stride, p.padding
    oh = (h + 2 * pad - kh) // s + 1
    ow = (w + 2 * pad - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: output would be empty for input {tuple(x.shape)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    patches = np.empty((b, ic, kh, kw, oh, ow), dtype=x.data.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patches[:, :, dy, dx] = xp[:, :, dy:dy + s * (oh - 1) + 1:s,
                                       dx:dx + s * (ow - 1) + 1:s]
    cols = patches.reshape(b, ic * kh * kw, oh * ow)
    kmat = p.kernel.reshape(oc, ic * kh * kw)
    out = np.matmul(kmat, cols) + p.bias[:, None]
    y = Tensor(out.reshape(b, oc, oh, ow))

    def vjp(g: np.ndarray):
        gmat = g.reshape(b, oc, oh * ow)
        dbias = g.sum(axis=(0, 2, 3))
        dkernel = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
        dkernel = dkernel.reshape(oc, ic, kh, kw)
        dcols = np.matmul(kmat.T, gmat).reshape(b, ic, kh, kw, oh, ow)
        dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for dy in range(kh):
            for dx in range(kw):
                dxp[:, :, dy:dy + s * (oh - 1) + 1:s,
                    dx:dx + s * (ow - 1) + 1:s] += dcols[:, :, dy, dx]
        dx_ = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return dx_, dkernel, dbias

    return y, vjp


# ---------------------------------------------------------------------------
# group normalization


def group_norm(x: Tensor, p: GroupNormParams) -> tuple[Tensor, VjpFn]:
    """Per-(sample, group) standardization followed by a channel affine.

    vjp -> (dx, dgamma, dbeta).
    """
    b, c, h, w = x.shape
    g = p.groups
    if c % g != 0:
        raise ShapeError(f"group_norm: {g} groups do not divide {c} channels")
    cpg = c // g
    xr = x.data.reshape(b, g, cpg, h * w)
    mu = xr.mean(axis=(2, 3), keepdims=True)
    var = np.square(xr).mean(axis=(2, 3), keepdims=True) - np.square(mu)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(p.eps))
    x_hat = (xr - mu) * inv_std
    gamma_r = p.gamma.reshape(g, cpg, 1)
    y = x_hat * gamma_r + p.beta.reshape(g, cpg, 1)

    def vjp(gy: np.ndarray):
        gyr = gy.reshape(b, g, cpg, h * w)
        gy_sum_ch = gyr.sum(axis=3, keepdims=True)
        gy_xhat_sum_ch = (gyr * x_hat).sum(axis=3, keepdims=True)
        inv_n = 1.0 / (cpg * h * w)
        mean_gyg = (gamma_r * gy_sum_ch).sum(axis=2, keepdims=True) * inv_n
        mean_gyg_xhat = (gamma_r * gy_xhat_sum_ch).sum(axis=2, keepdims=True) * inv_n
        dx_ = inv_std * (gyr * gamma_r - mean_gyg - x_hat * mean_gyg_xhat)
        dgamma = gy_xhat_sum_ch.sum(axis=0).reshape(c)
        dbeta = gy_sum_ch.sum(axis=0).reshape(c)
        return dx_.reshape(b, c, h, w), dgamma, dbeta

    return Tensor(y.reshape(b, c, h, w)), vjp


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def relu(x: Tensor) -> tuple[Tensor, VjpFn]:
    mask = x.data > 0

    def vjp(g: np.ndarray):
        return (g * mask,)

    return Tensor(np.maximum(x.data, 0)), vjp


def sigmoid(x: Tensor) -> tuple[Tensor, VjpFn]:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)

    def vjp(g: np.ndarray):
        return (g * y * (1.0 - y),)

    return Tensor(y), vjp


def softmax_over_factors(logits: Tensor) -> tuple[Tensor, VjpFn]:
    """Per-pixel softmax across the channel axis (one channel per factor)."""
    if logits.shape.c == 0:
        raise ShapeError("softmax_over_factors: zero factor channels")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray):
        dot = (g * sm).sum(axis=1, keepdims=True)
        return (sm * (g - dot),)

    return Tensor(sm), vjp


# ---------------------------------------------------------------------------
# bilinear resize


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align-corners=false sampling with edge clamping
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    t = src - i0f
    i0 = np.clip(i0f, 0, n_in - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, n_in - 1).astype(np.intp)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m.astype(dtype)


_INTERP_CACHE: dict = {}


def _interp_matrix_cached(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _INTERP_CACHE.get(key)
    if m is None:
        m = _interp_matrix(n_in, n_out, dtype)
        _INTERP_CACHE[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> tuple[Tensor, VjpFn]:
    """Bilinear resample to (out_h, out_w); identity when sizes match."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: bad output size {out_h}x{out_w}")
    b, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        def vjp_id(g: np.ndarray):
            return (g,)
        return x, vjp_id

    mh = _interp_matrix_cached(h, out_h, x.data.dtype)
    mw = _interp_matrix_cached(w, out_w, x.data.dtype)
    y = np.matmul(np.matmul(mh, x.data), mw.T)

    def vjp(g: np.ndarray):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return Tensor(y), vjp


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple
    checked: int
    skipped_nonsmooth: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def worst(self) -> Optional[GradCheckEntry]:
        return max(self.entries, key=lambda e: e.max_rel_err, default=None)


def grad_check(fn: Callable, inputs: Sequence[np.ndarray], tolerance: float,
               *, vjp_dtype=np.float64, step: float = 1e-4,
               rng: Optional[np.random.Generator] = None,
               max_entries: int = 0, cotangent: str = "ones",
               names: Optional[Sequence[str]] = None) -> GradCheckReport:
    """Check a (forward, vjp) pair against central finite differences.

    ``fn(arrays) -> (out_array, vjp)`` must be dtype-generic: the analytic
    gradients run at ``vjp_dtype`` (the path under test), while the
    differences are always taken on the float64 twin of the same function.
    The cotangent is all ones by default; pass ``cotangent="random"`` for
    outputs whose entries sum to a constant (softmax weights), where the
    ones direction is degenerate.  Entries at non-differentiable points
    (one-sided differences disagree) are skipped rather than failed, and
    near-zero gradients are judged against their input's gradient scale.
    ``max_entries`` > 0 subsamples each input's entries for large checks.
    """
    rng = rng or np.random.default_rng(0)
    names = list(names) if names else [f"input{i}" for i in range(len(inputs))]
    x64 = [np.asarray(a, dtype=np.float64) for a in inputs]
    xv = [a.astype(vjp_dtype) for a in x64]

    out, vjp = fn(xv)
    if cotangent == "random":
        ct = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
    else:
        ct = np.ones(out.shape, dtype=np.float64)
    analytic = vjp(ct.astype(out.dtype))
    if len(analytic) != len(inputs):
        raise ValueError("vjp returned wrong number of cotangents")

    def f(arrays) -> float:
        o, _ = fn(arrays)
        return float(np.sum(o * ct, dtype=np.float64))

    f0 = f(x64)
    report = GradCheckReport(tolerance=tolerance)
    for idx, (a, g) in enumerate(zip(x64, analytic)):
        flat = a.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        gscale = max(float(np.abs(gflat).max(initial=0.0)), 1e-6)
        n = flat.size
        sel = np.arange(n)
        if max_entries and n > max_entries:
            sel = rng.choice(n, size=max_entries, replace=False)
            sel.sort()
        worst, worst_i, skipped = 0.0, (), 0
        for j in sel:
            orig = flat[j]
            flat[j] = orig + step
            fp = f(x64)
            flat[j] = orig - step
            fm = f(x64)
            flat[j] = orig
            central = (fp - fm) / (2 * step)
            right = (fp - f0) / step
            left = (f0 - fm) / step
            if abs(right - left) > 1e-2 * max(abs(central), 1.0):
                skipped += 1
                continue
            rel = abs(gflat[j] - central) / max(abs(gflat[j]), abs(central),
                                                1e-2 * gscale)
            if rel > worst:
                worst, worst_i = rel, np.unravel_index(j, a.shape)
        report.entries.append(GradCheckEntry(names[idx], worst, worst_i,
                                             len(sel) - skipped, skipped))
    return report
