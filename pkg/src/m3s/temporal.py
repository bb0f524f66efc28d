"""Series branch: scale pyramid, cross-variable attention, spectrum-driven
1D-to-2D imaging, alternating dense/sparse token attention, amplitude-
weighted view fusion, and per-scale forecasting heads.

Dominant periods are mined once at the coarsest scale (where one FFT bin
spans the widest physical window) and re-indexed per scale, so the same
physical cycle folds each scale's sequence into its 2-D view.  Period
selection is a discrete top-k and carries no gradient; everything after it
is taped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ContractError
from .nn import (EXCLUDE, LayerNorm, Linear, Module, ModuleList,
                 scaled_dot_attention, sinusoidal_positions)
from .tensor import Tensor


def build_pyramid(x: Tensor, m_scales: int) -> list[Tensor]:
    """Progressive halving of (B, L, C) along time by window-2 mean pooling;
    an odd tail element survives as its own pool."""
    if x.ndim != 3:
        raise ContractError(f"pyramid input must be (B, L, C), got {x.shape}")
    length = x.shape[1]
    if m_scales < 0 or length < 2 ** m_scales:
        raise ConfigError(
            f"lookback {length} shorter than 2^{m_scales} scales")
    out = [x]
    for _ in range(m_scales):
        cur = out[-1]
        b, el, c = cur.shape
        even = el - el % 2
        pooled = T.mean(T.reshape(T.narrow(cur, 1, 0, even),
                                  (b, even // 2, 2, c)), axis=2)
        if el % 2:
            pooled = T.concat([pooled, T.narrow(cur, 1, even, 1)], axis=1)
        out.append(pooled)
    return out


class ChannelSelfAttention(Module):
    """Attention whose tokens are the variables and whose features are their
    whole coarsest-scale series; residual-added, shape preserved."""

    def __init__(self, length: int, rng):
        super().__init__()
        self.q = Linear(length, length, rng)
        self.k = Linear(length, length, rng)
        self.v = Linear(length, length, rng)
        self.length = length

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.length:
            raise ContractError(
                f"channel attention built for length {self.length}, got {x.shape}")
        tokens = T.transpose(x, (0, 2, 1))            # (B, C, L_M)
        out = scaled_dot_attention(self.q(tokens), self.k(tokens), self.v(tokens))
        return T.add(x, T.transpose(out, (0, 2, 1)))


@dataclass
class PeriodSet:
    """Top-k spectrum peaks of the coarsest scale, strongest first."""

    freqs: list[int] = field(default_factory=list)
    periods: list[int] = field(default_factory=list)
    amps: np.ndarray = field(default_factory=lambda: np.zeros(0))


def extract_periods(x: Tensor, k: int) -> PeriodSet:
    """Mine the k dominant non-DC frequencies of (L, D) or (B, L, D).

    Amplitudes are the spectrum magnitudes averaged over every non-time
    axis; k is clamped to the number of available bins.  Ties break toward
    the lower frequency for determinism.
    """
    if k < 1:
        raise ConfigError(f"period count must be >= 1, got {k}")
    time_axis = 0 if x.ndim == 2 else 1
    length = x.shape[time_axis]
    if length < 4:
        raise ConfigError(f"period mining needs length >= 4, got {length}")
    amps = T.rfft_amplitudes(x, axis=time_axis).numpy()
    mean_axes = tuple(i for i in range(amps.ndim) if i != time_axis)
    profile = amps.mean(axis=mean_axes) if mean_axes else amps
    profile = profile[1:]                              # drop DC
    k_eff = min(k, profile.shape[0])
    order = np.argsort(-profile, kind="stable")[:k_eff]
    freqs = [int(f) + 1 for f in order]
    periods = [int(round(length / f)) for f in freqs]
    return PeriodSet(freqs=freqs, periods=periods, amps=profile[order].copy())


def to_2d(x: Tensor, period: int) -> Tensor:
    """Fold (B, L, D) time into a (B, period, L'/period, D) grid, zero-padded
    to the next multiple of the period; rows are intra-period phase."""
    if period < 2:
        raise ContractError(f"period must be >= 2, got {period}")
    b, length, d = x.shape
    folds = -(-length // period)
    padded = folds * period
    if padded > length:
        x = T.concat([x, Tensor(np.zeros((b, padded - length, d)))], axis=1)
    z = T.reshape(x, (b, folds, period, d))
    return T.transpose(z, (0, 2, 1, 3))


def from_2d(z: Tensor, length: int) -> Tensor:
    """Inverse of to_2d: unfold and truncate the zero padding."""
    b, period, folds, d = z.shape
    x = T.reshape(T.transpose(z, (0, 2, 1, 3)), (b, period * folds, d))
    return T.narrow(x, 1, 0, length)


def _grid_real(p: int, f: int, n_real: int | None) -> np.ndarray:
    """Validity plane of a folded (p, f) grid: cell (i, j) holds series step
    j*p + i, so steps at or beyond n_real are fold padding.  Pad cells are
    excluded as attention keys: they carry no signal, and a layer-normalized
    all-zero row has unbounded curvature that would poison gradients."""
    if n_real is None:
        return np.ones((p, f), dtype=bool)
    i = np.arange(p)[:, None]
    j = np.arange(f)[None, :]
    return j * p + i < n_real


class _AttentionCore(Module):
    """Shared q/k/v/out projections plus the pointwise feed-forward that
    every token-attention layer in this branch wraps around."""

    def __init__(self, dim: int, rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, 2 * dim, rng)
        self.ff2 = Linear(2 * dim, dim, rng)

    def attend(self, tokens: Tensor, key_mask=None) -> Tensor:
        return self.out(scaled_dot_attention(
            self.q(tokens), self.k(tokens), self.v(tokens), key_mask=key_mask))

    def feed_forward(self, x: Tensor) -> Tensor:
        return T.add(x, self.ff2(T.gelu(self.ff1(self.norm2(x)))))


class DenseMSA(Module):
    """Self-attention inside non-overlapping window x window tiles (edge
    tiles smaller); tiles are batched by padding to full size and excluding
    pad keys exactly."""

    def __init__(self, dim: int, window: int, rng):
        super().__init__()
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        self.core = _AttentionCore(dim, rng)
        self.window = window

    def __call__(self, z: Tensor, n_real: int | None = None) -> Tensor:
        b, p, f, c = z.shape
        w = self.window
        np_, nf = -(-p // w), -(-f // w)
        p2, f2 = np_ * w, nf * w
        xn = self.core.norm1(z)
        if p2 > p:
            xn = T.concat([xn, Tensor(np.zeros((b, p2 - p, f, c)))], axis=1)
        if f2 > f:
            xn = T.concat([xn, Tensor(np.zeros((b, p2, f2 - f, c)))], axis=2)
        # (B, nP, W, nF, W, C) -> (B*nP*nF, W*W, C)
        tiles = T.reshape(T.transpose(
            T.reshape(xn, (b, np_, w, nf, w, c)), (0, 1, 3, 2, 4, 5)),
            (b * np_ * nf, w * w, c))
        valid = np.zeros((p2, f2), dtype=bool)
        valid[:p, :f] = _grid_real(p, f, n_real)
        key_real = valid.reshape(np_, w, nf, w).transpose(
            0, 2, 1, 3).reshape(np_ * nf, 1, w * w)
        mask = np.where(np.tile(key_real, (b, 1, 1)), 0.0, EXCLUDE)
        att = self.core.attend(tiles, key_mask=mask)
        att = T.reshape(T.transpose(
            T.reshape(att, (b, np_, nf, w, w, c)), (0, 1, 3, 2, 4, 5)),
            (b, p2, f2, c))
        att = T.narrow(T.narrow(att, 1, 0, p), 2, 0, f)
        y = T.add(z, att)
        return self.core.feed_forward(y)


class SparseMSA(Module):
    """Self-attention among tokens that share a position modulo the stride;
    the offset groups partition the token grid and are scattered back."""

    def __init__(self, dim: int, interval: int, rng):
        super().__init__()
        if interval < 1:
            raise ConfigError(f"interval must be >= 1, got {interval}")
        self.core = _AttentionCore(dim, rng)
        self.interval = interval

    def __call__(self, z: Tensor, n_real: int | None = None) -> Tensor:
        b, p, f, c = z.shape
        n = p * f
        stride = self.interval
        real_flat = _grid_real(p, f, n_real).reshape(n)
        xn = T.reshape(self.core.norm1(z), (b, n, c))
        groups = [np.arange(o, n, stride) for o in range(stride)]
        groups = [g for g in groups if g.size]
        gmax = max(g.size for g in groups)
        stacked, key_real = [], []
        for g in groups:
            grp = T.gather(xn, 1, g)
            if g.size < gmax:
                grp = T.concat([grp, Tensor(np.zeros((b, gmax - g.size, c)))], axis=1)
            stacked.append(T.reshape(grp, (b, 1, gmax, c)))
            kr = np.zeros(gmax, dtype=bool)
            kr[:g.size] = real_flat[g]
            key_real.append(kr)
        tiles = T.reshape(T.concat(stacked, axis=1), (b * len(groups), gmax, c))
        key_real = np.stack(key_real)[:, None, :]      # (G, 1, gmax)
        mask = np.where(np.tile(key_real, (b, 1, 1)), 0.0, EXCLUDE)
        att = self.core.attend(tiles, key_mask=mask)
        att = T.reshape(att, (b, len(groups), gmax, c))
        pieces = [T.narrow(T.reshape(T.narrow(att, 1, i, 1), (b, gmax, c)),
                           1, 0, g.size)
                  for i, g in enumerate(groups)]
        perm = np.concatenate(groups)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(n)
        flat = T.gather(T.concat(pieces, axis=1), 1, inv)
        y = T.add(z, T.reshape(flat, (b, p, f, c)))
        return self.core.feed_forward(y)


class RetractableStack(Module):
    """depth x [dense, sparse] with independent parameters per layer."""

    def __init__(self, dim: int, window: int, interval: int, depth: int, rng):
        super().__init__()
        if depth < 1:
            raise ConfigError(f"depth must be >= 1, got {depth}")
        layers = []
        for _ in range(depth):
            layers.append(DenseMSA(dim, window, rng))
            layers.append(SparseMSA(dim, interval, rng))
        self.layers = ModuleList(layers)

    def __call__(self, z: Tensor, n_real: int | None = None) -> Tensor:
        for layer in self.layers:
            z = layer(z, n_real=n_real)
        return z


def fuse_amplitude_weighted(views: list[Tensor], amps: np.ndarray) -> Tensor:
    """Softmax-weighted sum of per-period views; amplitudes are constants."""
    if len(views) != amps.shape[0]:
        raise ContractError(f"{len(views)} views vs {amps.shape[0]} amplitudes")
    shifted = amps - amps.max()
    weights = np.exp(shifted)
    weights = weights / weights.sum()
    acc = T.mul(views[0], Tensor(np.asarray(weights[0])))
    for wgt, view in zip(weights[1:], views[1:]):
        acc = T.add(acc, T.mul(view, Tensor(np.asarray(wgt))))
    return acc


class HeadOverTime(Module):
    """Linear map along the time axis: (B, L_m, D) -> (B, L+tau, D)."""

    def __init__(self, l_in: int, l_out: int, rng):
        super().__init__()
        bound = math.sqrt(6.0 / l_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(l_in, l_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros((l_out, 1)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(T.transpose(x, (0, 2, 1)), self.weight)
        return T.add(T.transpose(y, (0, 2, 1)), self.bias)


class TemporalBranch(Module):
    """Full series pipeline; emits (B, L+tau, d_model)."""

    def __init__(self, n_vars: int, lookback: int, tau: int, rng,
                 d_model: int = 128, m_scales: int = 2, k_periods: int = 3,
                 window: int = 4, interval: int = 4, depth: int = 2,
                 coarsest_only: bool = False):
        super().__init__()
        if lookback < 2 ** m_scales:
            raise ConfigError(f"lookback {lookback} < 2^{m_scales}")
        self.lengths = [lookback]
        for _ in range(m_scales):
            self.lengths.append(-(-self.lengths[-1] // 2))
        if self.lengths[-1] < 4:
            raise ConfigError(
                f"coarsest scale length {self.lengths[-1]} too short to mine periods")
        self.csa = ChannelSelfAttention(self.lengths[-1], rng)
        self.embed = Linear(n_vars, d_model, rng)
        self.stacks = ModuleList([
            RetractableStack(d_model, window, interval, depth, rng)
            for _ in self.lengths])
        self.heads = ModuleList([
            HeadOverTime(el, lookback + tau, rng) for el in self.lengths])
        self.m_scales = m_scales
        self.k_periods = k_periods
        self.d_model = d_model
        self.tau = tau
        self.coarsest_only = coarsest_only
        self._pe = [sinusoidal_positions(el, d_model) for el in self.lengths]

    def __call__(self, x: Tensor, period_set: PeriodSet | None = None) -> Tensor:
        """Optionally reuse a precomputed PeriodSet: the top-k selection and
        its amplitude weights are discrete/detached, so freezing them makes
        the taped gradient the exact derivative of this call."""
        pyr = build_pyramid(x, self.m_scales)
        pyr[-1] = self.csa(pyr[-1])
        emb = [T.add(self.embed(s), Tensor(pe)) for s, pe in zip(pyr, self._pe)]
        pset = (extract_periods(emb[-1], self.k_periods)
                if period_set is None else period_set)
        fused = []
        for m, (e, stack) in enumerate(zip(emb, self.stacks)):
            el = self.lengths[m]
            views = []
            for p in pset.periods:
                p_m = min(max(p * 2 ** (self.m_scales - m), 2), el)
                views.append(from_2d(stack(to_2d(e, p_m), n_real=el), el))
            fused.append(fuse_amplitude_weighted(views, pset.amps))
        if self.coarsest_only:
            return self.heads[-1](fused[-1])
        outs = [head(h) for head, h in zip(self.heads, fused)]
        acc = outs[0]
        for o in outs[1:]:
            acc = T.add(acc, o)
        return T.mul(acc, Tensor(np.asarray(1.0 / len(outs))))


__all__ = [
    "build_pyramid", "ChannelSelfAttention", "PeriodSet", "extract_periods",
    "to_2d", "from_2d", "DenseMSA", "SparseMSA", "RetractableStack",
    "fuse_amplitude_weighted", "HeadOverTime", "TemporalBranch",
]
