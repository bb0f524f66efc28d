"""Cross-modal selective state-space fusion and the forecast decoder.

Two modality streams are scanned by paired diagonal state-space recurrences
whose output (C) projections are swapped: the visual stream's hidden state is
read out through the C vectors generated from the series stream and vice
versa, so each modality's dynamics are interrogated from the other's point
of view.  The concatenated scan outputs are projected and decoded into the
horizon by a single causal-masked attention layer over learned query slots.
"""

from __future__ import annotations

import math

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError
from .nn import EXCLUDE, LayerNorm, Linear, Module
from .tensor import Tensor

# |A| below this is treated as the A -> 0 limit in the ZOH input matrix.
_ZOH_GUARD = 1e-12


def ssm_discretize(a: Tensor, b: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretization of a diagonal system.

    a: (N,) diagonal state matrix (negative for stability).
    b: (..., N) input projections per position.
    delta: (..., 1) positive step sizes.
    Returns a_bar = exp(delta*a) and b_bar = (a_bar - 1)/a * b, with the
    (a_bar - 1)/a factor replaced by its delta limit where |a| vanishes.
    """
    da = T.mul(delta, a)
    a_bar = T.exp(da)
    small = np.abs(a.data) < _ZOH_GUARD
    # a entries in the guarded lanes are replaced by 1 so the division stays
    # finite; where() then discards those lanes in favor of the delta limit.
    a_safe = T.add(a, Tensor(np.where(small, 1.0, 0.0)))
    limit = T.mul(delta, Tensor(np.ones(a.shape)))
    factor = T.where(small, limit,
                     T.div(T.sub(a_bar, Tensor(np.asarray(1.0))), a_safe))
    return a_bar, T.mul(factor, b)


def selective_scan(x: Tensor, a_log: Tensor, bk: Tensor, ck: Tensor,
                   delta: Tensor, d_skip: Tensor) -> Tensor:
    """Sequential diagonal SSM:  h_k = a_bar_k h_{k-1} + b_bar_k x_k,
    y_k = <c_k, h_k> + d ⊙ x_k.

    x: (B, L, D); bk, ck: (B, L, N); delta: (B, L, 1); a_log: (N,) with
    A = -exp(a_log); d_skip: (D,).  Each of the D channels carries its own
    N-dimensional state; parameters a_bar/b_bar/c are shared across channels.
    Returns y of shape (B, L, D).
    """
    bsz, length, dim = x.shape
    n = a_log.shape[0]
    a = T.neg(T.exp(a_log))
    a_bar, b_bar = ssm_discretize(a, bk, delta)      # (B, L, N) each
    # u[k] = b_bar_k ⊗ x_k drives every channel's state: (B, L, D, N)
    u = T.mul(T.reshape(b_bar, (bsz, length, 1, n)),
              T.reshape(x, (bsz, length, dim, 1)))
    h = T.zeros((bsz, dim, n))
    ys = []
    for k in range(length):
        ak = T.reshape(T.narrow(a_bar, 1, k, 1), (bsz, 1, n))
        uk = T.reshape(T.narrow(u, 1, k, 1), (bsz, dim, n))
        h = T.add(T.mul(ak, h), uk)
        ckk = T.reshape(T.narrow(ck, 1, k, 1), (bsz, 1, n))
        yk = T.sum_(T.mul(h, ckk), axis=2)           # (B, D)
        ys.append(T.reshape(yk, (bsz, 1, dim)))
    y = T.concat(ys, axis=1)
    return T.add(y, T.mul(x, d_skip))


class SSMParamGen(Module):
    """Input-dependent scan parameters for one modality."""

    def __init__(self, d_model: int, n_state: int, rng: np.random.Generator,
                 delta_init: float = 0.05):
        super().__init__()
        self.in_proj = Linear(d_model, 2 * d_model, rng)
        self.b_proj = Linear(d_model, n_state, rng)
        self.c_proj = Linear(d_model, n_state, rng)
        self.delta_proj = Linear(d_model, 1, rng)
        # softplus(bias) == delta_init when the projection weight is near 0
        self.delta_proj.bias = Tensor(
            np.full(1, math.log(math.expm1(delta_init))), requires_grad=True)
        self.a_log = Tensor(np.log(np.arange(1, n_state + 1, dtype=np.float64)),
                            requires_grad=True)
        self.d_skip = Tensor(np.ones(d_model), requires_grad=True)
        self.out_proj = Linear(d_model, d_model, rng)
        self.norm = LayerNorm(d_model)

    def generate(self, x: Tensor):
        """Returns (inner, gate, bk, ck, delta) from a (B, L, D) input."""
        xn = self.norm(x)
        xz = self.in_proj(xn)
        d = x.shape[-1]
        inner = T.narrow(xz, 2, 0, d)
        gate = T.narrow(xz, 2, d, d)
        bk = self.b_proj(inner)
        ck = self.c_proj(inner)
        delta = T.softplus(self.delta_proj(inner))
        return inner, gate, bk, ck, delta


class SelectiveSSMBlock(Module):
    """Single-modality scan block: norm -> scan -> gate -> project -> residual."""

    def __init__(self, d_model: int, n_state: int, rng: np.random.Generator):
        super().__init__()
        self.params = SSMParamGen(d_model, n_state, rng)

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        inner, gate, bk, ck, delta = p.generate(x)
        y = selective_scan(inner, p.a_log, bk, ck, delta, p.d_skip)
        y = T.mul(y, nn.silu(gate))
        return T.add(x, p.out_proj(y))


class CrossModalFusionBlock(Module):
    """Paired scans with swapped C projections (Y_S reads through C_I and
    Y_I through C_S), followed by per-modality gating and projection."""

    def __init__(self, d_model: int, n_state: int, rng: np.random.Generator):
        super().__init__()
        self.params_s = SSMParamGen(d_model, n_state, rng)
        self.params_i = SSMParamGen(d_model, n_state, rng)

    def __call__(self, x_s: Tensor, x_i: Tensor) -> tuple[Tensor, Tensor]:
        if x_s.shape != x_i.shape:
            raise ContractError(
                f"cross-modal scan needs aligned inputs, got {x_s.shape} vs {x_i.shape}")
        ps, pi = self.params_s, self.params_i
        inner_s, gate_s, b_s, c_s, delta_s = ps.generate(x_s)
        inner_i, gate_i, b_i, c_i, delta_i = pi.generate(x_i)
        y_s = selective_scan(inner_s, ps.a_log, b_s, c_i, delta_s, ps.d_skip)
        y_i = selective_scan(inner_i, pi.a_log, b_i, c_s, delta_i, pi.d_skip)
        y_s = T.add(x_s, ps.out_proj(T.mul(y_s, nn.silu(gate_s))))
        y_i = T.add(x_i, pi.out_proj(T.mul(y_i, nn.silu(gate_i))))
        return y_s, y_i


def align_lengths(x_s: Tensor, x_i: Tensor) -> tuple[Tensor, Tensor]:
    """Right-pad x_s (B, T, D) to x_i's length (B, L+tau, D) by replicating
    its final row; x_i passes through unchanged."""
    if x_s.ndim != 3 or x_i.ndim != 3:
        raise ContractError("align_lengths expects (B, T, D) features")
    t_s, t_i = x_s.shape[1], x_i.shape[1]
    if t_s == 0 or t_i == 0:
        raise ContractError("cannot align an empty feature sequence")
    if t_s > t_i:
        raise ContractError(f"visual feature longer than temporal ({t_s} > {t_i})")
    if t_s == t_i:
        return x_s, x_i
    last = T.narrow(x_s, 1, t_s - 1, 1)
    pads = T.gather(last, 1, np.zeros(t_i - t_s, dtype=np.intp))
    return T.concat([x_s, pads], axis=1), x_i


class ForecastDecoder(Module):
    """tau learned query slots, causal self-attention among them, cross
    attention into the fused sequence, then a scalar head per slot."""

    def __init__(self, d_model: int, tau: int, rng: np.random.Generator,
                 n_heads: int = 4):
        super().__init__()
        if d_model % n_heads:
            raise ContractError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.queries = Tensor(rng.normal(scale=0.02, size=(tau, d_model)),
                              requires_grad=True)
        self.norm_q = LayerNorm(d_model)
        self.self_q = Linear(d_model, d_model, rng)
        self.self_k = Linear(d_model, d_model, rng)
        self.self_v = Linear(d_model, d_model, rng)
        self.self_out = Linear(d_model, d_model, rng)
        self.norm_x = LayerNorm(d_model)
        self.cross_q = Linear(d_model, d_model, rng)
        self.cross_k = Linear(d_model, d_model, rng)
        self.cross_v = Linear(d_model, d_model, rng)
        self.cross_out = Linear(d_model, d_model, rng)
        self.norm_ff = LayerNorm(d_model)
        self.ff1 = Linear(d_model, 4 * d_model, rng)
        self.ff2 = Linear(4 * d_model, d_model, rng)
        self.head = Linear(d_model, 1, rng)
        self.tau = tau
        self.n_heads = n_heads
        causal = np.triu(np.ones((tau, tau)), k=1)
        self._causal_mask = np.where(causal > 0, EXCLUDE, 0.0)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        hd = d // self.n_heads
        return T.transpose(T.reshape(x, (b, t, self.n_heads, hd)), (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, t, hd = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * hd))

    def __call__(self, h_fusion: Tensor) -> Tensor:
        """(B, L_f, D) fused sequence -> (B, tau) normalized forecasts."""
        bsz = h_fusion.shape[0]
        q = T.gather(T.reshape(self.queries, (1, self.tau, -1)), 0,
                     np.zeros(bsz, dtype=np.intp))
        qn = self.norm_q(q)
        attn = nn.scaled_dot_attention(
            self._split_heads(self.self_q(qn)),
            self._split_heads(self.self_k(qn)),
            self._split_heads(self.self_v(qn)),
            key_mask=self._causal_mask)
        q = T.add(q, self.self_out(self._merge_heads(attn)))
        qn = self.norm_x(q)
        mem = h_fusion
        attn = nn.scaled_dot_attention(
            self._split_heads(self.cross_q(qn)),
            self._split_heads(self.cross_k(mem)),
            self._split_heads(self.cross_v(mem)))
        q = T.add(q, self.cross_out(self._merge_heads(attn)))
        qn = self.norm_ff(q)
        q = T.add(q, self.ff2(T.gelu(self.ff1(qn))))
        out = self.head(q)                            # (B, tau, 1)
        return T.reshape(out, (bsz, self.tau))


class ScanFusion(Module):
    """Full-model fusion: align, cross-modal scan, concat, linear, decode."""

    def __init__(self, d_model: int, n_state: int, tau: int,
                 rng: np.random.Generator):
        super().__init__()
        self.scan = CrossModalFusionBlock(d_model, n_state, rng)
        self.fuse = Linear(2 * d_model, d_model, rng)
        self.decoder = ForecastDecoder(d_model, tau, rng)

    def __call__(self, x_s: Tensor, x_i: Tensor) -> Tensor:
        x_s, x_i = align_lengths(x_s, x_i)
        y_s, y_i = self.scan(x_s, x_i)
        h = self.fuse(T.concat([y_s, y_i], axis=2))
        return self.decoder(h)


class ConcatFusion(Module):
    """Scan ablation: align, concat, linear, decode (no state-space block).

    With ``mixer=True`` an extra pointwise GeLU MLP runs before decoding."""

    def __init__(self, d_model: int, tau: int, rng: np.random.Generator,
                 mixer: bool = False):
        super().__init__()
        self.fuse = Linear(2 * d_model, d_model, rng)
        if mixer:
            self.mix1 = Linear(d_model, d_model, rng)
            self.mix2 = Linear(d_model, d_model, rng)
        self._mixer = mixer
        self.decoder = ForecastDecoder(d_model, tau, rng)

    def __call__(self, x_s: Tensor, x_i: Tensor) -> Tensor:
        x_s, x_i = align_lengths(x_s, x_i)
        h = self.fuse(T.concat([x_s, x_i], axis=2))
        if self._mixer:
            h = T.add(h, self.mix2(T.gelu(self.mix1(h))))
        return self.decoder(h)


class TemporalOnlyFusion(Module):
    """Visual-free head: decode straight from the temporal feature."""

    def __init__(self, d_model: int, tau: int, rng: np.random.Generator):
        super().__init__()
        self.decoder = ForecastDecoder(d_model, tau, rng)

    def __call__(self, x_i: Tensor) -> Tensor:
        return self.decoder(x_i)


__all__ = [
    "ssm_discretize", "selective_scan", "SSMParamGen", "SelectiveSSMBlock",
    "CrossModalFusionBlock", "align_lengths", "ForecastDecoder",
    "ScanFusion", "ConcatFusion", "TemporalOnlyFusion",
]
