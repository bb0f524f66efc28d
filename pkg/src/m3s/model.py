"""Scheme-level model assembly.

Schemes (ablation ladder):
  full         both branches, cross-modal scan fusion
  A            series branch only, straight to the decoder
  B            plain strided-conv encoder, concat fusion
  C            full graph with the multi-scale split interaction disabled
  D            full visual branch, concat fusion with a pointwise mixer
  E            full graph with only the coarsest forecasting head
  F            full graph minus the scan block (concat fusion)
  persistence  parameter-free last-value baseline
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import SCHEMES
from .data import TARGET_COL
from .errors import ConfigError, ContractError
from .fusion import ConcatFusion, ScanFusion, TemporalOnlyFusion
from .nn import Module, seeded_rng
from .temporal import TemporalBranch
from .tensor import Tensor
from .visual import SCSMConfig, VisualBranch


class Forecaster(Module):
    """A visual branch (optional), a temporal branch, and a fusion head.

    The head predicts residuals over the last observed irradiance, so an
    untrained model starts at the persistence baseline and training only
    has to learn corrections."""

    def __init__(self, visual, temporal, fusion, tau: int):
        super().__init__()
        if visual is not None:
            self.visual = visual
        self.temporal = temporal
        self.fusion = fusion
        self.tau = tau
        self._has_visual = visual is not None

    def __call__(self, series: Tensor, frames: Tensor | None = None,
                 want_seg: bool = False, period_set=None):
        """series (B, L, C); frames (B, T, 3, H, W) when the scheme uses
        them.  Returns (forecast (B, tau), seg logits or None)."""
        x_i = self.temporal(series, period_set=period_set)
        if not self._has_visual:
            out, seg = self.fusion(x_i), None
        else:
            if frames is None:
                raise ContractError("this scheme requires image frames")
            x_s, seg = self.visual.forward_sequence(frames, want_seg=want_seg)
            out = self.fusion(x_s, x_i)
        b, length, _ = series.shape
        last = T.reshape(
            T.narrow(T.narrow(series, 1, length - 1, 1), 2, TARGET_COL, 1),
            (b, 1))
        return T.add(out, last), seg


class Persistence(Module):
    """Repeats the final lookback irradiance value across the horizon."""

    def __init__(self, tau: int, target_col: int = 0):
        super().__init__()
        self.tau = tau
        self.target_col = target_col

    def __call__(self, series: Tensor, frames=None, want_seg: bool = False,
                 period_set=None):
        b, length, _ = series.shape
        last = T.narrow(T.narrow(series, 1, length - 1, 1), 2, self.target_col, 1)
        rep = T.gather(last, 1, np.zeros(self.tau, dtype=np.intp))
        return T.reshape(rep, (b, self.tau)), None


def build_model(cfg, n_vars: int) -> Module:
    """Assemble the scheme named by cfg (an ExperimentConfig-like object)."""
    if cfg.scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {cfg.scheme!r}; pick one of {SCHEMES}")
    if cfg.scheme == "persistence":
        return Persistence(cfg.tau)

    rng = seeded_rng(cfg.seed)
    scsm = SCSMConfig(k1=cfg.k1, d1=cfg.d1, k2=cfg.k2, d2=cfg.d2,
                      r=cfg.partial_ratio, lambda_init=cfg.lambda_init)
    temporal = TemporalBranch(
        n_vars=n_vars, lookback=cfg.lookback, tau=cfg.tau, rng=rng,
        d_model=cfg.d_model, m_scales=cfg.m_scales, k_periods=cfg.k_periods,
        window=cfg.window, interval=cfg.interval, depth=cfg.depth,
        coarsest_only=(cfg.scheme == "E"))

    if cfg.scheme == "A":
        return Forecaster(None, temporal,
                          TemporalOnlyFusion(cfg.d_model, cfg.tau, rng), cfg.tau)

    visual = VisualBranch(
        rng, cfg=scsm, base=cfg.base_channels, n_stages=cfg.n_stages,
        d_model=cfg.d_model, n_state=cfg.n_state,
        use_scsm=(cfg.scheme != "C"), plain=(cfg.scheme == "B"))

    if cfg.scheme in ("full", "C", "E"):
        fusion = ScanFusion(cfg.d_model, cfg.n_state, cfg.tau, rng)
    elif cfg.scheme in ("B", "F"):
        fusion = ConcatFusion(cfg.d_model, cfg.tau, rng, mixer=False)
    else:                                            # scheme D
        fusion = ConcatFusion(cfg.d_model, cfg.tau, rng, mixer=True)
    return Forecaster(visual, temporal, fusion, cfg.tau)


__all__ = ["SCHEMES", "Forecaster", "Persistence", "build_model"]
