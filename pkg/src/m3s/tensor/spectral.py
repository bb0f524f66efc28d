"""Real-input spectrum magnitudes for period mining.

The spectrum is taken at the native sequence length (bins 0..floor(L/2)), so
it agrees with the textbook O(L^2) DFT to machine precision at every length,
not only powers of two.  Period selection is a discrete choice, so the op is
deliberately non-differentiable: it returns a detached tensor and records
nothing on the tape.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .core import Tensor, as_tensor


def rfft_amplitudes(x, axis: int = -1) -> Tensor:
    """Magnitudes |X_f| of the real FFT along ``axis``, bins 0..floor(L/2).

    Output replaces the length-L axis with floor(L/2)+1 amplitude bins.
    The result is detached from the autodiff tape.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    length = x.shape[axis]
    if length < 2:
        raise ShapeError(f"rfft_amplitudes needs axis length >= 2, got {length}")
    amps = np.abs(np.fft.rfft(x.data, axis=axis))
    return Tensor(np.ascontiguousarray(amps))


__all__ = ["rfft_amplitudes"]
