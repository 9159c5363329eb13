"""Bjontegaard delta rate between two rate/PSNR curves."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from numpy.polynomial import polynomial as P


def _integral(rates: np.ndarray, quality: np.ndarray, lo: float, hi: float) -> float:
    coeffs = P.polyfit(quality, np.log(rates), 3)
    integ = P.polyint(coeffs)
    return float(P.polyval(hi, integ) - P.polyval(lo, integ))


def bd_rate(
    anchor_rate: Sequence[float],
    anchor_psnr: Sequence[float],
    test_rate: Sequence[float],
    test_psnr: Sequence[float],
) -> float:
    """Average rate difference of ``test`` vs ``anchor`` in percent (negative = savings).

    Log-rate is fitted as a cubic in PSNR for each curve and both fits are
    integrated over the PSNR range the curves share.
    """
    ar, aq = np.asarray(anchor_rate, np.float64), np.asarray(anchor_psnr, np.float64)
    tr, tq = np.asarray(test_rate, np.float64), np.asarray(test_psnr, np.float64)
    for name, r, q in (("anchor", ar, aq), ("test", tr, tq)):
        if r.size < 4 or r.size != q.size:
            raise ValueError(f"{name} curve needs at least 4 (rate, psnr) points")
        if np.any(r <= 0):
            raise ValueError(f"{name} rates must be positive")
    lo = max(aq.min(), tq.min())
    hi = min(aq.max(), tq.max())
    if not hi > lo:
        raise ValueError("curves do not overlap in quality")
    diff = (_integral(tr, tq, lo, hi) - _integral(ar, aq, lo, hi)) / (hi - lo)
    return float(np.expm1(diff) * 100.0)


__all__ = ["bd_rate"]
