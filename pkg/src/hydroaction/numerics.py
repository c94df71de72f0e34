"""Small numerical helpers shared by the engines."""

import numpy as np
from scipy.integrate import simpson

from .errors import QuadratureError


def integrate_samples(times, values, rtol=1e-8, atol=1e-10, strict=True):
    """Composite Simpson with a Richardson error estimate from the half grid.

    Returns ``(integral, error_estimate)``. With ``strict`` a
    :class:`QuadratureError` is raised when the estimate exceeds
    ``atol + rtol |integral|``.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(times)
    if n < 2:
        return 0.0, 0.0
    if n < 5:
        return float(np.trapezoid(values, times)), np.inf if strict else 0.0
    fine = float(simpson(values, x=times))
    idx = np.arange(0, n, 2)
    if idx[-1] != n - 1:
        idx = np.append(idx, n - 1)
    coarse = float(simpson(values[idx], x=times[idx]))
    err = abs(fine - coarse) / 15.0
    if strict and err > atol + rtol * abs(fine):
        raise QuadratureError(
            f"quadrature error estimate {err:.3e} exceeds tolerance; "
            f"refine the output grid (currently {n} points, try {2 * n - 1})"
        )
    return fine, err


def cumulative_simpson(times, values):
    """Running integral on the sample grid (trapezoid corrected by Simpson pairs)."""
    from scipy.integrate import cumulative_simpson as _cs

    return np.concatenate([[0.0], _cs(np.asarray(values, float), x=np.asarray(times, float))])


def loglog_slope(x, y):
    """Least-squares slope of ``log|y|`` against ``log x``."""
    x = np.asarray(x, dtype=float)
    y = np.abs(np.asarray(y, dtype=float))
    if len(x) < 2 or np.any(y <= 0):
        return np.nan
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def decreasing_trend(x, y, slope_threshold=-0.3):
    """Trend test on ``|y|``: strictly decreasing, or log-log slope below the threshold.

    Returns ``(passed, strict, slope)``.
    """
    ay = np.abs(np.asarray(y, dtype=float))
    strict = bool(np.all(np.diff(ay) < 0))
    slope = loglog_slope(x, ay)
    return strict or (np.isfinite(slope) and slope < slope_threshold), strict, slope
