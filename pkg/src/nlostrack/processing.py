"""Histogram pipeline: calibration offset, windowing, background removal, peak fits.

Turns a raw counting histogram into fitted return peaks, each a center
time (relative to the laser-at-wall instant) with a Gaussian width. The
width feeds the back-projection as the thickness of the time-of-flight
ellipse, so it is the fitted pulse sigma, not the statistical standard
error of the center (the latter is also reported on the estimate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import signal as _signal

from .acquisition import TransientHistogram


class NonConvergenceError(RuntimeError):
    """The peak fit ran out of iterations without meeting its tolerance."""


class DegenerateFitError(RuntimeError):
    """Two fitted peak centers collapsed onto the same bin."""


@dataclass(frozen=True)
class TimeWindow:
    """Crop bounds in seconds, relative to the laser-at-wall instant."""

    start_s: float
    end_s: float

    def __post_init__(self):
        if not (math.isfinite(self.start_s) and math.isfinite(self.end_s)):
            raise ValueError("window bounds must be finite")
        if self.start_s < 0 or self.end_s <= self.start_s:
            raise ValueError(f"need 0 <= start_s < end_s, got [{self.start_s}, {self.end_s}]")


@dataclass(frozen=True)
class PeakEstimate:
    """A fitted return: center time t_s, Gaussian width sigma_s, height in counts."""

    t_s: float
    sigma_s: float
    amplitude: float
    pixel_index: int
    center_stderr_s: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.t_s)):
            raise ValueError("t_s must be finite")
        if not (self.sigma_s > 0):
            raise ValueError(f"sigma_s must be > 0, got {self.sigma_s!r}")
        if not (self.amplitude > 0):
            raise ValueError(f"amplitude must be > 0, got {self.amplitude!r}")


def apply_offset(hist: TransientHistogram, t0_s: float) -> TransientHistogram:
    """Shift the histogram's time reference by t0_s. Metadata only, no rebinning."""
    if abs(t0_s) >= hist.span_s:
        raise ValueError(f"|t0_s| must be < histogram span {hist.span_s!r}")
    if t0_s == 0.0:
        return hist
    return replace(hist, t0_offset_s=hist.t0_offset_s + t0_s)


def _canonical_times(hist: TransientHistogram) -> np.ndarray:
    # Bin centers, with the one-period wrap produced by a negative calibration
    # offset undone: a raw histogram is cyclic over the repetition period, so
    # centers that land at negative times really belong one period later.
    t = hist.bin_centers_s()
    return np.where(t < 0, t + hist.span_s, t)


def crop(hist: TransientHistogram, window: TimeWindow) -> TransientHistogram:
    """Keep only bins whose centers fall inside the window.

    Handles the cyclic seam of a calibrated full-period histogram: bins are
    re-ordered by their canonical (unwrapped) time if the selection crosses
    the wrap point, so the result is always contiguous in time.
    """
    canon = _canonical_times(hist)
    mask = (canon >= window.start_s) & (canon < window.end_s)
    if not mask.any():
        raise ValueError(
            f"window [{window.start_s}, {window.end_s}] does not intersect the histogram"
        )
    order = np.argsort(canon[mask], kind="stable")
    times = canon[mask][order]
    gaps = np.diff(times)
    if gaps.size and not np.allclose(gaps, hist.bin_width_s, rtol=1e-9, atol=0.0):
        raise ValueError("selected bins are not contiguous in time")  # defensive
    return TransientHistogram(
        counts=hist.counts[mask][order],
        bin_width_s=hist.bin_width_s,
        t0_offset_s=float(times[0] - 0.5 * hist.bin_width_s),
        pixel_index=hist.pixel_index,
        acq_time_s=hist.acq_time_s,
    )


def _require_same_shape(a: TransientHistogram, b: TransientHistogram):
    if a.num_bins != b.num_bins:
        raise ValueError(f"histogram length mismatch: {a.num_bins} vs {b.num_bins}")
    if a.bin_width_s != b.bin_width_s:
        raise ValueError(f"bin width mismatch: {a.bin_width_s} vs {b.bin_width_s}")
    if a.t0_offset_s != b.t0_offset_s:
        raise ValueError(f"time reference mismatch: {a.t0_offset_s} vs {b.t0_offset_s}")


def subtract_background(hist: TransientHistogram, background: TransientHistogram) -> TransientHistogram:
    """Per-bin difference, clamped at zero so counts stay counts."""
    _require_same_shape(hist, background)
    diff = np.maximum(hist.counts - background.counts, 0)
    return replace(hist, counts=diff)


def estimate_background_median(frames: list[TransientHistogram]) -> TransientHistogram:
    """Per-bin lower median over repeated frames; robust to a target present in a few."""
    if len(frames) < 3:
        raise ValueError(f"need at least 3 frames for a median background, got {len(frames)}")
    first = frames[0]
    for f in frames[1:]:
        _require_same_shape(first, f)
    stacked = np.stack([f.counts for f in frames])
    stacked.sort(axis=0)
    lower_median = stacked[(len(frames) - 1) // 2]
    return replace(first, counts=lower_median)


def detect_peaks(
    hist: TransientHistogram,
    max_peaks: int = 1,
    min_snr: float = 4.0,
    irf_sigma_s: float = 120e-12,
) -> list[tuple[int, float]]:
    """Rough peak candidates to seed the Gaussian fit.

    Smooths with a moving average matched to the instrument response,
    thresholds local maxima at min_snr * sqrt(median level + 1), enforces a
    minimum separation of 3 instrument sigmas, and returns up to max_peaks
    (bin index, rough amplitude) pairs, strongest first. An empty list
    means nothing cleared the threshold; that is not an error.
    """
    if max_peaks < 1:
        raise ValueError("max_peaks must be >= 1")
    w = max(1, round(irf_sigma_s / hist.bin_width_s))
    counts = hist.counts.astype(np.float64)
    smooth = np.convolve(counts, np.ones(w) / w, mode="same")
    threshold = min_snr * math.sqrt(float(np.median(smooth)) + 1.0)
    sep_bins = max(1, round(3.0 * irf_sigma_s / hist.bin_width_s))
    idx, props = _signal.find_peaks(smooth, height=threshold, distance=sep_bins)
    if idx.size == 0:
        return []
    order = np.argsort(props["peak_heights"])[::-1][:max_peaks]
    out = []
    for i in idx[order]:
        lo, hi = max(0, i - w), min(hist.num_bins, i + w + 1)
        out.append((int(i), float(counts[lo:hi].max())))
    return out


# ---------------------------------------------------------------------------
# Gaussian-mixture least squares (damped Gauss-Newton with Levenberg damping)
# ---------------------------------------------------------------------------


def _mixture(tau, params):
    # params: [floor, A_0, mu_0, s_0, A_1, mu_1, s_1, ...] on the tau axis
    y = np.full_like(tau, params[0])
    for k in range((len(params) - 1) // 3):
        a, mu, s = params[1 + 3 * k : 4 + 3 * k]
        y += a * np.exp(-0.5 * ((tau - mu) / s) ** 2)
    return y


def _mixture_jacobian(tau, params):
    n_peaks = (len(params) - 1) // 3
    jac = np.empty((tau.size, 1 + 3 * n_peaks))
    jac[:, 0] = 1.0
    for k in range(n_peaks):
        a, mu, s = params[1 + 3 * k : 4 + 3 * k]
        u = (tau - mu) / s
        g = np.exp(-0.5 * u * u)
        jac[:, 1 + 3 * k] = g
        jac[:, 2 + 3 * k] = a * g * u / s
        jac[:, 3 + 3 * k] = a * g * u * u / s
    return jac


def fit_gaussian_mixture(
    tau: np.ndarray,
    y: np.ndarray,
    p0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    max_iter: int = 200,
):
    """Bounded least-squares fit of a constant floor plus Gaussian peaks.

    Levenberg-damped Gauss-Newton with parameter clipping to the box
    bounds. Returns (params, residual_norm, covariance). Raises
    NonConvergenceError when no acceptable step is found within max_iter.
    """
    p = np.clip(np.asarray(p0, dtype=np.float64), lower, upper)
    r = _mixture(tau, p) - y
    cost = float(r @ r)
    lam = 1e-3
    converged = cost <= 1e-30
    stalled = 0
    for _ in range(max_iter):
        if converged:
            break
        jac = _mixture_jacobian(tau, p)
        jtj = jac.T @ jac
        g = jac.T @ r
        accepted = False
        for _ in range(60):
            damp = jtj + lam * np.diag(np.diag(jtj) + 1e-12)
            try:
                step = np.linalg.solve(damp, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            p_new = np.clip(p + step, lower, upper)
            r_new = _mixture(tau, p_new) - y
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                rel_drop = (cost - cost_new) / max(cost, 1e-300)
                moved = float(np.max(np.abs(p_new - p)))
                p, r, cost = p_new, r_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                # A run of negligible improvements (typical with a parameter
                # pinned at its bound) counts as a settled fit.
                stalled = stalled + 1 if rel_drop < 1e-9 else 0
                if rel_drop < 1e-12 or moved < 1e-15 or cost <= 1e-30 or stalled >= 3:
                    converged = True
                break
            lam *= 4.0
            if lam > 1e14:
                break
        if not accepted:
            # No downhill step at any damping: stationary point reached.
            converged = True
    if not converged:
        raise NonConvergenceError(f"no convergence within {max_iter} iterations, cost={cost:.3e}")
    jac = _mixture_jacobian(tau, p)
    jtj = jac.T @ jac
    dof = max(tau.size - p.size, 1)
    try:
        cov = np.linalg.inv(jtj) * (cost / dof)
    except np.linalg.LinAlgError:
        cov = np.full((p.size, p.size), np.nan)
    return p, math.sqrt(cost), cov


def fit_peaks(
    hist: TransientHistogram,
    seeds: list[tuple[int, float]],
    irf_sigma_guess: float = 120e-12,
    max_iter: int = 200,
) -> list[PeakEstimate]:
    """Least-squares fit of a sum of Gaussians plus a constant floor.

    Seeded by detect_peaks output. Centers are bounded to the histogram
    extent and sigmas to [bin width, 10 * irf_sigma_guess]. Components
    whose amplitude fits to zero are dropped.
    """
    if not seeds:
        raise ValueError("seeds must be non-empty")
    # Fit on a nanosecond axis so the normal equations stay well conditioned.
    scale = 1e-9
    t = hist.bin_centers_s()
    tau = (t - t[0]) / scale
    y = hist.counts.astype(np.float64)
    bw = hist.bin_width_s / scale
    sig0 = max(irf_sigma_guess / scale, bw)
    sig_hi = 10.0 * irf_sigma_guess / scale

    p0 = [float(np.median(y))]
    lower = [0.0]
    upper = [max(float(y.max()), 1.0)]
    for bin_idx, amp in seeds:
        p0 += [max(float(amp), 1.0), float(tau[bin_idx]), sig0]
        lower += [1e-12, float(tau[0]), bw]
        upper += [np.inf, float(tau[-1]), sig_hi]
    params, _, cov = fit_gaussian_mixture(
        tau, y, np.array(p0), np.array(lower), np.array(upper), max_iter=max_iter
    )

    n_peaks = len(seeds)
    centers = [params[2 + 3 * k] for k in range(n_peaks)]
    for a in range(n_peaks):
        for b in range(a + 1, n_peaks):
            if abs(centers[a] - centers[b]) < bw:
                raise DegenerateFitError(
                    f"fitted centers {a} and {b} collapsed within one bin"
                )
    out = []
    for k in range(n_peaks):
        amp, mu, s = params[1 + 3 * k : 4 + 3 * k]
        if amp <= 1e-9:
            continue
        var_mu = cov[2 + 3 * k, 2 + 3 * k]
        stderr = math.sqrt(var_mu) * scale if np.isfinite(var_mu) and var_mu > 0 else 0.0
        out.append(
            PeakEstimate(
                t_s=float(t[0] + mu * scale),
                sigma_s=float(s * scale),
                amplitude=float(amp),
                pixel_index=hist.pixel_index,
                center_stderr_s=stderr,
            )
        )
    return out
