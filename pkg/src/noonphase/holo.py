"""Four-step phase-shifting holography for classical and N00N acquisitions.

Each projection's fringe has a known sign: D, DD and AA images rise with
``cos`` of the total phase, A and DA images fall with it.  The sign table
below folds that into the arctangent, so every projection retrieves the
sample phase directly and the combiners only have to average.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit

from .errors import DataError, FitError

log = logging.getLogger(__name__)

CLASSICAL_ALPHAS = (0.0, np.pi / 2, np.pi, 3 * np.pi / 2)
NOON_ALPHAS = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)

# +1: image ~ 1 + V cos(total phase); -1: image ~ 1 - V cos(total phase)
FRINGE_SIGN = {"D": +1, "A": -1, "DD": +1, "AA": +1, "DA": -1}
KIND_OF = {"D": "classical", "A": "classical", "DD": "noon", "AA": "noon", "DA": "noon"}


def wrap(phase, half_range: float = np.pi):
    """Map angles into ``(-half_range, half_range]``."""
    return half_range - np.mod(half_range - np.asarray(phase, dtype=float), 2 * half_range)


@dataclass
class AcquisitionSet:
    """Four images of one projection taken at the four bias settings.

    ``alphas`` default to the standard steps of the acquisition kind.  Any
    common offset of the recorded biases is removed from the retrieved phase.
    """

    projection: str
    images: list
    alphas: tuple | None = None
    kind: str = field(init=False)

    def __post_init__(self):
        if self.projection not in FRINGE_SIGN:
            raise DataError(f"unknown projection {self.projection!r}")
        self.kind = KIND_OF[self.projection]
        if len(self.images) != 4:
            raise DataError(f"a phase-shifting set needs 4 images, got {len(self.images)}")
        self.images = [np.asarray(im, dtype=float) for im in self.images]
        shape = self.images[0].shape
        if any(im.shape != shape for im in self.images):
            raise DataError("all four images must share one shape")
        nominal = CLASSICAL_ALPHAS if self.kind == "classical" else NOON_ALPHAS
        if self.alphas is None:
            self.alphas = nominal
        self.alphas = tuple(float(a) for a in self.alphas)
        steps = np.diff(self.alphas)
        if len(self.alphas) != 4 or not np.allclose(steps, nominal[1], atol=1e-9):
            raise DataError(f"{self.kind} biases must be 4 steps of {nominal[1]:.6f} rad, got {self.alphas}")


@dataclass
class PhaseImage:
    """Wrapped phase map; ``valid`` marks pixels that carry a phase (others are NaN)."""

    phase: np.ndarray
    valid: np.ndarray
    half_range: float = np.pi
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.phase = np.asarray(self.phase, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.phase)
        self.phase = np.where(self.valid, wrap(np.where(self.valid, self.phase, 0.0), self.half_range), np.nan)

    @property
    def wrap_range(self) -> tuple[float, float]:
        return (-self.half_range, self.half_range)

    @property
    def shape(self):
        return self.phase.shape

    @property
    def n_masked(self) -> int:
        return int((~self.valid).sum())


def _retrieve(acq: AcquisitionSet, kind: str) -> PhaseImage:
    if acq.kind != kind:
        raise DataError(f"expected a {kind} acquisition, got {acq.kind} ({acq.projection})")
    i0, i1, i2, i3 = acq.images
    sign = FRINGE_SIGN[acq.projection]
    num = -sign * (i1 - i3)
    den = -sign * (i2 - i0)
    valid = ~((num == 0) & (den == 0))
    angle = np.arctan2(num, den)
    if kind == "classical":
        phase, half = angle - acq.alphas[0], np.pi
    else:
        phase, half = 0.5 * angle - acq.alphas[0], np.pi / 2
    return PhaseImage(phase, valid, half, {"projection": acq.projection})


def psdh_classical(acq: AcquisitionSet) -> PhaseImage:
    """Phase from four intensity images at biases 0, pi/2, pi, 3pi/2."""
    return _retrieve(acq, "classical")


def psdh_noon(acq: AcquisitionSet) -> PhaseImage:
    """Phase from four coincidence images at biases 0, pi/4, pi/2, 3pi/4.

    The two-photon fringe runs at twice the bias, so the arctangent is halved
    and the result lives in ``(-pi/2, pi/2]``.
    """
    return _retrieve(acq, "noon")


def _check_shapes(images):
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise DataError("phase images must share one shape")
    halves = {im.half_range for im in images}
    if len(halves) != 1:
        raise DataError("cannot combine phase images with different wrap ranges")


def _circular_mean(images, weights) -> PhaseImage:
    _check_shapes(images)
    half = images[0].half_range
    k = np.pi / half  # 1 for (-pi, pi], 2 for (-pi/2, pi/2]
    valid = np.logical_and.reduce([im.valid for im in images])
    resultant = np.zeros(images[0].shape, dtype=complex)
    total = np.zeros(images[0].shape)
    for im, w in zip(images, weights):
        w = np.broadcast_to(np.asarray(w, dtype=float), im.shape)
        resultant += w * np.exp(1j * k * np.where(im.valid, im.phase, 0.0))
        total += w
    # opposite estimates of equal weight leave no direction to report
    degenerate = np.abs(resultant) <= 1e-12 * np.maximum(total, 1e-300)
    valid &= ~degenerate
    return PhaseImage(np.angle(resultant) / k, valid, half)


def combine_classical(phi_d: PhaseImage, phi_a: PhaseImage) -> PhaseImage:
    """Equal-weight circular mean of the D and A retrievals."""
    out = _circular_mean([phi_d, phi_a], [0.5, 0.5])
    out.notes["weights"] = [0.5, 0.5]
    return out


def combine_noon(phi_dd: PhaseImage, phi_aa: PhaseImage, phi_da: PhaseImage, variances=None) -> PhaseImage:
    """Circular mean of the three N00N retrievals.

    The default weights are (1, 1, 2) / 4, the DA projection carrying twice
    the coincidences of either same-half projection.  Passing ``variances``
    (three scalars or per-pixel arrays) switches to inverse-variance weights.
    """
    if variances is None:
        weights = [0.25, 0.25, 0.5]
        label = weights
    else:
        inv = [1.0 / np.asarray(v, dtype=float) for v in variances]
        norm = inv[0] + inv[1] + inv[2]
        weights = [w / norm for w in inv]
        label = "inverse_variance"
    out = _circular_mean([phi_dd, phi_aa, phi_da], weights)
    out.notes["weights"] = label
    return out


def subtract_background(sample: PhaseImage, background: PhaseImage) -> PhaseImage:
    """Wrapped difference ``sample - background``; masks are combined."""
    if sample.shape != background.shape:
        raise DataError("sample and background phase images differ in shape")
    valid = sample.valid & background.valid
    diff = np.where(valid, sample.phase - background.phase, 0.0)
    notes = dict(sample.notes)
    notes["background_subtracted"] = True
    return PhaseImage(diff, valid, sample.half_range, notes)


# -- fringe fitting ---------------------------------------------------------


@dataclass
class FringeFit:
    """Fit of ``A (1 + V cos(2 pi alpha / T + c))`` with 1-sigma errors."""

    amplitude: float
    visibility: float
    period: float
    offset: float
    amplitude_err: float
    visibility_err: float
    period_err: float
    offset_err: float
    residual_rms: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def fringe_model(alpha, amplitude, visibility, period, offset):
    return amplitude * (1.0 + visibility * np.cos(2 * np.pi * alpha / period + offset))


def _periodogram_start(alpha, y, periods):
    best = None
    for period in periods:
        w = 2 * np.pi * alpha / period
        design = np.column_stack([np.ones_like(alpha), np.cos(w), np.sin(w)])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        rss = float(np.sum((design @ coef - y) ** 2))
        if best is None or rss < best[0]:
            best = (rss, period, coef)
    _, period, (c0, a, b) = best
    amp = max(abs(c0), 1e-12)
    vis = np.hypot(a, b) / amp
    # a cos w + b sin w = R cos(w - atan2(b, a))
    return [c0, min(vis, 1.0), period, -np.arctan2(b, a)]


def fit_fringe(alphas, counts, sigma=None, max_restarts: int = 8, seed: int = 0) -> FringeFit:
    """Fit a cosine fringe to totals measured over a bias scan.

    The period is initialised from a least-squares periodogram over periods
    between a quarter of the scan span and twice the span; the nonlinear fit
    is retried from jittered starts if it fails to converge.
    """
    alpha = np.asarray(alphas, dtype=float)
    y = np.asarray(counts, dtype=float)
    if alpha.shape != y.shape or alpha.ndim != 1:
        raise DataError("alphas and counts must be 1-D arrays of equal length")
    if alpha.size < 6:
        raise DataError(f"a fringe fit needs at least 6 scan points, got {alpha.size}")
    span = float(alpha.max() - alpha.min())
    if span <= 0:
        raise DataError("scan points must span a nonzero bias range")
    periods = np.linspace(span / 4, 2 * span, 400)
    start = _periodogram_start(alpha, y, periods)
    rng = np.random.default_rng(seed)
    last_error = None
    for attempt in range(max_restarts + 1):
        p0 = list(start)
        if attempt:
            p0[2] *= float(np.exp(rng.normal(scale=0.1)))
            p0[3] += float(rng.uniform(-np.pi, np.pi))
            p0[1] = max(p0[1], 0.1)
        try:
            # an exact fit leaves the covariance undefined; the errors become NaN below
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", OptimizeWarning)
                popt, pcov = curve_fit(
                    fringe_model, alpha, y, p0=p0, sigma=sigma, absolute_sigma=sigma is not None, maxfev=20000
                )
        except (RuntimeError, ValueError) as exc:
            last_error = exc
            continue
        if not np.all(np.isfinite(popt)):
            continue
        amp, vis, period, off = popt
        if vis < 0:
            vis, off = -vis, off + np.pi
        if period < 0:
            period, off = -period, -off
        err = np.sqrt(np.abs(np.diag(pcov))) if np.all(np.isfinite(pcov)) else np.full(4, np.nan)
        resid = y - fringe_model(alpha, *popt)
        return FringeFit(
            float(amp), float(vis), float(period), float(wrap(off)),
            float(err[0]), float(err[1]), float(err[2]), float(err[3]),
            float(np.sqrt(np.mean(resid**2))),
        )
    raise FitError(f"fringe fit did not converge after {max_restarts} restarts: {last_error}")
