"""Image-quality and sensitivity metrics.

``predict_sensitivity`` propagates shot noise through the four-step
arctangent estimators by the first-order (delta-method) rule, evaluating the
partial derivatives at the noiseless fringe values, then propagates again
through the projection averages.  The bias steps and fringe signs come from
:mod:`noonphase.holo`, so the prediction always describes the estimator that
is actually run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import holo
from .errors import DataError
from .rng import stream


@dataclass
class LUResult:
    lu: float
    std_error: float
    n_pairs: int
    roi: dict
    bootstrap_error: float | None = None
    n_skipped: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _roi_mask(shape, roi) -> tuple[np.ndarray, dict]:
    if roi is None:
        return np.ones(shape, dtype=bool), {"kind": "full", "neighbourhood": 4}
    if isinstance(roi, np.ndarray):
        if roi.shape != shape:
            raise DataError(f"roi mask shape {roi.shape} does not match image {shape}")
        return roi.astype(bool), {"kind": "mask", "n_pixels": int(roi.sum()), "neighbourhood": 4}
    x0, y0, x1, y1 = (int(v) for v in roi)
    rows, cols = shape
    if not (0 <= x0 < x1 <= cols and 0 <= y0 < y1 <= rows):
        raise DataError(f"roi {roi} lies outside the {cols}x{rows} image")
    mask = np.zeros(shape, dtype=bool)
    mask[y0:y1, x0:x1] = True
    return mask, {"kind": "rect", "x0": x0, "y0": y0, "x1": x1, "y1": y1, "neighbourhood": 4}


def neighbour_differences(phase: holo.PhaseImage, roi=None):
    """Wrapped differences over all horizontal and vertical neighbour pairs."""
    mask, desc = _roi_mask(phase.shape, roi)
    inside = mask & phase.valid
    if inside.sum() < 2:
        raise DataError("roi holds fewer than 2 valid pixels")
    p = phase.phase
    diffs, skipped = [], 0
    for a, b, ma, mb, ra, rb in (
        (p[:, :-1], p[:, 1:], inside[:, :-1], inside[:, 1:], mask[:, :-1], mask[:, 1:]),
        (p[:-1, :], p[1:, :], inside[:-1, :], inside[1:, :], mask[:-1, :], mask[1:, :]),
    ):
        ok = ma & mb
        skipped += int((ra & rb & ~ok).sum())
        diffs.append(holo.wrap(a[ok] - b[ok], phase.half_range))
    return np.concatenate(diffs), desc, skipped


def local_uncertainty(phase: holo.PhaseImage, roi=None, n_boot: int = 200, seed: int = 0) -> LUResult:
    """RMS of wrapped 4-neighbour phase differences inside ``roi``.

    ``roi`` is ``None`` (whole image), a boolean mask or ``(x0, y0, x1, y1)``
    with exclusive upper bounds.  Pairs touching a masked pixel are skipped
    and counted.  The analytic error is ``lu / sqrt(2 n_pairs)``; a bootstrap
    over pairs is reported alongside when ``n_boot > 0``.
    """
    d, desc, skipped = neighbour_differences(phase, roi)
    if d.size == 0:
        raise DataError("roi holds no valid neighbour pairs")
    lu = float(np.sqrt(np.mean(d**2)))
    boot = None
    if n_boot > 0:
        rng = stream(seed, "lu-bootstrap")
        sq = d**2
        idx = rng.integers(0, d.size, size=(n_boot, d.size))
        boot = float(np.std(np.sqrt(sq[idx].mean(axis=1)), ddof=1))
    return LUResult(lu, lu / np.sqrt(2 * d.size), int(d.size), desc, boot, skipped)


def lu_ratio(noon: LUResult, classical: LUResult) -> tuple[float, float]:
    """Ratio of two LU values with first-order propagated error."""
    r = noon.lu / classical.lu
    err = r * np.hypot(noon.std_error / noon.lu, classical.std_error / classical.lu)
    return float(r), float(err)


def zncc(a, b) -> float:
    """Zero-mean normalised cross-correlation over jointly finite pixels.

    Accepts arrays or :class:`~noonphase.holo.PhaseImage` (masked pixels are
    NaN there and drop out).
    """
    a = a.phase if isinstance(a, holo.PhaseImage) else np.asarray(a, dtype=float)
    b = b.phase if isinstance(b, holo.PhaseImage) else np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"image shapes differ: {a.shape} vs {b.shape}")
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 2:
        raise DataError("fewer than 2 jointly valid pixels")
    da = a[ok] - a[ok].mean()
    db = b[ok] - b[ok].mean()
    saa, sbb = float(np.dot(da, da)), float(np.dot(db, db))
    if saa == 0 or sbb == 0:
        raise DataError("zncc is undefined for a zero-variance image")
    return float(np.clip(np.dot(da, db) / np.sqrt(saa * sbb), -1.0, 1.0))


@dataclass
class KappaEstimate:
    kappa: float
    ci_low: float
    ci_high: float
    n: int
    sub_unity: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def kappa_estimate(series, n_boot: int = 1000, level: float = 0.95, seed: int = 0, min_n: int = 20) -> KappaEstimate:
    """Excess-noise factor: sample std of repeated totals over sqrt of their mean."""
    x = np.asarray(series, dtype=float)
    if x.size < min_n:
        raise DataError(f"kappa needs at least {min_n} repeated acquisitions, got {x.size}")
    mean = x.mean()
    if mean <= 0:
        raise DataError("kappa is undefined for a non-positive mean")
    kappa = float(x.std(ddof=1) / np.sqrt(mean))
    rng = stream(seed, "kappa-bootstrap")
    samples = x[rng.integers(0, x.size, size=(n_boot, x.size))]
    means = samples.mean(axis=1)
    boots = samples.std(axis=1, ddof=1) / np.sqrt(np.clip(means, 1e-300, None))
    lo, hi = np.quantile(boots, [(1 - level) / 2, (1 + level) / 2])
    return KappaEstimate(kappa, float(lo), float(hi), int(x.size), kappa < 1.0)


# -- sensitivity model ------------------------------------------------------


@dataclass(frozen=True)
class SensitivityParams:
    """Inputs of the shot-noise sensitivity model.

    The coincidence budget is tied to the photon budget, ``ci_tot = I_tot/2``,
    so both methods spend the same number of photons.  ``noon_shares`` are
    the fractions of ``ci_tot`` held by the DD, AA and DA images away from
    the fringe extremes; the default (1/4, 1/4, 1/2) follows from the
    two-photon outcome probabilities.
    """

    visibility: float
    classical_visibility: float = 1.0
    kappa: float = 1.0
    i_tot: float = 818315.0
    noon_shares: tuple = (0.25, 0.25, 0.5)

    def __post_init__(self):
        if self.i_tot <= 0:
            raise DataError("i_tot must be positive")
        if not (0 < self.visibility <= 1 and 0 < self.classical_visibility <= 1):
            raise DataError("visibilities must lie in (0, 1]")
        if self.kappa <= 0:
            raise DataError("kappa must be positive")
        shares = tuple(float(x) for x in self.noon_shares)
        if len(shares) != 3 or min(shares) <= 0 or abs(sum(shares) - 1.0) > 1e-9:
            raise DataError("noon_shares must be three positive fractions summing to 1")
        object.__setattr__(self, "noon_shares", shares)

    @property
    def ci_tot(self) -> float:
        return self.i_tot / 2.0

    @property
    def sub_unity_kappa(self) -> bool:
        return self.kappa < 1.0


def _arctan_gradient(means: np.ndarray, sign: int, scale: float) -> np.ndarray:
    """d/dm_j of ``scale * atan2(-sign (m1 - m3), -sign (m2 - m0))``."""
    m0, m1, m2, m3 = means
    n = -sign * (m1 - m3)
    d = -sign * (m2 - m0)
    dn = -sign * np.array([0.0, 1.0, 0.0, -1.0])
    dd = -sign * np.array([-1.0, 0.0, 1.0, 0.0])
    denom = n * n + d * d
    return scale * (d * dn[:, None] - n * dd[:, None]) / denom


def _projection_sd(phi, alphas, harmonic, sign, share, visibility, budget, noise_factor, scale):
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    alphas = np.asarray(alphas)[:, None]
    means = share * (1 + sign * visibility * np.cos(harmonic * (phi[None, :] + alphas))) * budget / 4
    grad = _arctan_gradient(means, sign, scale)
    var = (noise_factor**2) * means
    return np.sqrt(np.sum(grad**2 * var, axis=0))


def predict_sensitivity(p: SensitivityParams, phi_sample) -> dict:
    """Shot-noise standard deviation of both combined phase estimators.

    Returns ``sd_classical`` and ``sd_noon`` at the configured budget, their
    ``ratio`` and the budget-free ``norm_*`` values ``sd * sqrt(I_tot)``.
    Inputs may be scalars or arrays of sample phases.
    """
    vc, v = p.classical_visibility, p.visibility
    sd_d = _projection_sd(phi_sample, holo.CLASSICAL_ALPHAS, 1, +1, 0.5, vc, p.i_tot, 1.0, 1.0)
    sd_a = _projection_sd(phi_sample, holo.CLASSICAL_ALPHAS, 1, -1, 0.5, vc, p.i_tot, 1.0, 1.0)
    s_dd, s_aa, s_da = p.noon_shares
    sd_dd = _projection_sd(phi_sample, holo.NOON_ALPHAS, 2, +1, s_dd, v, p.ci_tot, p.kappa, 0.5)
    sd_aa = _projection_sd(phi_sample, holo.NOON_ALPHAS, 2, +1, s_aa, v, p.ci_tot, p.kappa, 0.5)
    sd_da = _projection_sd(phi_sample, holo.NOON_ALPHAS, 2, -1, s_da, v, p.ci_tot, p.kappa, 0.5)
    # second propagation through the projection averages (1,1)/2 and (1,1,2)/4
    sd_cl = np.sqrt((sd_d / 2) ** 2 + (sd_a / 2) ** 2)
    sd_nn = np.sqrt((sd_dd / 4) ** 2 + (sd_aa / 4) ** 2 + (2 * sd_da / 4) ** 2)
    scalar = np.ndim(phi_sample) == 0
    out = {
        "sd_classical": sd_cl,
        "sd_noon": sd_nn,
        "ratio": sd_nn / sd_cl,
        "norm_classical": sd_cl * np.sqrt(p.i_tot),
        "norm_noon": sd_nn * np.sqrt(p.i_tot),
    }
    if scalar:
        out = {k: float(v[0]) for k, v in out.items()}
    return out


CURVE_COLUMNS = (
    "phi",
    "norm_classical",
    "norm_noon",
    "norm_noon_low",
    "norm_noon_high",
    "norm_noon_ideal",
    "ratio",
    "ratio_low",
    "ratio_high",
    "ratio_ideal",
)


def sensitivity_curves(p: SensitivityParams, phases, visibility_err: float = 0.06) -> dict:
    """Normalised sd curves over ``phases`` with a visibility band.

    The band is the pointwise min/max over the model evaluated at
    ``V - visibility_err`` and ``V + visibility_err`` (clipped to (0, 1]).
    Columns follow :data:`CURVE_COLUMNS`.
    """
    phases = np.asarray(phases, dtype=float)
    base = predict_sensitivity(p, phases)
    ends = []
    for v in (p.visibility - visibility_err, p.visibility + visibility_err):
        v = float(np.clip(v, 1e-9, 1.0))
        ends.append(predict_sensitivity(dataclasses.replace(p, visibility=v), phases))
    ideal = predict_sensitivity(SensitivityParams(1.0, 1.0, 1.0, p.i_tot), phases)
    return {
        "phi": phases,
        "norm_classical": base["norm_classical"],
        "norm_noon": base["norm_noon"],
        "norm_noon_low": np.minimum(ends[0]["norm_noon"], ends[1]["norm_noon"]),
        "norm_noon_high": np.maximum(ends[0]["norm_noon"], ends[1]["norm_noon"]),
        "norm_noon_ideal": ideal["norm_noon"],
        "ratio": base["ratio"],
        "ratio_low": np.minimum(ends[0]["ratio"], ends[1]["ratio"]),
        "ratio_high": np.maximum(ends[0]["ratio"], ends[1]["ratio"]),
        "ratio_ideal": ideal["ratio"],
    }
