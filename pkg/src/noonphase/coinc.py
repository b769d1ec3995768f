"""Coincidence counting over binary frame stacks.

Counts between pixels ``i`` and ``j`` are ``sum_l I_li I_lj`` minus the
accidental term ``(1/N) sum_m sum_n I_mi I_nj``.  The accidental double sum
factorizes into ``S_i S_j / N`` with ``S`` the per-pixel singles, so a full
pass is one sparse Gram product.  Everything up to the final division stays
in int64, which makes chunked and threaded accumulation exact.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import least_squares

from .errors import DataError, FitError
from .frames import DetectorGeometry, FrameStack

log = logging.getLogger(__name__)

PROJECTIONS = ("DD", "AA", "DA")
HIGH_OCCUPANCY = 0.3
MIN_CONDITIONAL_COUNTS = 20
MIN_FITTED_PIXELS = 5
DEFAULT_THRESHOLD = 0.5
DEFAULT_CROSSTALK_RADIUS = 4

_CHUNK_BYTES = 16 * 1024 * 1024


@dataclass
class CoincidenceTensor:
    """Pairwise coincidence counts for one polarization projection.

    ``counts[a, b]`` is the count between pixel ``rows[a]`` and pixel
    ``cols[b]`` (row-major sensor indices).  DD uses the left half for both
    axes, AA the right half, DA the left half for rows and the right half for
    columns.  For DD and AA the diagonal is excluded and held at zero.
    """

    projection: str
    geometry: DetectorGeometry
    counts: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    n_frames: int
    singles_rows: np.ndarray
    singles_cols: np.ndarray
    numerator: np.ndarray | None = None
    notes: dict = field(default_factory=dict)

    @property
    def same_half(self) -> bool:
        return self.projection in ("DD", "AA")

    def copy_with(self, counts: np.ndarray, **notes) -> "CoincidenceTensor":
        merged = dict(self.notes)
        merged.update(notes)
        return CoincidenceTensor(
            self.projection,
            self.geometry,
            counts,
            self.rows,
            self.cols,
            self.n_frames,
            self.singles_rows,
            self.singles_cols,
            None,
            merged,
        )

    def row_xy(self):
        return self.geometry.coords(self.rows)

    def col_xy(self):
        return self.geometry.coords(self.cols)

    def conditional(self, a: int) -> np.ndarray:
        """Counts of row pixel ``a`` against the column half, as a (Z, W/2) image."""
        return self.counts[a].reshape(self.geometry.half_shape)

    def total(self) -> float:
        return float(self.counts.sum())


@dataclass
class CrosstalkMap:
    """Crosstalk probability per absolute displacement ``(dx, dy)``."""

    probabilities: dict
    radius: int
    n_clamped: int = 0
    i_tot: int = 0

    def table(self) -> np.ndarray:
        """Probabilities as an array indexed ``[dy, dx]``; (0, 0) is zero."""
        tab = np.zeros((self.radius + 1, self.radius + 1))
        for (dx, dy), p in self.probabilities.items():
            if dx <= self.radius and dy <= self.radius and (dx, dy) != (0, 0):
                tab[dy, dx] = p
        return tab

    def get(self, dx: int, dy: int) -> float:
        return float(self.probabilities.get((abs(dx), abs(dy)), 0.0))


@dataclass
class GaussianFit:
    """Correlation Gaussian averaged over all fitted reference pixels."""

    amplitude: float
    sigma_fit: float
    d_x: float
    d_y: float
    residual: float
    n_fitted: int
    projection: str
    min_counts: int = MIN_CONDITIONAL_COUNTS
    min_pixels: int = MIN_FITTED_PIXELS

    def as_dict(self) -> dict:
        return {
            "projection": self.projection,
            "amplitude": self.amplitude,
            "sigma_fit": self.sigma_fit,
            "d_x": self.d_x,
            "d_y": self.d_y,
            "residual": self.residual,
            "n_fitted": self.n_fitted,
            "min_conditional_counts": self.min_counts,
            "min_fitted_pixels": self.min_pixels,
        }


@dataclass
class CoincidenceImage:
    """Sensor-sized image of summed coincidences.

    DD fills the left half and AA the right half.  DA carries the
    left-indexed projection on the left half and the right-indexed one on
    the right half.
    """

    projection: str
    geometry: DetectorGeometry
    data: np.ndarray

    @property
    def left(self) -> np.ndarray:
        return self.data[:, : self.geometry.half_split]

    @property
    def right(self) -> np.ndarray:
        return self.data[:, self.geometry.half_split :]

    @property
    def primary(self) -> np.ndarray:
        """The half used for phase retrieval (AA: right, otherwise left)."""
        return self.right if self.projection == "AA" else self.left

    def total(self) -> float:
        return float(self.primary.sum())


@dataclass
class Histogram2D:
    """Counts binned over a displacement (or sum) coordinate grid, ``counts[y, x]``."""

    counts: np.ndarray
    x: np.ndarray
    y: np.ndarray


# -- counting ---------------------------------------------------------------


def stack_events(stack: FrameStack, start: int = 0, stop: int | None = None):
    """(frame, pixel) indices of every set bit in frames ``[start, stop)``."""
    chunk = stack.bits[start:stop]
    f, byte = np.nonzero(chunk)
    bits = np.unpackbits(chunk[f, byte][:, None], axis=1, bitorder="little")
    k, b = np.nonzero(bits)
    pixel = byte[k].astype(np.int64) * 8 + b
    keep = pixel < stack.geometry.n_pixels  # ignore padding bits of the last byte
    return f[k][keep].astype(np.int64) + start, pixel[keep]


def _chunk_gram(stack: FrameStack, start: int, stop: int):
    n = stack.geometry.n_pixels
    f, p = stack_events(stack, start, stop)
    x = sp.csr_matrix(
        (np.ones(f.size, dtype=np.int64), (f - start, p)), shape=(stop - start, n)
    )
    gram = (x.T @ x).toarray()
    singles = np.bincount(p, minlength=n).astype(np.int64)
    return gram, singles


def gram(stack: FrameStack, threads: int = 1):
    """Integer pair totals ``G[i, j] = sum_l I_li I_lj`` and singles ``S``.

    Cached on the stack.  Chunks are merged by integer addition, so the
    result does not depend on ``threads``.
    """
    if stack._gram is not None:
        return stack._gram
    step = max(1, _CHUNK_BYTES // max(stack.geometry.frame_bytes, 1))
    bounds = [(s, min(s + step, stack.n_frames)) for s in range(0, stack.n_frames, step)]
    n = stack.geometry.n_pixels
    total_g = np.zeros((n, n), dtype=np.int64)
    total_s = np.zeros(n, dtype=np.int64)
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(lambda b: _chunk_gram(stack, *b), bounds)
            for g, s in parts:
                total_g += g
                total_s += s
    else:
        for b in bounds:
            g, s = _chunk_gram(stack, *b)
            total_g += g
            total_s += s
    stack._gram = (total_g, total_s)
    return stack._gram


def singles(stack: FrameStack, threads: int = 1):
    """Per-pixel totals ``sum_l I_li`` (row-major) and their grand total."""
    _, s = gram(stack, threads)
    return s.copy(), int(s.sum())


def _domain(geometry: DetectorGeometry, projection: str):
    if projection == "DD":
        return geometry.half_pixels("left"), geometry.half_pixels("left")
    if projection == "AA":
        return geometry.half_pixels("right"), geometry.half_pixels("right")
    if projection == "DA":
        return geometry.half_pixels("left"), geometry.half_pixels("right")
    raise DataError(f"unknown projection {projection!r}; expected one of {PROJECTIONS}")


def count_coincidences(stack: FrameStack, projection: str, threads: int = 1) -> CoincidenceTensor:
    """Accidental-subtracted coincidence counts over the projection's pixel pairs."""
    rows, cols = _domain(stack.geometry, projection)
    if stack.n_frames < 1:
        raise DataError("empty frame stack")
    g, s = gram(stack, threads)
    n = stack.n_frames
    if np.any(s > HIGH_OCCUPANCY * n):
        warnings.warn(
            f"pixel occupancy above {HIGH_OCCUPANCY}: binary frames undercount photons",
            RuntimeWarning,
            stacklevel=2,
        )
    numerator = n * g[np.ix_(rows, cols)] - np.outer(s[rows], s[cols])
    if projection != "DA":
        np.fill_diagonal(numerator, 0)
    counts = numerator / n
    return CoincidenceTensor(projection, stack.geometry, counts, rows, cols, n, s[rows], s[cols], numerator)


def count_all(stack: FrameStack, threads: int = 1) -> dict:
    return {p: count_coincidences(stack, p, threads) for p in PROJECTIONS}


# -- crosstalk --------------------------------------------------------------


def _displacement_pairs(geometry: DetectorGeometry, dx: int, dy: int):
    ys, xs = np.mgrid[0 : geometry.height, 0 : geometry.width]
    xj, yj = xs + dx, ys + dy
    ok = (xj >= 0) & (xj < geometry.width) & (yj >= 0) & (yj < geometry.height)
    i = (ys * geometry.width + xs)[ok]
    j = (yj * geometry.width + xj)[ok]
    return i, j


def estimate_crosstalk(
    dark: FrameStack, max_radius: int = DEFAULT_CROSSTALK_RADIUS, threads: int = 1
) -> CrosstalkMap:
    """Crosstalk probabilities from a covered-sensor (dark) stack.

    For each absolute displacement the coincidences of all in-bounds pixel
    pairs at that separation are summed and divided by the singles those
    pairs saw, ``sum cc(i, j) / sum (S_i + S_j)``, the estimator whose
    expectation is the per-direction trigger probability used by
    :func:`subtract_crosstalk`.  Negative estimates are set to zero and
    counted in ``n_clamped``.
    """
    g, s = gram(dark, threads)
    i_tot = int(s.sum())
    if i_tot == 0:
        raise DataError("dark stack has no detections; cannot estimate crosstalk")
    n = dark.n_frames
    probs, clamped = {}, 0
    for dy in range(max_radius + 1):
        for dx in range(max_radius + 1):
            if dx == 0 and dy == 0:
                continue
            shifts = {(dx, dy), (dx, -dy)} if dx and dy else {(dx, dy)}
            num = 0
            den = 0
            for sx, sy in shifts:
                i, j = _displacement_pairs(dark.geometry, sx, sy)
                num += int((n * g[i, j] - s[i] * s[j]).sum())
                den += int((s[i] + s[j]).sum())
            p = num / n / den if den else 0.0
            if p < 0:
                clamped += 1
                p = 0.0
            probs[(dx, dy)] = p
    if clamped:
        log.info("crosstalk estimate: %d negative displacements clamped to zero", clamped)
    return CrosstalkMap(probs, max_radius, clamped, i_tot)


def _pair_offsets(cc: CoincidenceTensor):
    xi, yi = cc.row_xy()
    xj, yj = cc.col_xy()
    return xj[None, :] - xi[:, None], yj[None, :] - yi[:, None]


def subtract_crosstalk(cc: CoincidenceTensor, xmap: CrosstalkMap, singles_=None) -> CoincidenceTensor:
    """Remove modelled crosstalk ``P(|dx|, |dy|) (S_i + S_j)`` from DD/AA counts.

    DA tensors pair pixels on opposite halves and pass through unchanged.
    """
    if cc.projection == "DA":
        return cc.copy_with(cc.counts.copy(), crosstalk_subtracted=False)
    if singles_ is None:
        s_rows, s_cols = cc.singles_rows, cc.singles_cols
    else:
        s_rows, s_cols = np.asarray(singles_)[cc.rows], np.asarray(singles_)[cc.cols]
    dx, dy = _pair_offsets(cc)
    adx, ady = np.abs(dx), np.abs(dy)
    tab = xmap.table()
    inside = (adx <= xmap.radius) & (ady <= xmap.radius)
    prob = np.zeros(cc.counts.shape)
    prob[inside] = tab[ady[inside], adx[inside]]
    correction = prob * (s_rows[:, None] + s_cols[None, :])
    counts = cc.counts - correction
    np.fill_diagonal(counts, 0.0)
    return cc.copy_with(counts, crosstalk_subtracted=True)


# -- correlation fit --------------------------------------------------------


def _gauss_fixed(params, xx, yy, x0, y0, z):
    a, s = params
    g = np.exp(-((xx - x0) ** 2 + (yy - y0) ** 2) / (2 * s * s))
    return a * g - z


def _gauss_fixed_jac(params, xx, yy, x0, y0, z):
    a, s = params
    r2 = (xx - x0) ** 2 + (yy - y0) ** 2
    g = np.exp(-r2 / (2 * s * s))
    return np.column_stack([g, a * g * r2 / s**3])


def _gauss_free(params, xx, yy, z):
    a, x0, y0, s = params
    g = np.exp(-((xx - x0) ** 2 + (yy - y0) ** 2) / (2 * s * s))
    return a * g - z


def _gauss_free_jac(params, xx, yy, z):
    a, x0, y0, s = params
    r2 = (xx - x0) ** 2 + (yy - y0) ** 2
    g = np.exp(-r2 / (2 * s * s))
    ag = a * g
    return np.column_stack([g, ag * (xx - x0) / s**2, ag * (yy - y0) / s**2, ag * r2 / s**3])


def _moments(img, xx, yy, centre=None):
    w = np.clip(img, 0, None)
    tot = w.sum()
    if tot <= 0:
        return None
    if centre is None:
        cx, cy = (w * xx).sum() / tot, (w * yy).sum() / tot
    else:
        cx, cy = centre
    var = (w * ((xx - cx) ** 2 + (yy - cy) ** 2)).sum() / (2 * tot)
    return cx, cy, np.sqrt(max(var, 0.25))


def fit_correlation_gaussian(
    cc: CoincidenceTensor,
    min_counts: float = MIN_CONDITIONAL_COUNTS,
    min_pixels: int = MIN_FITTED_PIXELS,
    window: float | None = None,
) -> GaussianFit:
    """Fit a 2-D Gaussian to every reference pixel's conditional image.

    DD/AA fits are centred on the reference pixel (amplitude and width only,
    the reference pixel itself excluded); DA fits also free the peak centre,
    whose offset from the reference pixel gives ``d_x``, ``d_y``.  Each fit
    is Levenberg-Marquardt from the centroid and second moment of the
    conditional image.  ``window`` optionally restricts each fit to pixels
    within that Chebyshev distance of the starting centre.
    """
    if cc.total() <= 0:
        raise FitError(f"{cc.projection} tensor has no positive counts to fit")
    geo = cc.geometry
    rows_, cols_ = geo.half_shape
    yy, xx = np.indices((rows_, cols_))
    xx = xx.ravel().astype(float)
    yy = yy.ravel().astype(float)
    col_off = geo.half_split if cc.projection in ("AA", "DA") else 0
    row_off = geo.half_split if cc.projection == "AA" else 0
    rx, ry = cc.row_xy()
    rx = rx - row_off
    limit = max(rows_, cols_)
    amps, sigmas, dxs, dys, res = [], [], [], [], []
    for a in range(cc.counts.shape[0]):
        z = cc.counts[a]
        if z.sum() < min_counts:
            continue
        if cc.same_half:
            keep = np.ones(z.size, dtype=bool)
            keep[a] = False
            m = _moments(z[keep], xx[keep], yy[keep], centre=(rx[a], ry[a]))
            if m is None:
                continue
            if window is not None:
                keep &= (np.abs(xx - rx[a]) <= window) & (np.abs(yy - ry[a]) <= window)
            x0 = [max(z[keep].max(), 1e-9), m[2]]
            args = (xx[keep], yy[keep], rx[a], ry[a], z[keep])
            try:
                sol = least_squares(_gauss_fixed, x0, jac=_gauss_fixed_jac, args=args, method="lm")
            except (ValueError, np.linalg.LinAlgError):
                continue
            amp, sig = sol.x
            cx, cy = rx[a], ry[a]
        else:
            m = _moments(z, xx, yy)
            if m is None:
                continue
            keep = np.ones(z.size, dtype=bool)
            if window is not None:
                keep &= (np.abs(xx - m[0]) <= window) & (np.abs(yy - m[1]) <= window)
            x0 = [max(z[keep].max(), 1e-9), m[0], m[1], m[2]]
            args = (xx[keep], yy[keep], z[keep])
            try:
                sol = least_squares(_gauss_free, x0, jac=_gauss_free_jac, args=args, method="lm")
            except (ValueError, np.linalg.LinAlgError):
                continue
            amp, cx, cy, sig = sol.x
        sig = abs(sig)
        if not (sol.success and np.all(np.isfinite(sol.x)) and amp > 0 and 0 < sig < limit):
            continue
        amps.append(amp)
        sigmas.append(sig)
        dxs.append(cx + col_off - (rx[a] + row_off))
        dys.append(cy - ry[a])
        res.append(float(np.sqrt(np.mean(sol.fun**2))))
    if len(sigmas) < min_pixels:
        raise FitError(
            f"only {len(sigmas)} {cc.projection} reference pixels could be fitted (need {min_pixels})"
        )
    same = cc.same_half
    return GaussianFit(
        amplitude=float(np.mean(amps)),
        sigma_fit=float(np.mean(sigmas)),
        d_x=0.0 if same else float(np.mean(dxs)),
        d_y=0.0 if same else float(np.mean(dys)),
        residual=float(np.mean(res)),
        n_fitted=len(sigmas),
        projection=cc.projection,
        min_counts=int(min_counts),
        min_pixels=int(min_pixels),
    )


def acceptance_mask(cc: CoincidenceTensor, fit: GaussianFit, t: float) -> np.ndarray:
    """Boolean mask of pixel pairs whose unit-amplitude Gaussian exceeds ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {t}")
    dx, dy = _pair_offsets(cc)
    r2 = (dx - fit.d_x) ** 2 + (dy - fit.d_y) ** 2
    if t == 0.0:
        return np.ones(cc.counts.shape, dtype=bool)
    if t >= 1.0:
        return np.zeros(cc.counts.shape, dtype=bool)
    # exp(-r2 / 2s^2) > t  <=>  r2 < -2 s^2 ln t
    return r2 < -2.0 * fit.sigma_fit**2 * np.log(t)


def filter_uncorrelated(cc: CoincidenceTensor, fit: GaussianFit, t: float = DEFAULT_THRESHOLD) -> CoincidenceTensor:
    """Zero every count outside the correlation Gaussian's ``G > t`` region."""
    mask = acceptance_mask(cc, fit, t)
    return cc.copy_with(np.where(mask, cc.counts, 0.0), filter_threshold=t, filter_sigma=fit.sigma_fit)


# -- projections ------------------------------------------------------------


def project_image(cc_f: CoincidenceTensor) -> CoincidenceImage:
    """Sum each pixel's coincidences over all partner pixels."""
    geo = cc_f.geometry
    data = np.zeros(geo.n_pixels)
    data[cc_f.rows] += cc_f.counts.sum(axis=1)
    if cc_f.projection == "DA":
        data[cc_f.cols] += cc_f.counts.sum(axis=0)
    return CoincidenceImage(cc_f.projection, geo, data.reshape(geo.height, geo.width))


def _coordinate_histogram(cc: CoincidenceTensor, sign: int) -> Histogram2D:
    geo = cc.geometry
    xi, yi = cc.row_xy()
    xj, yj = cc.col_xy()
    half = geo.half_split
    # put both axes in in-half coordinates
    if cc.projection == "AA":
        xi = xi - half
    if cc.projection in ("AA", "DA"):
        xj = xj - half
    rows_, cols_ = geo.half_shape
    if sign < 0:
        hx = xi[:, None] - xj[None, :]
        hy = yi[:, None] - yj[None, :]
        x_axis = np.arange(-(cols_ - 1), cols_)
        y_axis = np.arange(-(rows_ - 1), rows_)
    else:
        hx = xi[:, None] + xj[None, :]
        hy = yi[:, None] + yj[None, :]
        x_axis = np.arange(0, 2 * cols_ - 1)
        y_axis = np.arange(0, 2 * rows_ - 1)
    bx = (hx - x_axis[0]).ravel()
    by = (hy - y_axis[0]).ravel()
    flat = np.bincount(by * x_axis.size + bx, weights=cc.counts.ravel(), minlength=x_axis.size * y_axis.size)
    return Histogram2D(flat.reshape(y_axis.size, x_axis.size), x_axis, y_axis)


def project_difference_coordinates(cc: CoincidenceTensor) -> Histogram2D:
    """Coincidences binned by ``r_i - r_j`` (DA partners mapped back to the left half)."""
    return _coordinate_histogram(cc, -1)


def project_sum_coordinates(cc: CoincidenceTensor) -> Histogram2D:
    """Coincidences binned by ``r_i + r_j`` in in-half coordinates."""
    return _coordinate_histogram(cc, +1)


def fit_histogram_gaussian(hist: Histogram2D, exclude_origin: bool = False) -> dict:
    """Gaussian plus flat background fitted to a coordinate histogram.

    ``exclude_origin`` drops the zero-displacement bin, which is empty for
    same-half projections because a binary pixel cannot register two photons.
    """
    xx, yy = np.meshgrid(hist.x.astype(float), hist.y.astype(float))
    z = hist.counts.astype(float)
    keep = np.ones(z.shape, dtype=bool)
    if exclude_origin:
        keep &= ~((xx == 0) & (yy == 0))
    xx, yy, z = xx[keep], yy[keep], z[keep]
    bg0 = float(np.median(z))
    m = _moments(z - bg0, xx, yy)
    if m is None:
        raise FitError("histogram has no peak above background")

    def resid(p):
        a, x0, y0, s, b = p
        return a * np.exp(-((xx - x0) ** 2 + (yy - y0) ** 2) / (2 * s * s)) + b - z

    sol = least_squares(resid, [float(z.max() - bg0), m[0], m[1], m[2], bg0], method="lm")
    if not sol.success:
        raise FitError(f"histogram Gaussian fit failed: {sol.message}")
    a, x0, y0, s, b = sol.x
    return {"amplitude": float(a), "x0": float(x0), "y0": float(y0), "sigma": float(abs(s)), "background": float(b)}
