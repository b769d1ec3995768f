"""Phase scenes over one sensor half, addressed by ``kind``."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

SCENE_KINDS = ("flat", "phi_letter", "ramp", "grid")


def phi_letter(shape, amplitude: float = 1.0, stroke: float | None = None) -> np.ndarray:
    """Greek letter phi: an elliptical ring crossed by a vertical bar.

    ``amplitude`` is the phase inside the glyph; the surround is 0.  The
    stroke width defaults to a tenth of the smaller grid dimension.
    """
    rows, cols = shape
    yy, xx = np.mgrid[0:rows, 0:cols].astype(float)
    cy, cx = (rows - 1) / 2.0, (cols - 1) / 2.0
    s = stroke if stroke is not None else max(1.0, 0.1 * min(rows, cols))
    ry, rx = 0.28 * rows, 0.3 * cols
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    ring = np.abs(r - 1.0) * min(rx, ry) <= s / 2
    bar = (np.abs(xx - cx) <= s / 2) & (np.abs(yy - cy) <= 0.42 * rows)
    return np.where(ring | bar, float(amplitude), 0.0)


def make_phase(desc: dict, shape) -> np.ndarray:
    """Build a phase grid from a scene entry such as ``{"kind": "ramp", ...}``."""
    kind = desc.get("kind", "flat")
    rows, cols = shape
    if kind == "flat":
        return np.full(shape, float(desc.get("value", 0.0)))
    if kind == "phi_letter":
        return phi_letter(shape, float(desc.get("amplitude", 1.0)), desc.get("stroke"))
    if kind == "ramp":
        yy, xx = np.mgrid[0:rows, 0:cols].astype(float)
        return float(desc.get("offset", 0.0)) + float(desc.get("slope_x", 0.0)) * xx + float(desc.get("slope_y", 0.0)) * yy
    if kind == "grid":
        grid = np.asarray(desc.get("values"), dtype=float)
        if grid.shape != tuple(shape):
            raise ConfigError(f"scene grid has shape {grid.shape}, sensor half is {tuple(shape)}")
        return grid
    raise ConfigError(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
