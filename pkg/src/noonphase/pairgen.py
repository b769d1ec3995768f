"""Monte Carlo synthesis of SPAD frame stacks for classical and N00N illumination.

Photon pairs follow the double-Gaussian near-field distribution: the pair sum
``r + r'`` has standard deviation ``sigma_plus`` per axis about the centre of a
sensor half and the difference ``r - r'`` has standard deviation
``sigma_minus``.  Each pair picks up the two-photon phase ``2*Theta`` at its
midpoint (or ``Theta(r) + Theta(r')`` with ``exact_phases``) and is projected
onto DD, AA or DA; D photons land on the left half of the sensor and A photons
on the right half at the same in-half coordinate.

Frames are rendered in fixed blocks of :data:`BLOCK_FRAMES` frames, each from
its own counter-based stream keyed by ``(seed, stage, block)``, so the content
of frame ``f`` is a function of ``(seed, f)`` alone: it does not depend on how
many frames were requested or how blocks were spread over threads.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, SourceGeometryError
from .frames import DEFAULT_EXPOSURE_NS, DEFAULT_FRAME_RATE_HZ, DetectorGeometry, FrameStack
from .rng import stream

BLOCK_FRAMES = 1024
MAX_REDRAWS = 1000

DD, AA, DA = 0, 1, 2
PAIR_OUTCOMES = ("DD", "AA", "DA")
SINGLE_OUTCOMES = ("D", "A")


@dataclass(frozen=True)
class PairSourceParams:
    """Photon source.  Widths in micrometres, rates in expected events per frame."""

    sigma_minus: float = 264.0
    sigma_plus: float = 4800.0
    visibility: float = 1.0
    pair_rate: float = 1.0
    classical_rate: float = 2.0
    classical_visibility: float = 1.0

    def __post_init__(self):
        if self.sigma_minus < 0 or self.sigma_plus <= 0:
            raise DataError("sigma_minus must be >= 0 and sigma_plus > 0")
        if self.sigma_minus >= self.sigma_plus:
            raise DataError("sigma_minus / sigma_plus must be < 1")
        for name in ("visibility", "classical_visibility"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must lie in [0, 1]")
        if self.pair_rate < 0 or self.classical_rate < 0:
            raise DataError("rates must be non-negative")


def _symmetrize(kernel: dict) -> dict:
    out = {}
    for (dx, dy), p in kernel.items():
        for sx in (1, -1):
            for sy in (1, -1):
                key = (sx * int(dx), sy * int(dy))
                if key != (0, 0):
                    out[key] = float(p)
    return out


@dataclass(frozen=True)
class DetectorNoiseParams:
    """Per-photon detection efficiency, dark-count probability and crosstalk.

    ``crosstalk`` maps a displacement ``(dx, dy)`` to the probability that a
    fired pixel triggers the pixel at that displacement.  Entries are mirrored
    under sign flips of ``dx`` and ``dy``, so ``{(1, 0): 0.01}`` means both the
    left and right neighbours fire with probability 0.01.
    """

    efficiency: float = 1.0
    dark_prob: float = 0.0
    crosstalk: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("efficiency", "dark_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DataError(f"{name} must lie in [0, 1]")
        kernel = _symmetrize(self.crosstalk)
        if any(not 0.0 <= p <= 1.0 for p in kernel.values()):
            raise DataError("crosstalk probabilities must lie in [0, 1]")
        object.__setattr__(self, "crosstalk", kernel)


@dataclass(frozen=True)
class SceneConfig:
    """Ground-truth phase scene over one sensor half (shape ``(Z, W/2)``).

    In ``non_birefringent`` mode the sample phase is sheared along x by
    ``shear`` micrometres before the bias ``bias_alpha`` is added.
    """

    sample_phase: np.ndarray
    mode: str = "birefringent"
    bias_alpha: float = 0.0
    shear: float = 0.0
    background_phase: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("birefringent", "non_birefringent"):
            raise DataError(f"unknown scene mode {self.mode!r}")
        phase = np.asarray(self.sample_phase, dtype=float)
        if phase.ndim != 2 or not np.all(np.isfinite(phase)):
            raise DataError("sample_phase must be a finite 2-D grid")
        object.__setattr__(self, "sample_phase", phase)
        if self.background_phase is not None:
            bg = np.asarray(self.background_phase, dtype=float)
            if bg.shape != phase.shape or not np.all(np.isfinite(bg)):
                raise DataError("background_phase must be finite and match sample_phase")
            object.__setattr__(self, "background_phase", bg)
        if self.shear < 0:
            raise DataError("shear must be non-negative")

    def with_bias(self, alpha: float) -> "SceneConfig":
        return dataclasses.replace(self, bias_alpha=float(alpha))


def _shift_lookup(phase: np.ndarray, x: np.ndarray, y: np.ndarray, shift: float) -> np.ndarray:
    # linear interpolation along x, clamped to the grid edges
    ncols = phase.shape[1]
    xs = np.clip(x + shift, 0, ncols - 1)
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, ncols - 1)
    w = xs - x0
    return (1 - w) * phase[y, x0] + w * phase[y, x1]


def effective_phase(scene: SceneConfig, x, y, pixel_pitch: float = 150.0) -> np.ndarray:
    """Total phase ``Theta`` at left-half pixel(s) ``(x, y)``."""
    x = np.asarray(x)
    y = np.asarray(y)
    rows, cols = scene.sample_phase.shape
    if np.any((x < 0) | (x >= cols) | (y < 0) | (y >= rows)):
        raise DataError("pixel coordinate outside the scene grid")
    if scene.mode == "birefringent":
        theta = scene.sample_phase[y, x]
    else:
        half = 0.5 * scene.shear / pixel_pitch
        theta = _shift_lookup(scene.sample_phase, x, y, half) - _shift_lookup(scene.sample_phase, x, y, -half)
    theta = theta + scene.bias_alpha
    if scene.background_phase is not None:
        theta = theta + scene.background_phase[y, x]
    return theta


def phase_map(scene: SceneConfig, pixel_pitch: float = 150.0) -> np.ndarray:
    """``Theta`` over the whole scene grid."""
    ys, xs = np.indices(scene.sample_phase.shape)
    return effective_phase(scene, xs, ys, pixel_pitch)


def pair_probabilities(theta, visibility: float):
    """(P_DD, P_AA, P_DA) for two-photon phase ``2*theta``."""
    c = visibility * np.cos(2.0 * np.asarray(theta, dtype=float))
    p_dd = (1.0 + c) / 4.0
    return p_dd, p_dd, (1.0 - c) / 2.0


def single_probabilities(theta, visibility: float):
    """(P_D, P_A) for single-photon phase ``theta``."""
    c = visibility * np.cos(np.asarray(theta, dtype=float))
    return (1.0 + c) / 2.0, (1.0 - c) / 2.0


def sample_projection_pairs(theta, visibility: float, rng: np.random.Generator) -> np.ndarray:
    """Outcome codes (DD=0, AA=1, DA=2), one per entry of ``theta``."""
    p_dd, _, _ = pair_probabilities(theta, visibility)
    u = rng.random(np.shape(theta))
    return np.where(u < p_dd, DD, np.where(u < 2.0 * p_dd, AA, DA))


def sample_projection_pair(theta: float, visibility: float, rng: np.random.Generator) -> str:
    if not 0.0 <= visibility <= 1.0:
        raise DataError("visibility must lie in [0, 1]")
    return PAIR_OUTCOMES[int(sample_projection_pairs(np.array([theta]), visibility, rng)[0])]


def sample_projection_singles(theta, visibility: float, rng: np.random.Generator) -> np.ndarray:
    """0 for D, 1 for A."""
    p_d, _ = single_probabilities(theta, visibility)
    return (rng.random(np.shape(theta)) >= p_d).astype(np.int64)


def sample_projection_single(theta: float, visibility: float, rng: np.random.Generator) -> str:
    if not 0.0 <= visibility <= 1.0:
        raise DataError("visibility must lie in [0, 1]")
    return SINGLE_OUTCOMES[int(sample_projection_singles(np.array([theta]), visibility, rng)[0])]


def sample_pairs(source: PairSourceParams, geometry: DetectorGeometry, n: int, rng: np.random.Generator):
    """Draw ``n`` pairs on the left-half pixel grid.

    Returns integer arrays ``r``, ``r2`` and ``mid`` of shape ``(n, 2)``
    holding (x, y).  Pairs with either photon off the half are redrawn; after
    :data:`MAX_REDRAWS` redraws a :class:`SourceGeometryError` is raised.
    """
    rows, cols = geometry.half_shape
    centre = np.array([(cols - 1) / 2.0, (rows - 1) / 2.0])
    upper = np.array([cols - 1, rows - 1])
    s_plus = source.sigma_plus / geometry.pixel_pitch
    s_minus = source.sigma_minus / geometry.pixel_pitch
    r = np.empty((n, 2), dtype=np.int64)
    r2 = np.empty((n, 2), dtype=np.int64)
    mid = np.empty((n, 2), dtype=np.int64)
    todo = np.arange(n)
    for _ in range(MAX_REDRAWS + 1):
        if todo.size == 0:
            break
        m = centre + rng.normal(scale=0.5 * s_plus, size=(todo.size, 2))
        d = rng.normal(scale=s_minus, size=(todo.size, 2))
        a = np.rint(m + 0.5 * d)
        b = np.rint(m - 0.5 * d)
        ok = np.all((a >= 0) & (a <= upper) & (b >= 0) & (b <= upper), axis=1)
        idx = todo[ok]
        r[idx] = a[ok]
        r2[idx] = b[ok]
        mid[idx] = np.clip(np.rint(m[ok]), 0, upper)
        todo = todo[~ok]
    if todo.size:
        raise SourceGeometryError(
            f"{todo.size} pairs still off-sensor after {MAX_REDRAWS} redraws; "
            "the source is too large for the sensor"
        )
    return r, r2, mid


def sample_pair(source: PairSourceParams, geometry: DetectorGeometry, rng: np.random.Generator):
    r, r2, _ = sample_pairs(source, geometry, 1, rng)
    return tuple(r[0]), tuple(r2[0])


def _crosstalk(frame, pixel, kernel, geometry, rng):
    if not kernel or frame.size == 0:
        return frame, pixel
    x, y = geometry.coords(pixel)
    new_f, new_p = [frame], [pixel]
    for (dx, dy), p in sorted(kernel.items()):
        hit = rng.random(frame.size) < p
        nx, ny = x + dx, y + dy
        hit &= (nx >= 0) & (nx < geometry.width) & (ny >= 0) & (ny < geometry.height)
        new_f.append(frame[hit])
        new_p.append(ny[hit] * geometry.width + nx[hit])
    return np.concatenate(new_f), np.concatenate(new_p)


def _dark_events(n_frames, geometry, p, rng):
    n_trials = n_frames * geometry.n_pixels
    if p <= 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    if p >= 1:
        flat = np.arange(n_trials)
    else:
        # positions of successes in a Bernoulli sequence via geometric gaps
        expected = n_trials * p
        chunks, last = [], -1
        while last < n_trials:
            size = int(expected + 6 * np.sqrt(expected) + 16)
            pos = last + np.cumsum(rng.geometric(p, size=size))
            chunks.append(pos)
            last = int(pos[-1])
        flat = np.concatenate(chunks)
        flat = flat[flat < n_trials]
    return flat // geometry.n_pixels, flat % geometry.n_pixels


@dataclass(frozen=True)
class _RenderJob:
    scene: SceneConfig | None
    source: PairSourceParams
    noise: DetectorNoiseParams
    geometry: DetectorGeometry
    seed: int
    stage: str
    mode: str
    exact_phases: bool
    right_offset: tuple

    def block(self, b: int, n_keep: int) -> np.ndarray:
        geo = self.geometry
        rng = stream(self.seed, self.stage, b)
        frames, pixels = [], []
        if self.mode in ("noon", "classical"):
            theta_map = phase_map(self.scene, geo.pixel_pitch)
            rate = self.source.pair_rate if self.mode == "noon" else self.source.classical_rate
            counts = rng.poisson(rate, size=BLOCK_FRAMES)
            owner = np.repeat(np.arange(BLOCK_FRAMES), counts)
            r, r2, mid = sample_pairs(self.source, geo, owner.size, rng)
            half = geo.half_split
            ox, oy = self.right_offset
            if self.mode == "noon":
                if self.exact_phases:
                    theta = 0.5 * (theta_map[r[:, 1], r[:, 0]] + theta_map[r2[:, 1], r2[:, 0]])
                else:
                    theta = theta_map[mid[:, 1], mid[:, 0]]
                outcome = sample_projection_pairs(theta, self.source.visibility, rng)
                swap = rng.random(owner.size) < 0.5
                first_right = (outcome == AA) | ((outcome == DA) & swap)
                second_right = (outcome == AA) | ((outcome == DA) & ~swap)
                photons = [(r, first_right), (r2, second_right)]
                ph_owner = np.concatenate([owner, owner])
            else:
                theta = theta_map[r[:, 1], r[:, 0]]
                outcome = sample_projection_singles(theta, self.source.classical_visibility, rng)
                photons = [(r, outcome == 1)]
                ph_owner = owner
            xy = np.concatenate([p for p, _ in photons])
            right = np.concatenate([s for _, s in photons])
            x = xy[:, 0] + np.where(right, half + ox, 0)
            y = xy[:, 1] + np.where(right, oy, 0)
            kept = rng.random(x.size) < self.noise.efficiency
            kept &= (x >= 0) & (x < geo.width) & (y >= 0) & (y < geo.height)
            frames.append(ph_owner[kept])
            pixels.append(y[kept] * geo.width + x[kept])
        df, dp = _dark_events(BLOCK_FRAMES, geo, self.noise.dark_prob, rng)
        frames.append(df)
        pixels.append(dp)
        f = np.concatenate(frames).astype(np.int64)
        p = np.concatenate(pixels).astype(np.int64)
        fired = np.zeros((BLOCK_FRAMES, geo.n_pixels), dtype=bool)
        fired[f, p] = True
        if self.noise.crosstalk:
            f, p = np.nonzero(fired)
            f, p = _crosstalk(f, p, self.noise.crosstalk, geo, rng)
            fired[f, p] = True
        return np.packbits(fired[:n_keep], axis=1, bitorder="little")


def _render(job: _RenderJob, n_frames: int, threads: int, metadata: dict) -> FrameStack:
    if n_frames < 1:
        raise DataError("n_frames must be >= 1")
    n_blocks = -(-n_frames // BLOCK_FRAMES)
    sizes = [min(BLOCK_FRAMES, n_frames - b * BLOCK_FRAMES) for b in range(n_blocks)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job.block, range(n_blocks), sizes))
    else:
        parts = [job.block(b, s) for b, s in enumerate(sizes)]
    return FrameStack(job.geometry, np.concatenate(parts), metadata)


def render_frames(
    scene: SceneConfig,
    source: PairSourceParams,
    noise: DetectorNoiseParams,
    geometry: DetectorGeometry,
    n_frames: int,
    seed: int,
    *,
    mode: str = "noon",
    stage: str = "frames",
    exact_phases: bool = False,
    right_offset: tuple = (0, 0),
    exposure_ns: float = DEFAULT_EXPOSURE_NS,
    frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ,
    threads: int = 1,
) -> FrameStack:
    """Render ``n_frames`` binary frames of N00N pairs (``mode="noon"``) or
    classical single photons (``mode="classical"``) on top of detector noise.

    The scene's ``bias_alpha`` sets the interferometer bias.  ``stage`` names
    the random stream; stacks that must be statistically independent need
    distinct ``(seed, stage)`` combinations.
    """
    if mode not in ("noon", "classical"):
        raise DataError(f"unknown render mode {mode!r}")
    if scene.sample_phase.shape != geometry.half_shape:
        raise DataError(
            f"scene grid {scene.sample_phase.shape} does not match sensor half {geometry.half_shape}"
        )
    job = _RenderJob(scene, source, noise, geometry, int(seed), stage, mode, exact_phases, tuple(right_offset))
    metadata = {
        "mode": mode,
        "stage": stage,
        "seed": int(seed),
        "alpha": float(scene.bias_alpha),
        "exposure_ns": float(exposure_ns),
        "frame_rate_hz": float(frame_rate_hz),
    }
    return _render(job, int(n_frames), threads, metadata)


def render_dark_frames(
    noise: DetectorNoiseParams,
    geometry: DetectorGeometry,
    n_frames: int,
    seed: int,
    *,
    stage: str = "dark",
    exposure_ns: float = DEFAULT_EXPOSURE_NS,
    frame_rate_hz: float = DEFAULT_FRAME_RATE_HZ,
    threads: int = 1,
) -> FrameStack:
    """Covered-sensor frames: dark counts plus the crosstalk they trigger."""
    job = _RenderJob(None, PairSourceParams(), noise, geometry, int(seed), stage, "dark", False, (0, 0))
    metadata = {
        "mode": "dark",
        "stage": stage,
        "seed": int(seed),
        "exposure_ns": float(exposure_ns),
        "frame_rate_hz": float(frame_rate_hz),
    }
    return _render(job, int(n_frames), threads, metadata)
