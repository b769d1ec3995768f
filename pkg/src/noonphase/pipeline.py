"""End-to-end campaign: simulate, count, retrieve and score, all in memory.

The command-line stages call these same functions and persist what they
return, so a file-based run and an in-memory run agree exactly.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import coinc, holo, metrics
from .config import RunSetup
from .errors import DataError
from .frames import FrameStack
from .pairgen import phase_map, render_dark_frames, render_frames

log = logging.getLogger(__name__)

ROLES = ("sample", "background")
NOON_PROJECTIONS = coinc.PROJECTIONS
CLASSICAL_PROJECTIONS = ("D", "A")


def step_alphas(mode: str):
    return holo.NOON_ALPHAS if mode == "noon" else holo.CLASSICAL_ALPHAS


def stage_name(role: str, mode: str, step: int) -> str:
    return f"{role}-{mode}-step{step}"


def frame_singles(stack: FrameStack) -> np.ndarray:
    """Detections per frame."""
    return np.bitwise_count(stack.bits).sum(axis=1, dtype=np.int64)


# -- simulation -------------------------------------------------------------


def simulate_dark(setup: RunSetup, cfg: dict, threads: int = 1) -> FrameStack:
    acq = cfg["acquisition"]
    return render_dark_frames(
        setup.noise, setup.geometry, cfg["dark"]["n_frames"], cfg["seed"],
        exposure_ns=acq["exposure_ns"], frame_rate_hz=acq["frame_rate_hz"], threads=threads,
    )


def _render(setup, cfg, scene, mode, role, step, n_frames, threads):
    acq = cfg["acquisition"]
    alpha = step_alphas(mode)[step]
    stack = render_frames(
        scene.with_bias(alpha), setup.source, setup.noise, setup.geometry, n_frames, cfg["seed"],
        mode=mode, stage=stage_name(role, mode, step), exact_phases=acq["exact_phases"],
        right_offset=tuple(acq["right_offset"]), exposure_ns=acq["exposure_ns"],
        frame_rate_hz=acq["frame_rate_hz"], threads=threads,
    )
    stack.metadata.update(role=role, step=step)
    return stack


def simulate_series(setup, cfg, scene, mode, role, threads=1, n_frames=None) -> list:
    """Four bias-step stacks of one mode for one scene."""
    n = n_frames if n_frames is not None else cfg["acquisition"]["noon_frames"]
    return [_render(setup, cfg, scene, mode, role, j, n, threads) for j in range(4)]


def simulate_matched_classical(setup, cfg, scene, role, target_per_step: float, threads=1) -> list:
    """Classical steps each cut at the first frame where the photon count reaches the target.

    Frame content depends only on (seed, stage, frame index), so cutting a
    longer rendering is the same as rendering exactly that many frames.
    """
    per_frame = setup.source.classical_rate * setup.noise.efficiency + setup.noise.dark_prob * setup.geometry.n_pixels
    if per_frame <= 0:
        raise DataError("classical acquisitions produce no photons; cannot match a budget")
    out = []
    for j in range(4):
        n = int(1.05 * target_per_step / per_frame) + 1024
        while True:
            stack = _render(setup, cfg, scene, "classical", role, j, n, threads)
            cum = np.cumsum(frame_singles(stack))
            if cum[-1] >= target_per_step:
                cut = int(np.searchsorted(cum, target_per_step)) + 1
                stack = FrameStack(stack.geometry, stack.bits[:cut].copy(), stack.metadata)
                break
            n *= 2
        stack.metadata["budget_target"] = float(target_per_step)
        out.append(stack)
    return out


# -- processing -------------------------------------------------------------


@dataclass
class NoonStepResult:
    images: dict
    fits: dict
    summary: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    def primary(self, projection: str) -> np.ndarray:
        return self.images[projection].primary

    def ci_total(self) -> float:
        return float(sum(self.images[p].total() for p in NOON_PROJECTIONS))


def process_settings(cfg: dict) -> dict:
    p = cfg["processing"]
    return {
        "threshold": p["threshold"],
        "min_counts": p["min_conditional_counts"],
        "min_pixels": p["min_fitted_pixels"],
        "window": p["fit_window"],
    }


def count_series(stacks, xmap=None, threads: int = 1) -> list:
    """Accidental- and crosstalk-subtracted tensors ``{projection: tensor}`` per stack."""
    out = []
    for stack in stacks:
        step = {}
        for proj in NOON_PROJECTIONS:
            cc = coinc.count_coincidences(stack, proj, threads)
            step[proj] = coinc.subtract_crosstalk(cc, xmap) if xmap is not None else cc
        stack._gram = None  # release the (W*Z)^2 accumulator
        out.append(step)
    return out


def fit_series(tensors: list, min_counts=coinc.MIN_CONDITIONAL_COUNTS,
               min_pixels=coinc.MIN_FITTED_PIXELS, window=None) -> dict:
    """One correlation fit per projection on counts summed over all bias steps.

    The pair correlation is a property of the source, not of the bias, and
    a single step can hold no counts at all in one projection (DA at zero
    total phase with unit visibility).
    """
    fits = {}
    for proj in NOON_PROJECTIONS:
        first = tensors[0][proj]
        summed = first.copy_with(sum(step[proj].counts for step in tensors))
        fits[proj] = coinc.fit_correlation_gaussian(summed, min_counts, min_pixels, window)
    return fits


def process_noon_series(stacks, xmap=None, threshold=coinc.DEFAULT_THRESHOLD,
                        min_counts=coinc.MIN_CONDITIONAL_COUNTS, min_pixels=coinc.MIN_FITTED_PIXELS,
                        window=None, threads: int = 1, keep_tensors: bool = False) -> list:
    """Count, remove crosstalk, fit, filter and project every step of a series."""
    tensors = count_series(stacks, xmap, threads)
    fits = fit_series(tensors, min_counts, min_pixels, window)
    results = []
    for step in tensors:
        images, summary, kept = {}, {}, {}
        for proj in NOON_PROJECTIONS:
            cc_f = coinc.filter_uncorrelated(step[proj], fits[proj], threshold)
            img = coinc.project_image(cc_f)
            row_total = float(img.data.reshape(-1)[cc_f.rows].sum())
            images[proj] = img
            summary[proj] = {
                **fits[proj].as_dict(),
                "threshold": threshold,
                "cc_total": step[proj].total(),
                "cc_f_total": cc_f.total(),
                "ci_total": img.total(),
                "conservation_error": abs(row_total - cc_f.total()),
            }
            if keep_tensors:
                kept[proj] = cc_f
        results.append(NoonStepResult(images, fits, summary, kept))
    return results


def classical_images(stack: FrameStack) -> dict:
    """Singles images of the D (left) and A (right) halves."""
    s, _ = coinc.singles(stack)
    stack._gram = None
    img = s.reshape(stack.geometry.height, stack.geometry.width).astype(float)
    half = stack.geometry.half_split
    return {"D": img[:, :half], "A": img[:, half:]}


# -- retrieval --------------------------------------------------------------


def retrieve(mode: str, step_images: list) -> dict:
    """Per-projection and combined phase from four steps of ``{projection: image}``."""
    projections = NOON_PROJECTIONS if mode == "noon" else CLASSICAL_PROJECTIONS
    alphas = step_alphas(mode)
    phases = {}
    for proj in projections:
        acq = holo.AcquisitionSet(proj, [step[proj] for step in step_images], alphas)
        phases[proj] = holo.psdh_noon(acq) if mode == "noon" else holo.psdh_classical(acq)
    if mode == "noon":
        phases["combined"] = holo.combine_noon(phases["DD"], phases["AA"], phases["DA"])
    else:
        phases["combined"] = holo.combine_classical(phases["D"], phases["A"])
    return phases


def truth_phase(setup: RunSetup, subtract_background: bool) -> np.ndarray:
    """Noiseless sample phase as the retrieval should report it (zero bias)."""
    truth = phase_map(setup.scene.with_bias(0.0), setup.geometry.pixel_pitch)
    if subtract_background and setup.background_scene is not None:
        truth = truth - phase_map(setup.background_scene.with_bias(0.0), setup.geometry.pixel_pitch)
    return truth


def realized_shares(step_summaries) -> tuple:
    """Fractions of ci_tot held by the DD, AA and DA images over all steps."""
    totals = np.array([sum(s[p]["ci_total"] for s in step_summaries) for p in NOON_PROJECTIONS])
    return tuple(float(t) for t in totals / totals.sum())


def analyze(noon: holo.PhaseImage, classical: holo.PhaseImage, roi=None, truth=None,
            sensitivity: metrics.SensitivityParams | None = None, seed: int = 0,
            noon_shares=None) -> dict:
    """LU of both retrievals, their ratio, ZNCC against ``truth`` and predictions.

    ``predicted_ratio`` uses the model's nominal projection shares; with
    ``noon_shares`` the prediction for the shares actually realised is added
    as ``predicted_ratio_realized``.
    """
    lu_n = metrics.local_uncertainty(noon, roi, seed=seed)
    lu_c = metrics.local_uncertainty(classical, roi, seed=seed)
    ratio, ratio_err = metrics.lu_ratio(lu_n, lu_c)
    out = {
        "lu_noon": lu_n.as_dict(),
        "lu_classical": lu_c.as_dict(),
        "lu_ratio": ratio,
        "lu_ratio_err": ratio_err,
        "masked_noon": noon.n_masked,
        "masked_classical": classical.n_masked,
    }
    if truth is not None:
        wrapped = holo.wrap(truth, np.pi / 2)
        out["zncc_noon"] = metrics.zncc(noon.phase, wrapped) if np.ptp(wrapped) > 0 else None
        out["zncc_classical"] = metrics.zncc(classical.phase, holo.wrap(truth)) if np.ptp(truth) > 0 else None
    if sensitivity is not None:
        pred = metrics.predict_sensitivity(sensitivity, 0.0)
        out["predicted_ratio"] = pred["ratio"]
        out["predicted_sd_noon"] = pred["sd_noon"]
        out["predicted_sd_classical"] = pred["sd_classical"]
        if noon_shares is not None:
            real = dataclasses.replace(sensitivity, noon_shares=tuple(noon_shares))
            out["noon_shares"] = list(real.noon_shares)
            out["predicted_ratio_realized"] = metrics.predict_sensitivity(real, 0.0)["ratio"]
    return out


# -- whole campaign ---------------------------------------------------------


@dataclass
class CampaignResult:
    phases: dict
    i_tot: int
    ci_tot: float
    metrics: dict
    fits: dict
    crosstalk: coinc.CrosstalkMap | None


def run_campaign(setup: RunSetup, cfg: dict, threads: int = 1) -> CampaignResult:
    """Simulate and evaluate one full sample (and optional background) campaign."""
    settings = process_settings(cfg)
    xmap = None
    if cfg["processing"]["crosstalk"]:
        xmap = coinc.estimate_crosstalk(simulate_dark(setup, cfg, threads), cfg["processing"]["max_radius"], threads)
    modes = cfg["acquisition"]["modes"]
    roles = ["sample"] + (["background"] if setup.background_scene is not None else [])
    phases, fits = {}, {}
    i_tot, ci_tot = 0, 0.0
    for role in roles:
        scene = setup.scene if role == "sample" else setup.background_scene
        role_ci = 0.0
        if "noon" in modes:
            results = process_noon_series(simulate_series(setup, cfg, scene, "noon", role, threads),
                                          xmap, threads=threads, **settings)
            for j, res in enumerate(results):
                fits[f"{role}-step{j}"] = res.summary
            role_ci = float(sum(res.ci_total() for res in results))
            phases[(role, "noon")] = retrieve("noon", [{p: r.primary(p) for p in NOON_PROJECTIONS} for r in results])
        if "classical" in modes:
            frames = cfg["acquisition"]["classical_frames"]
            if frames == "match":
                stacks = simulate_matched_classical(setup, cfg, scene, role, 2 * role_ci / 4, threads)
            else:
                stacks = simulate_series(setup, cfg, scene, "classical", role, threads, frames)
            steps = [classical_images(s) for s in stacks]
            if role == "sample":
                i_tot = int(sum(st["D"].sum() + st["A"].sum() for st in steps))
            phases[(role, "classical")] = retrieve("classical", steps)
        if role == "sample":
            ci_tot = role_ci
    final = {}
    for mode in modes:
        ph = phases[("sample", mode)]["combined"]
        if ("background", mode) in phases:
            ph = holo.subtract_background(ph, phases[("background", mode)]["combined"])
        final[mode] = ph
    result_metrics = {"i_tot": i_tot, "ci_tot": ci_tot}
    if "noon" in final and "classical" in final:
        sens = metrics.SensitivityParams(
            max(setup.source.visibility, 1e-9), max(setup.source.classical_visibility, 1e-9),
            cfg["analysis"]["kappa"], max(i_tot, 1),
        )
        truth = truth_phase(setup, setup.background_scene is not None)
        result_metrics.update(
            analyze(final["noon"], final["classical"], cfg["analysis"]["roi"], truth, sens, cfg["seed"],
                    realized_shares([fits[f"sample-step{j}"] for j in range(4)]))
        )
    return CampaignResult(final, i_tot, ci_tot, result_metrics, fits, xmap)
