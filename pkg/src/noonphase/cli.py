"""Command-line pipeline: simulate, dark, process, phase, analyze, report.

Every stage reads its inputs from and writes its outputs to one run
directory (``--out``)::

    config.json                 resolved configuration (defaults filled, seed applied)
    manifest.json               stage list with input/output content hashes
    sim/<role>/<mode>/stepJ.qfrs
    dark/dark.qfrs
    proc/crosstalk.csv
    proc/<role>/noon/stepJ/{DD,AA,DA,DA_right}.csv  (+ .pgm, cc_F_<proj>.csv)
    proc/<role>/classical/stepJ/{D,A}.csv
    proc/<role>/<mode>_acquisition.json
    phase/<role>/<mode>/<projection>.csv, phase/final/<mode>.csv (+ .json, .pgm)
    analyze/metrics.json, analyze/metrics.csv, analyze/sensitivity_curves.csv
    report/report.md, report/metrics.csv, report/bundle.json

Nothing that depends on ``--threads`` or wall-clock time is written, so the
same seed always produces byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import coinc, holo, io, metrics, pipeline
from .config import build, load_config
from .errors import ConfigError, DataError, NoonPhaseError
from .frames import read_qfrs, write_qfrs

log = logging.getLogger("noonphase")

STAGES = ("simulate", "dark", "process", "phase", "analyze", "report")
BUDGET_TOLERANCE = 0.02


# -- run directory helpers --------------------------------------------------


class Run:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, rel) -> Path:
        return self.root / rel

    def rel(self, path) -> str:
        # inputs passed from outside the run directory keep their absolute path
        path = Path(path).resolve()
        root = self.root.resolve()
        if path.is_relative_to(root):
            return path.relative_to(root).as_posix()
        return path.as_posix()

    def config(self) -> dict:
        p = self.path("config.json")
        if not p.exists():
            raise DataError(f"{p} not found; run `simulate` first or pass --config")
        return load_config(p)

    def manifest(self) -> dict:
        p = self.path("manifest.json")
        if p.exists():
            return io.read_json(p)
        return {"config": "config.json", "stages": []}

    def hashes(self, paths) -> dict:
        return {self.rel(p): io.sha256_file(p) for p in sorted(paths, key=lambda q: self.rel(q))}

    def record(self, stage: str, inputs, outputs, params=None) -> dict:
        entry = {
            "stage": stage,
            "inputs": self.hashes(inputs),
            "outputs": self.hashes(outputs),
            "params": params or {},
        }
        man = self.manifest()
        man["config_sha256"] = io.sha256_file(self.path("config.json"))
        stages = [s for s in man["stages"] if s["stage"] != stage] + [entry]
        man["stages"] = sorted(stages, key=lambda s: STAGES.index(s["stage"]))
        io.write_json(self.path("manifest.json"), man)
        return entry


def _resolve_config(args, run: Run) -> dict:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = run.config()
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def _save_phase(path_stem: Path, ph: holo.PhaseImage, extra=None) -> list:
    csv = io.write_matrix(path_stem.with_suffix(".csv"), ph.phase)
    meta = {"half_range": ph.half_range, "n_masked": ph.n_masked, **ph.notes, **(extra or {})}
    js = io.write_json(path_stem.with_suffix(".json"), meta)
    pgm = io.write_pgm(path_stem.with_suffix(".pgm"), ph.phase, -ph.half_range, ph.half_range)
    return [csv, js, pgm]


def read_phase(csv_path) -> holo.PhaseImage:
    csv_path = Path(csv_path)
    data = io.read_matrix(csv_path)
    side = csv_path.with_suffix(".json")
    meta = io.read_json(side) if side.exists() else {}
    return holo.PhaseImage(data, np.isfinite(data), float(meta.get("half_range", np.pi)), meta)


# -- commands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    run = Run(args.out)
    cfg = _resolve_config(args, run)
    run.root.mkdir(parents=True, exist_ok=True)
    io.write_json(run.path("config.json"), cfg)
    setup = build(cfg)
    modes = cfg["acquisition"]["modes"]
    roles = ["sample"] + (["background"] if setup.background_scene is not None else [])
    outputs, budget = [], {}
    xmap = None
    match = "classical" in modes and cfg["acquisition"]["classical_frames"] == "match"
    if match and "noon" not in modes:
        raise ConfigError("acquisition/classical_frames: \"match\" needs the noon mode")
    if match and cfg["processing"]["crosstalk"]:
        xmap = coinc.estimate_crosstalk(
            pipeline.simulate_dark(setup, cfg, args.threads), cfg["processing"]["max_radius"], args.threads
        )
    for role in roles:
        scene = setup.scene if role == "sample" else setup.background_scene
        ci_tot = None
        if "noon" in modes:
            stacks = pipeline.simulate_series(setup, cfg, scene, "noon", role, args.threads)
            for j, st in enumerate(stacks):
                outputs.append(write_qfrs(st, run.path(f"sim/{role}/noon/step{j}.qfrs")))
            budget[f"{role}/noon/detections"] = int(sum(pipeline.frame_singles(s).sum() for s in stacks))
            if match:
                results = pipeline.process_noon_series(
                    stacks, xmap, threads=args.threads, **pipeline.process_settings(cfg)
                )
                ci_tot = sum(r.ci_total() for r in results)
                budget[f"{role}/noon/ci_tot"] = ci_tot
        if "classical" in modes:
            if match:
                stacks = pipeline.simulate_matched_classical(setup, cfg, scene, role, 2 * ci_tot / 4, args.threads)
            else:
                frames = cfg["acquisition"]["classical_frames"]
                stacks = pipeline.simulate_series(setup, cfg, scene, "classical", role, args.threads, frames)
            for j, st in enumerate(stacks):
                outputs.append(write_qfrs(st, run.path(f"sim/{role}/classical/step{j}.qfrs")))
            budget[f"{role}/classical/I_tot"] = int(sum(pipeline.frame_singles(s).sum() for s in stacks))
    for key, value in sorted(budget.items()):
        print(f"budget {key}: {value:.6g}")
    run.record("simulate", [run.path("config.json")], outputs, {"seed": cfg["seed"], "budget": budget})
    print(f"simulate: wrote {len(outputs)} stacks under {run.path('sim')}")
    return 0


def cmd_dark(args) -> int:
    run = Run(args.out)
    cfg = _resolve_config(args, run)
    if not run.path("config.json").exists():
        run.root.mkdir(parents=True, exist_ok=True)
        io.write_json(run.path("config.json"), cfg)
    setup = build(cfg)
    out = write_qfrs(pipeline.simulate_dark(setup, cfg, args.threads), run.path("dark/dark.qfrs"))
    run.record("dark", [run.path("config.json")], [out], {"seed": cfg["seed"], "n_frames": cfg["dark"]["n_frames"]})
    print(f"dark: wrote {out}")
    return 0


def _sim_stacks(run: Run, role: str, mode: str) -> list:
    paths = [run.path(f"sim/{role}/{mode}/step{j}.qfrs") for j in range(4)]
    if not any(p.exists() for p in paths):
        return []
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise DataError("incomplete 4-step set; missing " + ", ".join(missing))
    return paths


def cmd_process(args) -> int:
    run = Run(args.out)
    cfg = run.config()
    settings = pipeline.process_settings(cfg)
    if args.threshold is not None:
        if not 0.0 <= args.threshold <= 1.0:
            raise ConfigError("--threshold must lie in [0, 1]")
        settings["threshold"] = args.threshold
    use_crosstalk = cfg["processing"]["crosstalk"] and not args.no_crosstalk
    inputs, outputs, summary = [], [], {"threshold": settings["threshold"], "crosstalk": use_crosstalk}
    xmap = None
    if use_crosstalk:
        dark_path = Path(args.dark) if args.dark else run.path("dark/dark.qfrs")
        if not dark_path.exists():
            raise DataError(f"crosstalk subtraction requested but dark stack {dark_path} is missing "
                            "(run `dark` or pass --no-crosstalk)")
        xmap = coinc.estimate_crosstalk(read_qfrs(dark_path), cfg["processing"]["max_radius"], args.threads)
        inputs.append(dark_path)
        rows = [(dx, dy, p) for (dx, dy), p in sorted(xmap.probabilities.items())]
        outputs.append(io.write_table(run.path("proc/crosstalk.csv"), ["dx", "dy", "p"], rows))
        summary["crosstalk_clamped"] = xmap.n_clamped
        nn = max(xmap.get(1, 0), xmap.get(0, 1))
        print(f"crosstalk: nearest-neighbour probability {nn:.4g}, {xmap.n_clamped} clamped")
    geometry = None
    for role in pipeline.ROLES:
        for mode in ("noon", "classical"):
            paths = _sim_stacks(run, role, mode)
            if not paths:
                continue
            stacks = [read_qfrs(p) for p in paths]
            inputs.extend(paths)
            for st in stacks:
                if geometry is None:
                    geometry = st.geometry
                elif st.geometry != geometry:
                    raise DataError("stacks do not share one detector geometry")
            acq = {"mode": mode, "role": role, "alphas": list(pipeline.step_alphas(mode)), "projections": {}}
            if mode == "noon":
                results = pipeline.process_noon_series(stacks, xmap, threads=args.threads, keep_tensors=True, **settings)
                for proj in pipeline.NOON_PROJECTIONS:
                    acq["projections"][proj] = [f"proc/{role}/noon/step{j}/{proj}.csv" for j in range(4)]
                for j, res in enumerate(results):
                    base = run.path(f"proc/{role}/noon/step{j}")
                    for proj in pipeline.NOON_PROJECTIONS:
                        img = res.images[proj]
                        outputs.append(io.write_matrix(base / f"{proj}.csv", img.primary))
                        outputs.append(io.write_pgm(base / f"{proj}.pgm", np.clip(img.data, 0, None)))
                        outputs.append(_write_triplets(base / f"cc_F_{proj}.csv", res.tensors[proj]))
                    outputs.append(io.write_matrix(base / "DA_right.csv", res.images["DA"].right))
                    summary[f"{role}/noon/step{j}"] = res.summary
                    for proj, s in res.summary.items():
                        print(f"{role} noon step{j} {proj}: sigma_fit={s['sigma_fit']:.3f}px "
                              f"d=({s['d_x']:.2f},{s['d_y']:.2f}) ci={s['ci_total']:.1f} "
                              f"conservation_error={s['conservation_error']:.3g}")
                acq["ci_tot"] = float(sum(r.ci_total() for r in results))
            else:
                acq["projections"] = {p: [f"proc/{role}/classical/step{j}/{p}.csv" for j in range(4)] for p in ("D", "A")}
                i_tot = 0
                for j, st in enumerate(stacks):
                    imgs = pipeline.classical_images(st)
                    for p, im in imgs.items():
                        outputs.append(io.write_matrix(run.path(f"proc/{role}/classical/step{j}/{p}.csv"), im))
                        i_tot += int(im.sum())
                acq["I_tot"] = i_tot
            outputs.append(io.write_json(run.path(f"proc/{role}/{mode}_acquisition.json"), acq))
    if geometry is None:
        raise DataError(f"no simulated stacks under {run.path('sim')}")
    outputs.append(io.write_json(run.path("proc/summary.json"), summary))
    run.record("process", inputs, outputs, {"threshold": settings["threshold"], "crosstalk": use_crosstalk})
    return 0


def _write_triplets(path, cc: coinc.CoincidenceTensor) -> Path:
    a, b = np.nonzero(cc.counts)
    xi, yi = cc.geometry.coords(cc.rows[a])
    xj, yj = cc.geometry.coords(cc.cols[b])
    return io.write_table(path, ["i_x", "i_y", "j_x", "j_y", "count"],
                          zip(xi.tolist(), yi.tolist(), xj.tolist(), yj.tolist(), cc.counts[a, b].tolist()))


def _load_acquisition(run: Run, role: str, mode: str):
    p = run.path(f"proc/{role}/{mode}_acquisition.json")
    if not p.exists():
        return None, []
    acq = io.read_json(p)
    files = [p]
    steps = [{} for _ in range(4)]
    for proj, paths in acq["projections"].items():
        if len(paths) != 4:
            raise DataError(f"{p}: projection {proj} lists {len(paths)} images, a 4-step set needs 4")
        for j, rel in enumerate(paths):
            steps[j][proj] = io.read_matrix(run.path(rel))
            files.append(run.path(rel))
    acq["steps"] = steps
    return acq, files


def cmd_phase(args) -> int:
    run = Run(args.out)
    inputs, outputs, flags = [], [], {}
    combined = {}
    for role in pipeline.ROLES:
        for mode in ("noon", "classical"):
            acq, files = _load_acquisition(run, role, mode)
            if acq is None:
                continue
            inputs.extend(files)
            phases = pipeline.retrieve(mode, acq["steps"])
            for proj, ph in phases.items():
                outputs.extend(_save_phase(run.path(f"phase/{role}/{mode}/{proj}"), ph))
            combined[(role, mode)] = phases["combined"]
            if role == "sample":
                flags[f"{mode}_budget"] = acq.get("ci_tot", acq.get("I_tot"))
    if not combined:
        raise DataError(f"no acquisition manifests under {run.path('proc')}")
    i_tot, ci_tot = flags.get("classical_budget"), flags.get("noon_budget")
    budget = {"I_tot": i_tot, "ci_tot": ci_tot}
    if i_tot and ci_tot:
        mismatch = abs(i_tot - 2 * ci_tot) / i_tot
        budget["relative_mismatch"] = mismatch
        if mismatch > BUDGET_TOLERANCE:
            log.warning("unequal photon budgets: I_tot=%s vs 2*ci_tot=%.1f (%.1f%%)", i_tot, 2 * ci_tot, 100 * mismatch)
        print(f"budget: I_tot={i_tot} 2*ci_tot={2 * ci_tot:.1f} mismatch={100 * mismatch:.2f}%")
    for mode in ("noon", "classical"):
        if ("sample", mode) not in combined:
            continue
        ph = combined[("sample", mode)]
        subtracted = ("background", mode) in combined
        if subtracted:
            ph = holo.subtract_background(ph, combined[("background", mode)])
        outputs.extend(_save_phase(run.path(f"phase/final/{mode}"), ph, {"background_subtracted": subtracted}))
    outputs.append(io.write_json(run.path("phase/budget.json"), budget))
    run.record("phase", inputs, outputs, {})
    return 0


def cmd_analyze(args) -> int:
    run = Run(args.out)
    cfg = run.config()
    noon_path = Path(args.noon) if args.noon else run.path("phase/final/noon.csv")
    cl_path = Path(args.classical) if args.classical else run.path("phase/final/classical.csv")
    noon, classical = read_phase(noon_path), read_phase(cl_path)
    roi = args.roi if args.roi is not None else cfg["analysis"]["roi"]
    if args.truth:
        truth = io.read_matrix(args.truth)
    else:
        setup = build(cfg)
        truth = pipeline.truth_phase(setup, bool(noon.notes.get("background_subtracted")))
    budget_path = run.path("phase/budget.json")
    i_tot = (io.read_json(budget_path).get("I_tot") if budget_path.exists() else None) or 1
    sens = metrics.SensitivityParams(
        max(cfg["source"]["visibility"], 1e-9), max(cfg["source"]["classical_visibility"], 1e-9),
        cfg["analysis"]["kappa"], float(i_tot),
    )
    shares = None
    proc_summary = run.path("proc/summary.json")
    if proc_summary.exists():
        summ = io.read_json(proc_summary)
        steps = [summ[f"sample/noon/step{j}"] for j in range(4) if f"sample/noon/step{j}" in summ]
        if len(steps) == 4:
            shares = pipeline.realized_shares(steps)
    result = pipeline.analyze(noon, classical, roi, truth, sens, cfg["seed"], shares)
    result["roi"] = roi
    curves = metrics.sensitivity_curves(sens, np.linspace(-np.pi / 2, np.pi / 2, 101), cfg["analysis"]["visibility_err"])
    outputs = [
        io.write_json(run.path("analyze/metrics.json"), result),
        io.write_table(run.path("analyze/metrics.csv"), ["metric", "value"], _flatten(result)),
        io.write_columns(run.path("analyze/sensitivity_curves.csv"), curves),
    ]
    print(f"LU noon={result['lu_noon']['lu']:.4f}+-{result['lu_noon']['std_error']:.4f} "
          f"classical={result['lu_classical']['lu']:.4f}+-{result['lu_classical']['std_error']:.4f} "
          f"ratio={result['lu_ratio']:.3f}+-{result['lu_ratio_err']:.3f} predicted={result['predicted_ratio']:.3f}")
    run.record("analyze", [noon_path, cl_path], outputs, {"roi": roi})
    return 0


def _flatten(d, prefix=""):
    rows = []
    for k in sorted(d):
        v = d[k]
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            rows.extend(_flatten(v, key + "."))
        elif isinstance(v, (list, tuple)):
            rows.append((key, " ".join(str(x) for x in v)))
        else:
            rows.append((key, v))
    return rows


def cmd_report(args) -> int:
    run = Run(args.out)
    man_path = run.path("manifest.json")
    if not man_path.exists():
        raise DataError(f"no manifest at {man_path}")
    man = io.read_json(man_path)
    if not man.get("stages"):
        raise DataError(f"{man_path} lists no stages")
    missing, changed = [], []
    for stage in man["stages"]:
        for rel, digest in stage["outputs"].items():
            p = run.path(rel)
            if not p.exists():
                missing.append(f"{stage['stage']}: {rel}")
            elif io.sha256_file(p) != digest:
                changed.append(f"{stage['stage']}: {rel}")
    if missing or changed:
        lines = [f"missing {m}" for m in missing] + [f"modified {c}" for c in changed]
        raise DataError("report cannot be assembled:\n  " + "\n  ".join(lines))
    metrics_path = run.path("analyze/metrics.json")
    result = io.read_json(metrics_path) if metrics_path.exists() else {}
    proc = run.path("proc/summary.json")
    bundle = {
        "config_sha256": man.get("config_sha256"),
        "seed": run.config()["seed"],
        "stages": man["stages"],
        "metrics": result,
        "processing": io.read_json(proc) if proc.exists() else {},
    }
    bundle_path = io.write_json(run.path("report/bundle.json"), bundle)
    rows = _flatten(result)
    csv_path = io.write_table(run.path("report/metrics.csv"), ["metric", "value"], rows)
    md = ["# noonphase reproduction report", "", f"seed: {bundle['seed']}", f"config sha256: {bundle['config_sha256']}", ""]
    md += ["| metric | value |", "|---|---|"] + [f"| {k} | {v} |" for k, v in rows]
    md += ["", "## Artifacts", ""]
    for stage in man["stages"]:
        md.append(f"### {stage['stage']}")
        md += [f"- `{rel}` {digest[:16]}" for rel, digest in stage["outputs"].items()]
        md.append("")
    md_path = run.path("report/report.md")
    md_path.parent.mkdir(parents=True, exist_ok=True)
    md_path.write_text("\n".join(md) + "\n", encoding="utf-8")
    digest = io.sha256_file(bundle_path)
    print(f"bundle sha256: {digest}")
    io.write_json(run.path("report/bundle.sha256.json"), {"bundle.json": digest, "report.md": io.sha256_file(md_path), "metrics.csv": io.sha256_file(csv_path)})
    return 0


# -- entry point ------------------------------------------------------------


def _roi(text):
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("roi is x0,y0,x1,y1")
    return parts


def _add_global(parser, suppress: bool):
    # subcommands repeat the global flags with suppressed defaults, so
    # `noonphase --seed 3 simulate` and `noonphase simulate --seed 3` agree
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    parser.add_argument("--threads", type=int, default=d(1), help="worker threads (results do not depend on it)")
    parser.add_argument("--config", default=d(None), help="JSON run configuration")
    parser.add_argument("--out", default=d("run"), help="run directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_global(common, suppress=True)
    parser = argparse.ArgumentParser(prog="noonphase", description=__doc__.splitlines()[0])
    _add_global(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="render all bias-step frame stacks")
    sub.add_parser("dark", parents=[common], help="render the covered-sensor stack")
    p = sub.add_parser("process", parents=[common], help="coincidence images and singles images")
    p.add_argument("--threshold", type=float, default=None, help="correlation filter threshold t (default 0.5)")
    p.add_argument("--no-crosstalk", action="store_true", help="skip crosstalk estimation and subtraction")
    p.add_argument("--dark", default=None, help="dark stack (default <out>/dark/dark.qfrs)")
    sub.add_parser("phase", parents=[common], help="phase-shifting retrieval and combination")
    a = sub.add_parser("analyze", parents=[common], help="LU, ZNCC and predicted sensitivity")
    a.add_argument("--roi", type=_roi, default=None, help="x0,y0,x1,y1 (exclusive upper bounds)")
    a.add_argument("--truth", default=None, help="CSV ground-truth phase grid")
    a.add_argument("--noon", default=None, help="N00N phase CSV (default phase/final/noon.csv)")
    a.add_argument("--classical", default=None, help="classical phase CSV (default phase/final/classical.csv)")
    sub.add_parser("report", parents=[common], help="assemble the reproducibility bundle")
    return parser


COMMANDS = {
    "simulate": cmd_simulate,
    "dark": cmd_dark,
    "process": cmd_process,
    "phase": cmd_phase,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return ConfigError.exit_code
    try:
        return COMMANDS[args.command](args)
    except NoonPhaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


def bundle_digest(out) -> str:
    """sha256 of a finished run's ``report/bundle.json``."""
    return hashlib.sha256(Path(out, "report", "bundle.json").read_bytes()).hexdigest()


if __name__ == "__main__":
    sys.exit(main())
