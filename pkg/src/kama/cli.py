"""Command-line entry point.

Exit codes: 0 success, 2 configuration error (bad arguments, missing paths,
invalid specs), 3 malformed input file, 4 numerical failure, 5 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .articulate import fit_keypoints, fit_vertices, kama
from .errors import (BehindCamera, DegenerateInput, InvalidSpec, IoError, KamaError, ModelError,
                     NonFinite, ParseError, PriorLoadError, SizeMismatch)
from .model import load_model, save_model

log = logging.getLogger("kama")

EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
MODES = ("kama", "kama+refine", "refine-only")


class ConfigError(KamaError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, InvalidSpec)):
        return EXIT_CONFIG
    if isinstance(exc, (ParseError, ModelError, PriorLoadError, SizeMismatch)):
        return EXIT_PARSE
    if isinstance(exc, (NonFinite, DegenerateInput, BehindCamera, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (IoError, OSError)):
        return EXIT_IO
    return 1


def worker_count() -> int:
    raw = os.environ.get("KAMA_THREADS")
    if raw is None:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"KAMA_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"KAMA_THREADS must be a positive integer, got {raw!r}")
    return n


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ConfigError(f"output path exists and is not a directory: {path}")
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path}: {exc}") from exc
    return p


def _write_json(path: Path, doc) -> None:
    try:
        path.write_text(json.dumps(doc, indent=1) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _write_csv(path: Path, header, rows) -> None:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


# articulate ---------------------------------------------------------------

@dataclass
class RunConfig:
    model: Path
    input: Path
    out: Path
    mode: str = "kama"
    refine: object = None  # RefineConfig
    prior: Optional[Path] = None
    gt: Optional[Path] = None
    seed: int = 0
    obj: bool = False


def _process_frame(model, record, cfg: RunConfig, prior):
    from .harness import init_mean_pose
    from .refine import refine

    X = record.keypoints
    t0 = time.perf_counter()
    trace, initial, diag = [], None, ""
    if cfg.mode == "refine-only":
        state = init_mean_pose(model, X)
    else:
        state = kama(model, X)
    t_kama = 1000.0 * (time.perf_counter() - t0)
    if cfg.mode != "kama":
        try:
            res = refine(state, model, X, record.camera, cfg.refine, prior)
            state, trace, initial, diag = res.state, res.trace, res.initial_loss, res.diagnostic
        except (BehindCamera, NonFinite) as exc:
            # keep the unrefined estimate; the run reports the frame and exits non-zero
            diag = f"not refined: {exc}"
    total_ms = 1000.0 * (time.perf_counter() - t0)
    return state, {"trace": trace, "initial_loss": initial, "diagnostic": diag,
                   "timing_kama_ms": t_kama, "timing_ms": total_ms}


def _mean_or_none(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def run(cfg: RunConfig) -> int:
    from . import io as kio
    from .harness import metric_pa_mpjpe, evaluate
    from .priors import load_gmm_prior
    from .refine import Objective, Params

    np.random.seed(cfg.seed)
    model = load_model(cfg.model)
    records = sorted(kio.load_frames(cfg.input, model), key=lambda r: r.frame_id)
    prior = load_gmm_prior(cfg.prior, model.tree) if cfg.prior else None
    truth = None
    if cfg.gt is not None:
        gt_ids, gt_states = kio.load_fit_with_ids(cfg.gt)
        by_id = dict(zip(gt_ids, gt_states))
        missing = [r.frame_id for r in records if r.frame_id not in by_id]
        if missing:
            raise ParseError(f"{cfg.gt}: no ground truth for frames {missing[:5]}")
        truth = [by_id[r.frame_id] for r in records]
    out = _out_dir(str(cfg.out))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(lambda r: _process_frame(model, r, cfg, prior), records))
    states = [s for s, _ in results]
    ids = [r.frame_id for r in records]
    kio.write_fit(states, out / "fits.json", ids)

    if cfg.obj:
        mesh_dir = out / "meshes"
        mesh_dir.mkdir(exist_ok=True)
        for fid, st in zip(ids, states):
            kio.write_obj(fit_vertices(model, st), model.faces, mesh_dir / f"frame_{fid:06d}.obj")

    ev = model.eval_indices
    frames = []
    for rec, (st, info) in zip(records, results):
        obj = Objective(model, rec.keypoints, rec.camera, cfg.refine, prior)
        try:
            values, _ = obj.evaluate(Params.from_state(st), need_grad=False)
            loss = obj.total(values)
        except (BehindCamera, NonFinite) as exc:
            values, loss = None, None
            if not info["diagnostic"]:
                info = {**info, "diagnostic": str(exc)}
        kp = fit_keypoints(model, st)
        frames.append({
            "frame_id": rec.frame_id,
            "loss": loss,
            "terms": values,
            "pa_mpjpe_to_input": metric_pa_mpjpe(kp[ev], rec.keypoints.positions[ev]),
            **info,
        })
    report = None
    if truth is not None:
        report = evaluate(model, states, truth, ids, [f["timing_ms"] for f in frames])
        for f, a, b, c in zip(frames, report.mpve, report.mpjpe, report.pa_mpjpe):
            f.update(mpve=a, mpjpe=b, pa_mpjpe=c)
    summary = {
        "mode": cfg.mode,
        "num_frames": len(frames),
        "iterations": cfg.refine.iterations if cfg.mode != "kama" else 0,
        "mean_loss": _mean_or_none([f["loss"] for f in frames]),
        "mean_pa_mpjpe_to_input": float(np.mean([f["pa_mpjpe_to_input"] for f in frames])) if frames else None,
        "mean_timing_ms": float(np.mean([f["timing_ms"] for f in frames])) if frames else None,
        "frames": frames,
    }
    if report is not None:
        summary.update({k: report.aggregate[k] for k in ("mpve", "mpjpe", "pa_mpjpe")})
    _write_json(out / "summary.json", summary)
    cols = ["frame_id", "loss", "pa_mpjpe_to_input", "timing_ms"] + (["mpve", "mpjpe", "pa_mpjpe"] if report else [])
    _write_csv(out / "summary.csv", cols, [[f[c] for c in cols] for f in frames])
    if cfg.mode != "kama" and frames:
        from .plotting import plot_loss_traces
        plot_loss_traces({cfg.mode: [f["trace"] for f in frames]}, out / "loss_trace.png")
    diags = [f"frame {f['frame_id']}: {f['diagnostic']}" for f in frames if f["diagnostic"]]
    for d in diags:
        log.warning(d)
    return EXIT_NUMERIC if diags else EXIT_OK


def _refine_config(args):
    from .refine import RefineConfig
    kw = {}
    for flag, name in (("iters", "iterations"), ("w1", "omega1"), ("w2", "omega2"), ("w3", "omega3"),
                       ("w2d", "weight_2d"), ("step", "step_size")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[name] = v
    try:
        return RefineConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_articulate(args) -> int:
    mode = args.mode or ("kama+refine" if args.refine else "kama")
    cfg = RunConfig(
        model=_existing(args.model, "model file"),
        input=_existing(args.input, "input file"),
        out=Path(args.out), mode=mode, refine=_refine_config(args),
        prior=_existing(args.prior, "prior file") if args.prior else None,
        gt=_existing(args.gt, "ground-truth file") if args.gt else None,
        seed=args.seed, obj=args.obj)
    return run(cfg)


# harness commands ---------------------------------------------------------

def _load_spec(path):
    from .harness import SynthSpec
    return SynthSpec.from_dict(_read_json(_existing(path, "spec file"))) if path else SynthSpec()


def cmd_synth(args) -> int:
    from . import io as kio
    from .harness import synth_generate

    model = load_model(_existing(args.model, "model file"))
    spec = _load_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    data = synth_generate(model, spec)
    out = _out_dir(args.out)
    kio.write_frames(data.frames, model.tree.keypoint_names, out / "frames.json")
    kio.write_fit(data.ground_truth, out / "gt.json", [f.frame_id for f in data.frames])
    _write_json(out / "spec.json", spec.to_dict())
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import io as kio
    from .harness import evaluate
    from .plotting import plot_per_frame

    model = load_model(_existing(args.model, "model file"))
    fit_ids, fits = kio.load_fit_with_ids(_existing(args.fits, "fit file"))
    gt_ids, gts = kio.load_fit_with_ids(_existing(args.gt, "ground-truth file"))
    by_id = dict(zip(gt_ids, gts))
    missing = [i for i in fit_ids if i not in by_id]
    if missing:
        raise ParseError(f"{args.gt}: no ground truth for frames {missing[:5]}")
    report = evaluate(model, fits, [by_id[i] for i in fit_ids], fit_ids)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        _out_dir(str(out.parent))
    _write_json(out, report.to_dict())
    rows = [[i, a, b, c] for i, a, b, c in zip(fit_ids, report.mpve, report.mpjpe, report.pa_mpjpe)]
    _write_csv(out.with_suffix(".csv"), ["frame_id", "mpve_mm", "mpjpe_mm", "pa_mpjpe_mm"], rows)
    if fit_ids:
        plot_per_frame(fit_ids, {"MPVE": report.mpve, "MPJPE": report.mpjpe, "PA-MPJPE": report.pa_mpjpe},
                       out.with_suffix(".png"))
    agg = report.aggregate
    print(f"frames {agg['num_frames']}  MPVE {agg['mpve']:.3f} mm  MPJPE {agg['mpjpe']:.3f} mm  "
          f"PA-MPJPE {agg['pa_mpjpe']:.3f} mm")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .harness import ARMS, experiment_init_comparison
    from .plotting import plot_loss_traces, plot_metric_bars

    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    model = load_model(_existing(args.model, "model file"))
    spec = _load_spec(args.spec)
    cfg = _refine_config(args)
    out = _out_dir(args.out)
    rows, per_seed = [], []
    traces = {a: [] for a in ARMS}
    for k in range(args.seeds):
        rep = experiment_init_comparison(model, replace(spec, seed=spec.seed + k), cfg)
        summ = rep.summary()
        per_seed.append({"seed": spec.seed + k, **summ, "ordering_holds": rep.ordering_holds()})
        for a in ARMS:
            s = summ["arms"][a]
            rows.append([spec.seed + k, a, s["mean_initial_loss"], s["mean_final_loss"], s["mean_init_pa_mpjpe"],
                         s["mean_pa_mpjpe"], s["reached_threshold"], s["mean_iterations_to_threshold"]])
            traces[a].extend(rep.arms[a].traces)
    held = sum(p["ordering_holds"] for p in per_seed)
    _write_json(out / "comparison.json", {"seeds": per_seed, "ordering_held": held, "num_seeds": args.seeds})
    _write_csv(out / "comparison.csv",
               ["seed", "arm", "initial_loss", "final_loss", "init_pa_mpjpe_mm", "pa_mpjpe_mm",
                "frames_reaching_threshold", "iterations_to_threshold"], rows)
    plot_loss_traces(traces, out / "loss_traces.png")
    means = {a: float(np.mean([r[5] for r in rows if r[1] == a])) for a in ARMS}
    plot_metric_bars(means, out / "pa_mpjpe.png")
    print(f"ordering kama <= mean_pose <= no_init held on {held}/{args.seeds} seeds")
    for a in ARMS:
        print(f"  {a:10s} mean PA-MPJPE {means[a]:.2f} mm")
    return EXIT_OK


def cmd_make_model(args) -> int:
    from .synthetic import make_synthetic_model
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        raise ConfigError(f"directory does not exist: {out.parent}")
    save_model(make_synthetic_model(num_vertices=args.vertices), out)
    return EXIT_OK


# parser -------------------------------------------------------------------

def _add_refine_flags(p):
    p.add_argument("--iters", type=int, help="Adam iterations (default 100)")
    p.add_argument("--w1", type=float, help="3D keypoint term weight (default 500)")
    p.add_argument("--w2", type=float, help="shape prior weight (default 4.78)")
    p.add_argument("--w3", type=float, help="pose prior weight (default 5)")
    p.add_argument("--w2d", type=float, help="reprojection term weight (default 1)")
    p.add_argument("--step", type=float, help="Adam step size (default 0.01)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kama", description="Articulate a skinned body model from 3D keypoints.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("articulate", help="fit every frame of a keypoint file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--refine", action="store_true", help="shorthand for --mode kama+refine")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--prior", help="Gaussian-mixture pose prior file")
    p.add_argument("--gt", help="ground-truth fit file; adds error metrics to the summary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--obj", action="store_true", help="write one OBJ mesh per frame")
    _add_refine_flags(p)
    p.set_defaults(func=cmd_articulate)

    p = sub.add_parser("synth", help="generate a synthetic keypoint dataset with ground truth")
    p.add_argument("--model", required=True)
    p.add_argument("--spec", help="JSON synthesis spec (defaults otherwise)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score fits against ground truth")
    p.add_argument("--model", required=True)
    p.add_argument("--fits", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True, help="report JSON; CSV and PNG are written beside it")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="compare refinement initialisations")
    p.add_argument("--model", required=True)
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=10)
    _add_refine_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("make-model", help="write the built-in procedural body model")
    p.add_argument("--out", required=True)
    p.add_argument("--vertices", type=int, default=4000)
    p.set_defaults(func=cmd_make_model)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # every failure gets a classified exit code
        code = exit_code_for(exc)
        kind = {EXIT_CONFIG: "config", EXIT_PARSE: "parse", EXIT_NUMERIC: "numeric",
                EXIT_IO: "io"}.get(code, "internal")
        print(f"kama: {kind} error: {exc}", file=sys.stderr)
        if args.verbose:
            log.exception("details")
        return code


if __name__ == "__main__":
    sys.exit(main())
