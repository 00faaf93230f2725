"""Command-line front end: synth, flow, fit, interpolate, eval and sweep."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import flow_field as ff
from .config import PRESETS, ConfigError, ExperimentConfig, load_config_file, resolve
from .metrics import video_metrics
from .optim import LOG_FILE, MODEL_FILE, NumericalAbort, fit
from .siren_net import ModelFileError, init_siren, load_model
from .video_store import (HELD_OUT, OBSERVED, FrameLoadError, SceneSpec, load_frames,
                          render_frames, save_frames, split_observed, synth_scene)

log = logging.getLogger("ofsiren")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

RESOLVED_CONFIG = "resolved_config.json"
METRIC_COLUMNS = ["frame_index", "role", "psnr", "ssim", "exact_match"]
SWEEP_COLUMNS = ["axis", "setting", "of", "lambda", "role", "psnr", "ssim", "global_psnr", "status"]


class UsageError(ValueError):
    pass


# --- argument parsing helpers --------------------------------------------------

def parse_dims(text: str) -> tuple[int, int, int]:
    """'WxHxT' -> (T, H, W)."""
    try:
        w, h, t = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"dims must look like 48x48x16 (WxHxT), got {text!r}") from None
    return t, h, w


def parse_motion(text: str) -> dict:
    kind, _, arg = text.partition(":")
    try:
        if kind == "static":
            return {"motion": "static"}
        if kind == "translate":
            u, v = (float(p) for p in arg.split(","))
            return {"motion": "translate", "velocity": (u, v)}
        if kind == "rotate":
            return {"motion": "rotate", "rate": float(arg)}
    except ValueError:
        pass
    raise UsageError(f"motion must be static, translate:U,V or rotate:RATE, got {text!r}")


def parse_floats(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# --- pipeline pieces shared by fit and sweep --------------------------------------

def data_paths(data: dict) -> dict:
    root = Path(data["root"]) if data.get("root") else None
    pick = lambda key, default: Path(data[key]) if data.get(key) else (root / default if root else None)
    return {"frames": pick("frames", "frames"), "flow_dir": pick("flow_dir", "flow"),
            "scene_spec": pick("scene_spec", "scene.json")}


def read_flow_dir(flow_dir: Path, H: int, W: int) -> ff.PixelFlow:
    grids = {}
    for p in sorted(flow_dir.glob("*.flo")):
        digits = "".join(ch for ch in p.stem if ch.isdigit())
        if not digits:
            continue
        grids[int(digits)] = ff.rescale_flow(ff.read_flo(p).astype(np.float64), H, W)
    return ff.PixelFlow(grids)


def resolve_flow(exp: ExperimentConfig, video) -> tuple[ff.PixelFlow, str]:
    """Pick the flow source: explicit .flo files, then synthetic truth, then Horn-Schunck."""
    paths = data_paths(exp.data)
    source = exp.data["flow_source"]
    has_flo = paths["flow_dir"] is not None and paths["flow_dir"].is_dir() \
        and any(paths["flow_dir"].glob("*.flo"))
    has_scene = paths["scene_spec"] is not None and paths["scene_spec"].is_file()
    if source == "auto":
        source = "file" if has_flo else "synth" if has_scene else "horn-schunck"
    if source == "file":
        if not has_flo:
            raise FileNotFoundError(f"no .flo files in {paths['flow_dir']}")
        return read_flow_dir(paths["flow_dir"], video.H, video.W), source
    if source == "synth":
        if not has_scene:
            raise FileNotFoundError(f"scene spec {paths['scene_spec']} not found")
        scene = SceneSpec.from_json(paths["scene_spec"].read_text())
        if scene.dims != video.dims:
            raise ConfigError(f"scene dims {scene.dims} do not match frames {video.dims}")
        return ff.synth_flow(scene), source
    flow = ff.observed_pixel_flow(video.frames, video.observed,
                                  float(exp.data["hs_alpha"]), int(exp.data["hs_iterations"]))
    return flow, source


def run_fit(exp: ExperimentConfig, resume: bool = False) -> Path:
    """Fit a model as configured and write checkpoint, log, renders and resolved config."""
    paths = data_paths(exp.data)
    if paths["frames"] is None:
        raise ConfigError("data.frames (or data.root) is required")
    video = load_frames(paths["frames"])
    split_observed(video, int(exp.data["stride"]))
    flow, source = resolve_flow(exp, video)

    out = exp.output_dir
    out.mkdir(parents=True, exist_ok=True)
    resolved = exp.resolved()
    resolved["data"]["flow_source"] = source
    resolved["geometry"] = {"T": video.T, "H": video.H, "W": video.W}
    (out / RESOLVED_CONFIG).write_text(json.dumps(resolved, indent=2, default=str))

    model = init_siren(exp.model, exp.train.seed, dtype=exp.train.dtype)
    log.info("fitting %s on %s (%d observed frames, flow: %s)", exp.model, paths["frames"],
             len(video.observed), source)
    fit(model, video, flow, exp.train, out_dir=out, resume=resume)
    render_frames(model, range(video.T), video.dims, out_dir=out / "render")
    return out


def geometry_for(checkpoint: Path) -> tuple[int, int, int] | None:
    cfg = checkpoint.parent / RESOLVED_CONFIG
    if cfg.is_file():
        g = json.loads(cfg.read_text()).get("geometry")
        if g:
            return g["T"], g["H"], g["W"]
    return None


def run_eval(rendered_dir, truth_dir, stride: int = 2):
    truth = load_frames(truth_dir)
    rendered = load_frames(rendered_dir)
    if rendered.T != truth.T:
        raise UsageError(f"{rendered.T} rendered frames vs {truth.T} ground-truth frames")
    roles = split_observed(truth, stride)
    return video_metrics(rendered, truth, roles)


def write_metrics_csv(path, vm) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for m in vm.frames:
            w.writerow(m.csv_row())
        for role in (OBSERVED, HELD_OUT):
            s = vm.summaries.get(role)
            if s is None:
                continue
            exact = all(m.exact_match for m in vm.frames if m.role == role)
            w.writerow(["mean", role, s.mean_psnr, s.mean_ssim, int(exact)])


# --- subcommands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    T, H, W = parse_dims(args.dims)
    motion = parse_motion(args.motion)
    pattern = {"checkerboard": "checker"}.get(args.pattern, args.pattern)
    try:
        spec = SceneSpec(pattern=pattern, dims=(T, H, W), seed=args.seed, **motion)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    video, spec = synth_scene(spec)
    out = Path(args.out)
    save_frames(video.frames, out / "frames")
    (out / "flow").mkdir(parents=True, exist_ok=True)
    for k, grid in ff.synth_flow(spec).grids.items():
        ff.write_flo(out / "flow" / f"frame_{k:04d}.flo", grid)
    (out / "scene.json").write_text(spec.to_json())
    print(f"wrote {T} frames and flows to {out}")
    return EXIT_OK


def cmd_flow(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.from_flo:
        files = sorted(Path(args.from_flo).glob("*.flo"))
        if not files:
            raise FileNotFoundError(f"no .flo files in {args.from_flo}")
        for p in files:
            ff.write_flo(out / p.name, ff.read_flo(p))
        print(f"copied {len(files)} flow files to {out}")
        return EXIT_OK
    video = load_frames(args.frames)
    split_observed(video, args.stride)
    flow = ff.observed_pixel_flow(video.frames, video.observed, args.alpha, args.iterations)
    for k, grid in flow.grids.items():
        ff.write_flo(out / f"frame_{k:04d}.flo", grid)
    print(f"wrote {len(flow.grids)} Horn-Schunck flows to {out}")
    return EXIT_OK


def experiment_from_args(args) -> ExperimentConfig:
    file_cfg = load_config_file(args.config) if args.config else {}
    overrides: dict = {}
    def put(section, key, value):
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    put("loss", "lambda", getattr(args, "lam", None))
    put("train", "epochs", getattr(args, "epochs", None))
    put("train", "seed", getattr(args, "seed", None))
    put("data", "root", getattr(args, "data", None))
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return resolve(file_cfg, args.preset, overrides)


def cmd_fit(args) -> int:
    exp = experiment_from_args(args)
    out = run_fit(exp, resume=args.resume)
    print(f"checkpoint: {out / MODEL_FILE}\nlog: {out / LOG_FILE}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    ckpt = Path(args.checkpoint)
    model = load_model(ckpt)
    dims = parse_dims(args.dims) if args.dims else geometry_for(ckpt)
    if dims is None:
        raise UsageError("video dims unknown: pass --dims WxHxT")
    if args.times:
        times = parse_floats(args.times)
    elif args.between:
        a, b = parse_floats(args.between)
        times = [a + (b - a) * (i + 1) / (args.count + 1) for i in range(args.count)]
    else:
        raise UsageError("give --times or --between")
    T = dims[0]
    for t in times:
        if not 0 <= t <= T - 1:
            log.warning("t=%g lies outside the fitted range [0, %d]; extrapolating", t, T - 1)
    render_frames(model, times, dims, out_dir=args.out)
    print(f"rendered {len(times)} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    vm = run_eval(args.rendered, args.truth, args.stride)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, vm)
    for role in (OBSERVED, HELD_OUT):
        s = vm.summaries.get(role)
        if s:
            print(f"{role:9s} mean PSNR {s.mean_psnr:.3f} dB (pooled {s.global_psnr:.3f} dB), "
                  f"mean SSIM {s.mean_ssim:.4f}")
    return EXIT_OK


def sweep_settings(axis: str, grid: str, cross_of: bool, base_lam: float):
    """Yield (setting label, overrides, of label) for each sweep member."""
    if axis == "of-onoff":
        items = [g.strip() for g in grid.split(",")] if grid else ["on", "off"]
        for g in items:
            if g not in ("on", "off"):
                raise UsageError(f"of-onoff grid entries must be on/off, got {g!r}")
            yield g, {"loss": {"lambda": base_lam if g == "on" else 0.0}}, g
        return
    members = []
    for g in (p.strip() for p in grid.split(",") if p.strip()):
        try:
            if axis == "lambda":
                members.append((g, {"loss": {"lambda": float(g)}}))
            elif axis == "omega":
                members.append((g, {"model": {"omega": float(g)}}))
            elif axis == "width":
                members.append((g, {"model": {"width": int(g)}}))
            elif axis == "width-depth":
                w, d = (int(p) for p in g.lower().split("x"))
                members.append((g, {"model": {"width": w, "depth": d}}))
            else:
                raise UsageError(f"unknown sweep axis {axis!r}")
        except ValueError:
            raise UsageError(f"bad grid value {g!r} for axis {axis}") from None
    for label, over in members:
        if cross_of:
            for of in ("on", "off"):
                o = json.loads(json.dumps(over))
                o.setdefault("loss", {})["lambda"] = base_lam if of == "on" else 0.0
                yield label, o, of
        else:
            lam = over.get("loss", {}).get("lambda", base_lam)
            yield label, over, "on" if lam > 0 else "off"


def run_sweep(base: dict, axis: str, grid: str, out: Path, cross_of: bool = False,
              preset: str | None = None) -> list[dict]:
    exp0 = resolve(base, preset)
    base_raw = exp0.resolved()
    base_raw.pop("preset", None)
    paths = data_paths(exp0.data)
    rows = []
    out.mkdir(parents=True, exist_ok=True)
    for i, (label, over, of) in enumerate(sweep_settings(axis, grid, cross_of, exp0.lam)):
        run_dir = out / f"run_{i:02d}_{axis}_{label}_{of}".replace("/", "-")
        over = dict(over, output_dir=str(run_dir))
        lam = None
        try:
            exp = resolve(base_raw, None, over)
            lam = exp.lam
            run_fit(exp)
            vm = run_eval(run_dir / "render", paths["frames"], int(exp.data["stride"]))
            for role in (OBSERVED, HELD_OUT):
                s = vm.summaries[role]
                rows.append(_sweep_row(axis, label, of, lam, role, s.mean_psnr, s.mean_ssim,
                                       s.global_psnr, "ok"))
        except (NumericalAbort, ConfigError, ValueError, OSError) as exc:
            log.error("sweep member %s=%s (OF %s) failed: %s", axis, label, of, exc)
            for role in (OBSERVED, HELD_OUT):
                rows.append(_sweep_row(axis, label, of, lam, role, "", "", "", f"failed: {exc}"))
        write_sweep_csv(out / "sweep.csv", rows)
    return rows


def _sweep_row(*values) -> dict:
    return dict(zip(SWEEP_COLUMNS, values))


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def cmd_sweep(args) -> int:
    base = load_config_file(args.config) if args.config else {}
    if args.data:
        base.setdefault("data", {})["root"] = args.data
    rows = run_sweep(base, args.axis, args.grid or "", Path(args.out), args.cross_of, args.preset)
    for r in rows:
        val = r["psnr"] if r["psnr"] == "" else f"{r['psnr']:.2f}"
        print(f"{r['axis']}={r['setting']:>6} OF {r['of']:3s} {r['role']:9s} PSNR {val}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ofsiren", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic scene with exact flow")
    s.add_argument("--pattern", default="texture", choices=["texture", "blobs", "checker", "checkerboard"])
    s.add_argument("--motion", default="translate:1,0.5", help="static | translate:U,V | rotate:RATE")
    s.add_argument("--dims", default="48x48x16", help="WxHxT")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("flow", help="Horn-Schunck flow for observed frames, or .flo passthrough")
    s.add_argument("--frames")
    s.add_argument("--from-flo", help="directory of existing .flo files to copy")
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--alpha", type=float, default=0.1)
    s.add_argument("--iterations", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_flow)

    def experiment_args(s):
        s.add_argument("--config", help="JSON experiment config")
        s.add_argument("--preset", choices=sorted(PRESETS))
        s.add_argument("--data", help="dataset directory (frames/, flow/, scene.json)")

    s = sub.add_parser("fit", help="fit a model to the observed frames")
    experiment_args(s)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("interpolate", help="render frames at arbitrary times")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--times", help="comma-separated frame times, e.g. 0.25,0.5")
    s.add_argument("--between", help="A,B: render --count uniform times strictly between")
    s.add_argument("--count", type=int, default=3)
    s.add_argument("--dims", help="WxHxT of the fitted video (default: from resolved config)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("eval", help="PSNR/SSIM of rendered frames against ground truth")
    s.add_argument("--rendered", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="ablation sweep over one parameter")
    experiment_args(s)
    s.add_argument("--axis", required=True, choices=["lambda", "omega", "width", "width-depth", "of-onoff"])
    s.add_argument("--grid", help="comma-separated values (width-depth: WxD)")
    s.add_argument("--cross-of", action="store_true", help="run every setting with OF on and off")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FrameLoadError, ff.FlowFileError, ModelFileError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
