"""Command-line entry point: paint, ablate, oracle-test, gen-assets, report."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import assets
from .config import ConfigError, _read_items, config_from_items, parse_config
from .geometry import Texture
from .pipeline import (ABLATIONS, RunResult, build_scene, consistency_report, paint, procedural_texture, prompt_seed,
                       run_ablation)
from .render import load_png, save_depth_png, save_png

OUT_ENV = "MVTEX_OUT"


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "mvtex_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args, out: Path, extra=()):
    overrides = list(extra) + list(args.set or [])
    if args.threads is not None:
        overrides.append(f"workers={args.threads}")
    return parse_config(args.config, overrides, echo_dir=out)


def write_run(out: Path, result: RunResult, scene) -> None:
    """Save every artifact of a run; report.txt is written last."""
    save_png(out / "texture.png", result.texture.data)
    save_png(out / "texture_fused.png", result.fused_texture.data)
    (out / "views").mkdir(exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    for k, (img, dm) in enumerate(zip(result.final_views, scene.views.depths)):
        save_png(out / "views" / f"view_{k}.png", img)
        save_depth_png(out / "depth" / f"depth_{k}.png", dm)
    np.savez(out / "artifacts.npz", texture=result.texture.data, fused_texture=result.fused_texture.data,
             views=np.array(result.final_views), latents=np.array(result.final_latents))
    with open(out / "steps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "variance_before", "variance_after", "fit_initial", "fit_final"])
        for s in result.steps:
            w.writerow([s.t, repr(s.variance_before), repr(s.variance_after), repr(s.fit_initial), repr(s.fit_final)])
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "iteration", "view", "l1"])
        for t, trace in result.loss_traces:
            for it, row in enumerate(trace):
                for k, v in enumerate(row):
                    w.writerow([t, it, k, repr(float(v))])
    (out / "report.txt").write_text(result.report.to_text())


def cmd_paint(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args, out)
    scene = build_scene(cfg)
    result = paint(scene=scene)
    write_run(out, result, scene)
    print(f"mean_variance={result.report.mean_variance:.6g} rerender_l1={result.report.rerender_l1:.6g} -> {out}")
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args, out)
    cfg = replace(cfg, **ABLATIONS[args.variant])
    scene = build_scene(cfg)
    result = run_ablation(cfg, args.variant, scene)
    write_run(out, result, scene)
    print(f"{args.variant}: mean_variance={result.report.mean_variance:.6g} "
          f"rerender_l1={result.report.rerender_l1:.6g} -> {out}")
    return 0


def cmd_oracle_test(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args, out, extra=["preset=oracle"])
    scene = build_scene(cfg)
    result = paint(scene=scene)
    write_run(out, result, scene)
    target = procedural_texture(scene.table, prompt_seed(cfg.prompt))
    seen = scene.field.covered
    l1 = float(np.abs(result.texture.data - target.data)[seen].mean()) if seen.any() else 0.0
    checks = [("texture_l1", l1, args.l1_tol), ("mean_variance", result.report.mean_variance, args.var_tol)]
    ok = True
    for name, value, tol in checks:
        passed = value <= tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}={value:.6g} (<= {tol:g})")
    return 0 if ok else 1


def cmd_gen_assets(args) -> int:
    out = Path(args.directory)
    for name, path in assets.write_assets(out).items():
        print(f"{name}: {path}")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    cfg_path = run / "config.ini"
    if not cfg_path.exists():
        raise FileNotFoundError(f"no config.ini in {run}")
    cfg = config_from_items(_read_items(cfg_path.read_text()))
    scene = build_scene(cfg, predictors=[None] * cfg.cameras)
    npz = run / "artifacts.npz"
    if npz.exists():
        data = np.load(npz)
        texture = Texture(data["texture"], np.array(scene.table.valid))
        views = list(data["views"])
    else:
        texture = Texture(load_png(run / "texture.png"), np.array(scene.table.valid))
        views = [load_png(run / "views" / f"view_{k}.png") for k in range(cfg.cameras)]
    report = consistency_report(texture, views, scene.views, scene.field, scene.prompts)
    text = report.to_text()
    if args.write:
        (run / "report.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./mvtex_out)")
    common.add_argument("--threads", type=int, help="cap on the per-view worker pool")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="mvtex", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("paint", parents=[common], help="paint a texture")
    sp.set_defaults(fn=cmd_paint)
    sp = sub.add_parser("ablate", parents=[common], help="run an ablation variant")
    sp.add_argument("variant", choices=sorted(ABLATIONS))
    sp.set_defaults(fn=cmd_ablate)
    sp = sub.add_parser("oracle-test", parents=[common], help="end-to-end run against a known texture")
    sp.add_argument("--l1-tol", type=float, default=0.02)
    sp.add_argument("--var-tol", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_oracle_test)
    sp = sub.add_parser("gen-assets", help="write the built-in test meshes as OBJ files")
    sp.add_argument("directory")
    sp.add_argument("-v", "--verbose", action="count", default=0)
    sp.set_defaults(fn=cmd_gen_assets)
    sp = sub.add_parser("report", help="recompute the consistency report of a saved run")
    sp.add_argument("run_dir")
    sp.add_argument("--write", action="store_true", help="overwrite report.txt in the run directory")
    sp.add_argument("-v", "--verbose", action="count", default=0)
    sp.set_defaults(fn=cmd_report)
    return p


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module the exception passed through."""
    name = "mvtex"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("mvtex.") and mod != __name__:
            name = mod
    return name


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"mvtex: config: {e}", file=sys.stderr)
    except (ValueError, OSError, FloatingPointError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"mvtex: {_origin(e)}: {msg}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
