"""Command line entry point: ``texture``, ``synth`` and ``eval`` subcommands.

Exit codes: 0 success, 1 internal error, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import DifftexError, GeometryError, OptimizationError
from .geometry import build_chart
from .scene_io import (
    ProxyModel,
    SceneConfig,
    read_image,
    read_obj,
    read_source_map,
    source_map_name,
    texture_name,
)

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2

log = logging.getLogger("difftex")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="difftex", description="Multi-view texture optimization for planar proxies.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("texture", help="texture a proxy model from photos")
    t.add_argument("--scene", required=True, help="scene JSON (proxy, cameras, photo directory)")
    t.add_argument("--out", help="output directory (default: the scene's out_dir)")
    t.add_argument("--max-res", type=int, help="target texture resolution (256, 512, 1024 or 2048)")
    t.add_argument("--alpha", type=float, help="render loss weight (default 1)")
    t.add_argument("--beta", type=float, help="perspective loss weight (default 2)")
    t.add_argument("--omega", type=float, help="parameter loss weight (default 10)")
    t.add_argument("--lr", type=float, help="Adam learning rate (default 0.005)")
    t.add_argument("--tau-w", type=float, help="photo elimination threshold (default 0.95)")
    t.add_argument("--lambda-s", type=float, help="parameter loss smoothing constant (default 0.5)")
    t.add_argument("--max-iterations", type=int, help="iteration cap per stage (default 500)")
    t.add_argument("--seed", type=int, help="seed recorded in the manifest")
    t.add_argument("--threads", type=int, help="polygon worker count (default $DIFFTEX_THREADS or 1)")

    s = sub.add_parser("synth", help="write a synthetic scene with ground truth")
    s.add_argument("--spec", required=True, help="standard spec name (quad12, box24, corner-biased) or JSON file")
    s.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="compare textures against ground truth")
    e.add_argument("--recon", required=True, help="output directory of a texture run")
    e.add_argument("--gt", required=True, help="synthetic scene directory (or its gt/ folder)")
    return p


def _config_from_args(args) -> SceneConfig:
    cfg = SceneConfig.load(args.scene)
    d = cfg.to_json()
    if args.max_res is not None:
        d["target_resolution"] = args.max_res
    coeffs = list(d["loss_coefficients"])
    for i, name in enumerate(("alpha", "beta", "omega")):
        v = getattr(args, name)
        if v is not None:
            coeffs[i] = v
    d["loss_coefficients"] = coeffs
    if args.lr is not None:
        d["adam"] = [args.lr] + list(d["adam"][1:])
    if args.tau_w is not None:
        d["tau_w"] = args.tau_w
    if args.lambda_s is not None:
        d["lambda_s"] = args.lambda_s
    if args.seed is not None:
        d["seed"] = args.seed
    out = SceneConfig.from_json(d, base_dir=cfg.base_dir)
    out.validate()
    return out


def _cmd_texture(args) -> int:
    from .pipeline import run_texture

    cfg = _config_from_args(args)
    overrides = {}
    if args.max_iterations is not None:
        overrides["max_iterations"] = args.max_iterations
    res = run_texture(cfg, threads=args.threads, out_dir=args.out, **overrides)
    holes = [p["hole_fraction"] for p in res.report["polygons"]]
    print(f"textured {len(holes)} polygon(s) into {res.out_dir} "
          f"(max hole fraction {max(holes) if holes else 0:.4f})")
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .synth import SynthSpec, generate_synthetic_scene, write_synthetic_scene

    spec = SynthSpec.load(args.spec)
    scene = generate_synthetic_scene(spec)
    write_synthetic_scene(scene, args.out)
    print(f"wrote {len(scene.photos)} photos and {len(scene.gt_textures)} ground-truth texture(s) to {args.out}")
    return EXIT_OK


def _load_recon(recon: Path):
    tex_dir = recon / "textures"
    if not tex_dir.is_dir():
        raise FileNotFoundError(f"no textures directory in {recon}")
    files = sorted(f for f in tex_dir.glob("polygon_*.png") if not f.stem.endswith("_source"))
    textures, holes = [], []
    for i, f in enumerate(files):
        if f.name != texture_name(i):
            raise FileNotFoundError(f"missing {texture_name(i)} in {tex_dir}")
        textures.append(read_image(f))
        src = tex_dir / source_map_name(i)
        holes.append(read_source_map(src) < 0 if src.is_file() else None)
    return textures, holes


def _cmd_eval(args) -> int:
    from .synth import evaluate_against_gt, read_gt_textures

    recon, gt_dir = Path(args.recon), Path(args.gt)
    for p in (recon, gt_dir):
        if not p.exists():
            raise FileNotFoundError(f"path not found: {p}")
    textures, holes = _load_recon(recon)
    gt = read_gt_textures(gt_dir)
    charts = None
    proxy = gt_dir / "proxy.obj"
    if proxy.is_file() and len(gt) == len(textures):
        obj = read_obj(proxy)
        model = ProxyModel(obj.vertices, obj.faces)
        charts = [build_chart(poly, max(t.shape[:2])) for poly, t in zip(model.polygons, gt)]
    extra = None
    rep_path = recon / "report.json"
    if rep_path.is_file():
        rep = json.loads(rep_path.read_text())
        extra = [{"q_front": p.get("q_front"), "q_vc": p.get("q_vc"), "hole_fraction": p.get("hole_fraction", 0.0)}
                 for p in rep.get("polygons", [])]
    try:
        metrics = evaluate_against_gt(textures, gt, holes, charts, extra)
    except ValueError as exc:
        raise DifftexError(str(exc), module="metrics", hint="evaluate at the ground truth resolution") from exc
    doc = metrics.to_json()
    (recon / "metrics.json").write_text(json.dumps(doc, indent=2))
    (recon / "metrics.csv").write_text(metrics.to_csv())
    print(json.dumps({k: doc[k] for k in ("error_p90", "error_p95", "ssim")}))
    return EXIT_OK


COMMANDS = {"texture": _cmd_texture, "synth": _cmd_synth, "eval": _cmd_eval}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OptimizationError, GeometryError) as exc:
        print(f"error: {exc.diagnostic()}", file=sys.stderr)
        return EXIT_INTERNAL if isinstance(exc, OptimizationError) else EXIT_INPUT
    except DifftexError as exc:
        print(f"error: {exc.diagnostic()}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
