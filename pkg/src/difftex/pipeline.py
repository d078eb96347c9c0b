"""End-to-end texturing run: load, filter, match brightness, optimize polygons, export."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import SceneError
from .metrics import perspective_quality
from .optimizer import OptimizerSettings, PolygonInput, PolygonResult, optimize_polygon
from .preprocess import filter_photos, histogram_match
from .scene_io import SceneConfig, load_scene, source_map_name, write_outputs
from .texture_field import fill_holes
from .visibility import render_depth, visible_polygons

logger = logging.getLogger(__name__)

THREADS_ENV = "DIFFTEX_THREADS"


def resolve_threads(threads: int | None) -> int:
    """``threads`` if given, else ``$DIFFTEX_THREADS``, else 1."""
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError as exc:
                raise SceneError(f"{THREADS_ENV} must be an integer, got '{env}'") from exc
        else:
            threads = 1
    if threads < 1:
        raise SceneError(f"thread count must be at least 1, got {threads}")
    return threads


@dataclass
class RunResult:
    model: object
    results: list[PolygonResult]
    textures: list[np.ndarray]          # hole-filled, one per polygon
    report: dict
    manifest: dict
    out_dir: Path | None = None
    timings: dict = field(default_factory=dict)


def _polygon_inputs(model, photos, depths) -> list[PolygonInput]:
    eps = 1e-4 * model.diameter
    seen = [visible_polygons(d) for d in depths]
    inputs = []
    for poly in model.polygons:
        idx = [k for k, s in enumerate(seen) if poly.index in s]
        inputs.append(PolygonInput(poly, [photos[k] for k in idx], [depths[k] for k in idx], eps))
    return inputs


def run_texture(config: SceneConfig, *, threads: int | None = None, out_dir=None,
                write: bool = True, **overrides) -> RunResult:
    """Texture every polygon of the scene described by ``config``.

    Args:
        config: Scene paths and tunables.
        threads: Worker count for the polygon pool (falls back to ``$DIFFTEX_THREADS``).
        out_dir: Output directory; defaults to ``config.out_dir``.
        write: Write textures, OBJ/MTL, ``report.json`` and ``manifest.json``.
        **overrides: ``OptimizerSettings`` fields to override (e.g. ``max_iterations``).
    """
    config.validate()
    n_threads = resolve_threads(threads)
    settings = OptimizerSettings.from_config(config, **overrides)
    timings: dict = {}

    t = time.perf_counter()
    model, photos = load_scene(config)
    timings["load"] = time.perf_counter() - t

    t = time.perf_counter()
    depths = [render_depth(model, p.camera) for p in photos]
    timings["visibility"] = time.perf_counter() - t

    t = time.perf_counter()
    kept, filt = filter_photos(model, photos, depths, config.blur_threshold, config.incline_limit_deg)
    kept_ids = {p.id for p in kept}
    kept_depths = [d for p, d in zip(photos, depths) if p.id in kept_ids]
    matched = histogram_match(kept, [d.poly_id >= 0 for d in kept_depths])
    timings["preprocess"] = time.perf_counter() - t
    logger.info("kept %d of %d photos", len(kept), len(photos))

    inputs = _polygon_inputs(model, matched, kept_depths)
    t = time.perf_counter()
    # results come back in polygon order whatever the pool size
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        results = list(pool.map(lambda inp: optimize_polygon(inp, settings), inputs))
    timings["optimize"] = time.perf_counter() - t

    textures, sources, poly_reports = [], [], []
    for res in results:
        textures.append(fill_holes(res.texture.rgb, res.texture.hole))
        sources.append(res.source)
        rep = dict(res.report)
        q_front, q_vc = perspective_quality(res.source, res.directions, res.chart.polygon.normal)
        rep.update(q_front=q_front, q_vc=q_vc, resolution=list(res.chart.shape),
                   source_map=f"textures/{source_map_name(res.polygon_index)}")
        poly_reports.append(rep)

    report = {
        "version": __version__,
        "photo_filter": filt.to_json(),
        "polygons": poly_reports,
        "approximate": "q_front/q_vc are computed from the dominant-source texel map",
    }
    manifest = {
        "version": __version__,
        "seed": config.seed,
        "threads": n_threads,
        "config": config.to_json(),
        "settings": settings.__dict__.copy(),
        "polygons": poly_reports,
        "timings": timings,
    }
    out = None
    if write:
        t = time.perf_counter()
        out = Path(out_dir) if out_dir is not None else config.resolve(config.out_dir)
        write_outputs(out, model, [r.chart for r in results], textures, report, sources)
        timings["export"] = time.perf_counter() - t
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return RunResult(model, results, textures, report, manifest, out, timings)
