"""Per-polygon optimization loop with data elimination and coarse-to-fine stages."""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizationError
from .geometry import UVChart, build_chart, guidance_direction
from .losses import (
    LossBreakdown,
    build_context,
    build_render_map,
    color_stats,
    gradient_magnitude,
    frontality,
    quality_matrix,
    total_loss_and_grad,
)
from .texture_field import (
    ChartSamples,
    TextureMap,
    WeightField,
    compose_raw,
    compose_texture,
    init_weights,
    sample_photos,
    source_map,
    upscale_field,
)
from .visibility import MaskSet, compute_visibility_masks, update_activation

logger = logging.getLogger(__name__)


@dataclass
class OptimizerSettings:
    target_resolution: int = 2048
    start_resolution: int = 256
    alpha: float = 1.0
    beta: float = 2.0
    omega: float = 10.0
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    tau: float = 1e-3
    tau_w: float = 0.95
    lambda_s: float = 0.5
    max_iterations: int = 500
    window: int = 10
    rel_tol: float = 1e-3
    elimination_every: int = 25
    color_guard: float = 0.05

    @classmethod
    def from_config(cls, config, **overrides) -> "OptimizerSettings":
        a, b, w = config.loss_coefficients
        lr, b1, b2 = config.adam
        kw = dict(target_resolution=config.target_resolution, alpha=a, beta=b, omega=w,
                  lr=lr, beta1=b1, beta2=b2, tau=config.tau, tau_w=config.tau_w,
                  lambda_s=config.lambda_s)
        kw.update(overrides)
        return cls(**kw)

    def stages(self) -> list[int]:
        if self.target_resolution <= self.start_resolution:
            return [self.target_resolution]
        out = [self.start_resolution]
        while out[-1] < self.target_resolution:
            out.append(min(out[-1] * 2, self.target_resolution))
        return out


def adam_step(weights: WeightField, grad: np.ndarray, mapped: np.ndarray, lr: float = 0.005,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> WeightField:
    """One bias-corrected Adam update in place, then clamp to [0, 1] and zero inactive texels."""
    if not np.all(np.isfinite(grad)):
        raise OptimizationError("non-finite gradient", hint="check the input photos for NaN values")
    weights.step += 1
    t = weights.step
    weights.m1 *= beta1
    weights.m1 += (1.0 - beta1) * grad
    weights.m2 *= beta2
    weights.m2 += (1.0 - beta2) * (grad * grad)
    denom = np.sqrt(weights.m2 / (1.0 - beta2 ** t))
    denom += eps
    step = weights.m1 / denom
    step *= lr / (1.0 - beta1 ** t)
    theta = weights.theta - step
    np.clip(theta, 0.0, 1.0, out=theta)
    theta *= mapped
    weights.theta = theta
    return weights


@dataclass
class PolygonInput:
    """Everything one polygon worker needs: its polygon and the photos that see it."""

    polygon: object
    photos: list
    depths: list
    eps_z: float


@dataclass
class StageData:
    chart: UVChart
    samples: ChartSamples
    geometric: MaskSet
    render_maps: list
    grad_mag: np.ndarray


@dataclass
class OptimizationState:
    stage: StageData
    weights: WeightField
    masks: MaskSet
    texture: TextureMap | None = None
    history: deque = field(default_factory=lambda: deque(maxlen=64))
    iteration: int = 0
    eliminated: list = field(default_factory=list)
    dropped: set = field(default_factory=set)
    pixel_eliminations: dict = field(default_factory=dict)


@dataclass
class PolygonResult:
    polygon_index: int
    chart: UVChart
    texture: TextureMap
    source: np.ndarray
    directions: dict           # photo id -> (H, W, 3) direction field at the final chart
    weights: WeightField | None
    masks: MaskSet | None
    report: dict


def prepare_stage(inp: PolygonInput, resolution: int, photo_idx: list[int]) -> StageData:
    chart = build_chart(inp.polygon, resolution)
    photos = [inp.photos[i] for i in photo_idx]
    depths = [inp.depths[i] for i in photo_idx]
    geo = compute_visibility_masks(chart, photos, depths, inp.eps_z)
    samples = sample_photos(chart, photos, geo.mapped)
    rmaps = [build_render_map(chart, p, geo.footprint[k]) for k, p in enumerate(photos)]
    return StageData(chart, samples, geo, rmaps, gradient_magnitude(samples.colors))


def _sole_active(mapped: np.ndarray, k: int) -> bool:
    others = np.delete(mapped, k, axis=0).any(axis=0) if mapped.shape[0] > 1 else np.zeros(mapped.shape[1:], bool)
    return bool(np.any(mapped[k] & ~others))


def eliminate_data(state: OptimizationState, tau_w: float = 0.95, color_guard: float = 0.05,
                   stage_index: int = 0) -> OptimizationState:
    """Drop color-outlier contributions per texel, then whole photos that ended up mostly unused.

    Pixel level: a contribution is deactivated when its color is farther than
    ``max(3 s, color_guard)`` from the per-texel mean, unless that would leave
    the texel without any active photo. Photo level: a photo whose weight is
    zero on more than ``tau_w`` of its visible texels is dropped, unless it is
    the only active photo somewhere.
    """
    samples = state.stage.samples
    mapped = state.masks.mapped.copy()
    theta = state.weights.theta

    mean, std = color_stats(samples.colors, mapped)
    dist = np.linalg.norm(samples.colors - mean[None], axis=-1)
    outlier = mapped & (dist > np.maximum(3.0 * std, color_guard)[None])
    survivors = (mapped & ~outlier).any(axis=0)
    outlier &= survivors[None]
    for k in np.flatnonzero(outlier.reshape(len(mapped), -1).any(axis=1)):
        pid = samples.photo_ids[k]
        state.pixel_eliminations[pid] = state.pixel_eliminations.get(pid, 0) + int(outlier[k].sum())
    mapped &= ~outlier
    theta = np.where(mapped, theta, 0.0)

    base = state.stage.geometric.mapped
    fracs = []
    for k, pid in enumerate(samples.photo_ids):
        if pid in state.dropped:
            continue
        n = int(base[k].sum())
        frac = float(np.sum(base[k] & (theta[k] <= 0.0))) / n if n else 1.0
        fracs.append((-frac, pid, k, frac))
    for _, pid, k, frac in sorted(fracs):
        if frac <= tau_w:
            continue
        if _sole_active(mapped, k):
            continue
        mapped[k] = False
        theta[k] = 0.0
        state.dropped.add(pid)
        state.eliminated.append({
            "photo": int(pid),
            "reason": f"zero-weight fraction {frac:.3f} > tau_w {tau_w}",
            "stage": stage_index,
            "iteration": state.iteration,
        })
    state.weights.theta = theta
    state.masks = state.masks.with_mapped(mapped)
    return state


def _converged(history, window: int, rel_tol: float) -> bool:
    if len(history) <= window:
        return False
    now, before = history[-1], history[-1 - window]
    return abs(now - before) <= rel_tol * max(abs(before), 1e-300)


def optimize_polygon(inp: PolygonInput, settings: OptimizerSettings, *, log_every: int = 0) -> PolygonResult:
    """Optimize one polygon's texture over the coarse-to-fine resolution chain."""
    poly = inp.polygon
    stages = settings.stages()
    report: dict = {"polygon": poly.index, "stages": [], "eliminated": [],
                    "order": "update_activation then eliminate_data (pixel level, then photo level)"}
    if not inp.photos:
        logger.warning("polygon %d: no photo sees it; writing a hole-only texture", poly.index)
        chart = build_chart(poly, stages[-1])
        tex = TextureMap(np.zeros(chart.shape + (3,)), np.ones(chart.shape, bool))
        report.update(hole_fraction=1.0, photos=[], pixel_eliminations={})
        return PolygonResult(poly.index, chart, tex, np.full(chart.shape, -1), {}, None, None, report)

    photo_idx = list(range(len(inp.photos)))
    stage = prepare_stage(inp, stages[0], photo_idx)
    visible = [inp.photos[i] for i in photo_idx if stage.geometric.mapped[i].any()]
    guidance = guidance_direction(poly, [p.camera for p in visible] or [p.camera for p in inp.photos])
    report["guidance"] = guidance.tolist()
    report["photos"] = [int(p.id) for p in inp.photos]

    masks = stage.geometric
    q0 = quality_matrix(stage.samples, masks.mapped, poly.normal)
    state = OptimizationState(stage, init_weights(q0.q, masks.mapped, stage.samples.photo_ids), masks)

    for si, res in enumerate(stages):
        if si > 0:
            keep = [i for i, p in enumerate(inp.photos) if p.id not in state.dropped]
            old_ids = state.stage.samples.photo_ids
            rows = [old_ids.index(inp.photos[i].id) for i in keep]
            old_w = WeightField(state.weights.theta[rows], [old_ids[r] for r in rows])
            old_mapped = state.masks.mapped[rows]
            stage = prepare_stage(inp, res, keep)
            weights, mapped = upscale_field(old_w, old_mapped, stage.geometric.mapped, stage.chart.shape)
            state.stage = stage
            state.weights = weights
            state.masks = stage.geometric.with_mapped(mapped)
            state.history.clear()
        t0 = time.perf_counter()
        stage_rep = _run_stage(state, settings, poly, guidance, si, log_every)
        stage_rep.update(resolution=res, seconds=time.perf_counter() - t0)
        report["stages"].append(stage_rep)

    state.texture = compose_texture(state.weights, state.stage.samples, state.masks.mapped)
    q_a = np.maximum(0.0, state.stage.samples.directions @ poly.normal)
    src = source_map(state.weights, state.masks.mapped, tiebreak=q_a)
    inside = state.stage.chart.inside_mask
    hole = state.texture.hole & inside
    report["hole_fraction"] = float(hole.sum() / max(inside.sum(), 1))
    report["eliminated"] = state.eliminated
    report["pixel_eliminations"] = {str(k): v for k, v in sorted(state.pixel_eliminations.items())}
    dirs = {pid: state.stage.samples.directions[k] for k, pid in enumerate(state.stage.samples.photo_ids)}
    return PolygonResult(poly.index, state.stage.chart, state.texture, src, dirs,
                         state.weights, state.masks, report)


def _run_stage(state: OptimizationState, s: OptimizerSettings, poly, guidance, stage_index: int,
               log_every: int) -> dict:
    stage = state.stage
    first: LossBreakdown | None = None
    last: LossBreakdown | None = None
    min_total = np.inf
    converged = False
    it = 0
    persp_base = ((stage.samples.directions - guidance) ** 2).sum(axis=-1)
    q_a = frontality(stage.samples, poly.normal)
    for it in range(1, s.max_iterations + 1):
        state.iteration = it
        mapped = state.masks.mapped
        comp = compose_raw(state.weights.theta, stage.samples, mapped)
        state.texture = TextureMap(np.clip(comp[0], 0.0, 1.0), comp[3])
        q = quality_matrix(stage.samples, mapped, poly.normal, q_a).q
        ctx = build_context(stage.samples, state.masks, stage.render_maps, state.texture, q, guidance,
                            stage.grad_mag, s.lambda_s, s.alpha, s.beta, s.omega, persp_base,
                            (state.weights.theta, comp))
        lb = total_loss_and_grad(state.weights.theta, ctx)
        if not np.isfinite(lb.total):
            raise OptimizationError("non-finite loss", polygon=poly.index)
        if first is None:
            first = lb
        last = lb
        min_total = min(min_total, lb.total)
        state.history.append(lb.total)
        if log_every and it % log_every == 0:
            logger.info("polygon %d stage %d it %d: total %.6g (render %.6g persp %.6g para %.6g)",
                        poly.index, stage_index, it, lb.total, lb.render, lb.persp, lb.para)
        if _converged(state.history, s.window, s.rel_tol):
            converged = True
            break
        adam_step(state.weights, lb.grad, mapped, s.lr, s.beta1, s.beta2, s.adam_eps)
        state.masks = update_activation(state.masks, state.weights.theta, s.tau)
        state.weights.theta = np.where(state.masks.mapped, state.weights.theta, 0.0)
        if it % s.elimination_every == 0:
            eliminate_data(state, s.tau_w, s.color_guard, stage_index)
    return {
        "iterations": it,
        "converged": converged,
        "initial_loss": first.as_dict() if first else None,
        "final_loss": last.as_dict() if last else None,
        "min_total": float(min_total),
    }
