"""Depth buffers, activation masks and their per-iteration updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import UVChart, points_in_polygon, texel_to_pixel


@dataclass
class DepthBuffer:
    """Nearest proxy surface per pixel: camera depth (inf for background) and polygon id (-1)."""

    depth: np.ndarray
    poly_id: np.ndarray


def _plane_depth(polygon, camera, rays: np.ndarray) -> np.ndarray:
    # rays have unit camera-frame depth, so the ray parameter is the depth itself
    c = camera.center
    denom = rays @ polygon.normal
    num = np.dot(polygon.origin - c, polygon.normal)
    with np.errstate(divide="ignore", invalid="ignore"):
        return num / denom


def render_depth(model, camera) -> DepthBuffer:
    """Rasterize every polygon by exact ray-plane intersection at pixel centers.

    Polygons facing away from the camera are culled.
    """
    h, w = camera.height, camera.width
    rays = camera.pixel_rays().reshape(-1, 3)
    depth = np.full(h * w, np.inf)
    ids = np.full(h * w, -1, dtype=np.int64)
    c = camera.center
    for poly in model.polygons:
        if np.dot(c - poly.origin, poly.normal) <= 0:
            continue
        cand = _footprint_candidates(poly, camera)
        r = rays if cand is None else rays[cand]
        s = _plane_depth(poly, camera, r)
        ok = np.isfinite(s) & (s > 0)
        pts = c + s[:, None] * r
        ok &= points_in_polygon(poly.to_plane(pts), poly.plane_vertices)
        idx = np.arange(h * w) if cand is None else cand
        idx = idx[ok]
        closer = s[ok] < depth[idx]
        depth[idx[closer]] = s[ok][closer]
        ids[idx[closer]] = poly.index
    return DepthBuffer(depth.reshape(h, w), ids.reshape(h, w))


def _footprint_candidates(poly, camera):
    """Flat pixel indices inside the projected bounding box, or None when it cannot be bounded."""
    pc = poly.vertices @ camera.rotation.T + camera.translation
    if np.any(pc[:, 2] <= 1e-9):
        return None
    u = camera.fx * pc[:, 0] / pc[:, 2] + camera.cx
    v = camera.fy * pc[:, 1] / pc[:, 2] + camera.cy
    x0 = max(int(np.floor(u.min())), 0)
    x1 = min(int(np.ceil(u.max())), camera.width - 1)
    y0 = max(int(np.floor(v.min())), 0)
    y1 = min(int(np.ceil(v.max())), camera.height - 1)
    if x0 > x1 or y0 > y1:
        return np.zeros(0, dtype=np.int64)
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    return (yy * camera.width + xx).ravel()


def texel_visibility(chart: UVChart, camera, depth: DepthBuffer, eps: float):
    """Which texel centers of ``chart`` the camera sees, with their pixel positions.

    A texel is visible when it lies inside the polygon, projects in front of
    the camera and inside the image, the polygon faces the camera, and no
    other surface at the nearest pixel is closer than this polygon's plane by
    more than ``eps``.
    """
    poly = chart.polygon
    pix, ok = texel_to_pixel(chart, camera)
    ok &= chart.inside_mask
    if np.dot(camera.center - poly.origin, poly.normal) <= 0:
        return np.zeros_like(ok), pix
    jj, ii = np.nonzero(ok)
    p = pix[jj, ii]
    px = np.rint(p[:, 0]).astype(np.int64)
    py = np.rint(p[:, 1]).astype(np.int64)
    rays = camera.pixel_rays()[py, px]
    own = _plane_depth(poly, camera, rays)
    seen = depth.depth[py, px] >= own - eps
    vis = np.zeros_like(ok)
    vis[jj[seen], ii[seen]] = True
    return vis, pix


def overlap_mask(mapped: np.ndarray) -> np.ndarray:
    """``m_k(t) = 1`` iff photo k is active at t and at least one other photo is too."""
    count = mapped.sum(axis=0)
    return mapped & (count >= 2)[None]


@dataclass
class MaskSet:
    """Activation masks of the photos contributing to one polygon.

    ``mapped`` (the chart-space masks) is the source of truth. Image-space
    masks are derived: a footprint pixel stays active while the texel nearest
    to its chart position is active.
    """

    mapped: np.ndarray                      # (K, H, W) bool, chart space
    footprint: list[np.ndarray]             # flat pixel indices of the initial a_k
    footprint_texel: list[np.ndarray]       # flat nearest-texel index per footprint pixel
    image_shapes: list[tuple[int, int]]
    overlap: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mapped = np.asarray(self.mapped, dtype=bool)
        self.overlap = overlap_mask(self.mapped)

    @property
    def n_photos(self) -> int:
        return self.mapped.shape[0]

    def active_footprint(self, k: int) -> np.ndarray:
        """Boolean over ``footprint[k]``: pixels of a_k that are currently active."""
        ft = self.footprint_texel[k]
        flat = self.mapped[k].ravel()
        return (ft >= 0) & flat[np.maximum(ft, 0)]

    def image_mask(self, k: int) -> np.ndarray:
        h, w = self.image_shapes[k]
        a = np.zeros(h * w, dtype=bool)
        a[self.footprint[k][self.active_footprint(k)]] = True
        return a.reshape(h, w)

    @property
    def a(self) -> list[np.ndarray]:
        return [self.image_mask(k) for k in range(self.n_photos)]

    def with_mapped(self, mapped: np.ndarray) -> "MaskSet":
        return MaskSet(mapped, self.footprint, self.footprint_texel, self.image_shapes)


def footprint_for(chart: UVChart, camera, depth: DepthBuffer):
    """Pixels whose nearest surface is the chart's polygon, and their nearest texels.

    Returns:
        pix: flat pixel indices of a_k.
        coords: real-valued texel coordinates (N, 2) of those pixel centers.
        nearest: flat index of the nearest texel, -1 when outside the chart.
    """
    poly = chart.polygon
    pix = np.flatnonzero(depth.poly_id.ravel() == poly.index)
    rays = camera.pixel_rays().reshape(-1, 3)[pix]
    s = _plane_depth(poly, camera, rays)
    pts = camera.center + s[:, None] * rays
    coords = chart.plane_to_texel(poly.to_plane(pts))
    ni = np.rint(coords[:, 0]).astype(np.int64)
    nj = np.rint(coords[:, 1]).astype(np.int64)
    inside = (ni >= 0) & (ni < chart.width) & (nj >= 0) & (nj < chart.height)
    nearest = np.where(inside, nj * chart.width + ni, -1)
    return pix, coords, nearest


def compute_visibility_masks(chart: UVChart, photos, depths, eps: float) -> MaskSet:
    """Initial masks of ``photos`` for the chart's polygon (one entry per photo, in order)."""
    mapped, foot, foot_t, shapes = [], [], [], []
    for photo, depth in zip(photos, depths):
        vis, _ = texel_visibility(chart, photo.camera, depth, eps)
        pix, _, nearest = footprint_for(chart, photo.camera, depth)
        mapped.append(vis)
        foot.append(pix)
        foot_t.append(nearest)
        shapes.append((photo.camera.height, photo.camera.width))
    if mapped:
        arr = np.stack(mapped)
    else:
        arr = np.zeros((0,) + chart.shape, dtype=bool)
    return MaskSet(arr, foot, foot_t, shapes)


def visible_polygons(depth: DepthBuffer) -> set[int]:
    ids = np.unique(depth.poly_id)
    return {int(i) for i in ids if i >= 0}


def update_activation(masks: MaskSet, theta: np.ndarray, tau: float) -> MaskSet:
    """Deactivate texels whose raw weight fell to ``tau`` or below.

    Masks only shrink. A texel never loses its last active photo: if every
    active photo would drop out at once, the ones holding the largest weight
    stay active.
    """
    prev = masks.mapped
    new = prev & (theta > tau)
    dead = prev.any(axis=0) & ~new.any(axis=0)
    if np.any(dead):
        th = np.where(prev, theta, -np.inf)
        best = th.max(axis=0)
        keep = prev & (th == best[None]) & dead[None]
        new |= keep
    return masks.with_mapped(new)
