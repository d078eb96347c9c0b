from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from difftex.geometry import ProxyPolygon, build_chart  # noqa: E402
from difftex.optimizer import PolygonInput, prepare_stage  # noqa: E402
from difftex.scene_io import Camera, Photo, ProxyModel  # noqa: E402
from difftex.visibility import render_depth  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def quad_vertices(w=1.0, h=1.0, center=(0.0, 0.0, 0.0)):
    """Axis-aligned quad in the z = center[2] plane facing +z."""
    c = np.asarray(center, float)
    return np.array([[-w / 2, -h / 2, 0], [w / 2, -h / 2, 0], [w / 2, h / 2, 0], [-w / 2, h / 2, 0]]) + c


def quad_model(w=1.0, h=1.0):
    return ProxyModel(quad_vertices(w, h), [[0, 1, 2, 3]])


def fronto_camera(chart, dist=3.0):
    """Camera facing the chart whose pixel (i, j) sits on texel (i, j)."""
    poly = chart.polygon
    su, sv = chart.extent
    center = poly.to_world(np.array([chart.u_min + su / 2, chart.v_max - sv / 2]))
    return Camera.look_at(center + dist * poly.normal, center, poly.e2, chart.width, chart.height,
                          fx=dist / chart.texel_size)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_polygon(rng, n_vertices=None):
    """Random convex planar polygon with arbitrary orientation."""
    n = n_vertices or int(rng.integers(3, 7))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(0.5, 1.5, n)
    pts = np.stack([rad * np.cos(ang), rad * np.sin(ang), np.zeros(n)], axis=1)
    # convex hull order keeps the polygon simple
    from scipy.spatial import ConvexHull
    hull = ConvexHull(pts[:, :2])
    pts = pts[hull.vertices]
    rot = random_rotation(rng)
    return ProxyPolygon.from_vertices(pts @ rot.T + rng.normal(size=3))


def random_camera(rng, poly, width=64, height=48, dist=(2.5, 5.0), max_angle=60.0):
    """Camera on the front side of ``poly`` looking roughly at its centroid."""
    n = poly.normal
    ang = np.radians(rng.uniform(0, max_angle))
    az = rng.uniform(0, 2 * np.pi)
    d = np.cos(ang) * n + np.sin(ang) * (np.cos(az) * poly.e1 + np.sin(az) * poly.e2)
    c = poly.centroid()
    target = c + 0.1 * rng.normal(size=3)
    up = poly.e2 if abs(np.dot(d, poly.e2)) < 0.95 else poly.e1
    return Camera.look_at(c + rng.uniform(*dist) * d, target, up, width, height,
                          fx=rng.uniform(0.6, 1.2) * width)


def small_stage(seed, n_photos=None, resolution=16, image=(64, 48), random_images=True):
    """A tiny one-polygon problem: chart, samples, geometric masks and render maps."""
    rng = np.random.default_rng(seed)
    poly = random_polygon(rng)
    model = ProxyModel(poly.vertices, [list(range(len(poly.vertices)))])
    poly = model.polygons[0]
    k = n_photos or int(rng.integers(2, 5))
    photos = []
    for i in range(k):
        cam = random_camera(rng, poly, *image)
        rgb = rng.uniform(0, 1, size=(image[1], image[0], 3)) if random_images else None
        photos.append(Photo(cam, rgb, i))
    depths = [render_depth(model, p.camera) for p in photos]
    inp = PolygonInput(poly, photos, depths, 1e-4 * model.diameter)
    return rng, inp, prepare_stage(inp, resolution, list(range(k)))


@pytest.fixture
def unit_quad_chart():
    return build_chart(quad_model().polygons[0], 256)


def stage_context(inp, stage, theta, masks=None, lambda_s=0.5, alpha=1.0, beta=2.0, omega=10.0):
    """Loss context for ``theta`` built the way one optimizer iteration builds it."""
    from difftex.geometry import guidance_direction
    from difftex.losses import build_context, quality_matrix
    from difftex.texture_field import TextureMap, compose_raw

    masks = masks or stage.geometric
    poly = inp.polygon
    u, _, _, hole = compose_raw(theta, stage.samples, masks.mapped)
    tex = TextureMap(np.clip(u, 0.0, 1.0), hole)
    q = quality_matrix(stage.samples, masks.mapped, poly.normal).q
    guide = guidance_direction(poly, [p.camera for p in inp.photos])
    return build_context(stage.samples, masks, stage.render_maps, tex, q, guide, stage.grad_mag,
                         lambda_s, alpha, beta, omega)


def kink_free(theta, mapped, gap=1e-3):
    """Entries at least ``gap`` away from every |.| kink of the L1 and pair terms."""
    a = theta * mapped
    ok = np.abs(a) > gap
    for axis in (1, 2):
        d = np.abs(np.diff(a, axis=axis)) > gap
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        ok[tuple(lo)] &= d
        ok[tuple(hi)] &= d
    return ok & mapped


# --- acceptance summary ------------------------------------------------------

_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n = mark.args[0]
    detail = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in item.user_properties)
    prev = _CRITERIA.get(n)
    if prev is None or prev[0] == "PASS":
        _CRITERIA[n] = ("PASS" if rep.passed else "FAIL", item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, name, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {name}" + (f"  [{detail}]" if detail else ""))
