"""Synthetic scenes with ground-truth textures and exact cameras.

Photos are rendered with the same chart homographies and bilinear texture
fetch the optimizer uses, so reconstruction errors come from the method and
not from renderer mismatch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import SceneError
from .geometry import build_chart, guidance_direction
from .losses import build_render_map, render_polygon_view
from .metrics import MetricsReport, evaluate_textures
from .scene_io import (
    Camera,
    Photo,
    ProxyModel,
    SceneConfig,
    quantize,
    read_image,
    texture_name,
    write_image,
    write_scene,
)
from .texture_field import TextureMap
from .visibility import render_depth

STANDARD_SPECS = ("quad12", "box24", "corner-biased")
BACKGROUND = (0.55, 0.62, 0.7)


@dataclass
class SynthSpec:
    geometry: str = "quad"                 # quad | box | corner
    size: tuple[float, float] = (4.0, 3.0)  # width, height of a facade (box: edge, edge)
    gt_resolution: int = 256
    target_resolution: int | None = None
    rig: str = "hemisphere"                # ring | hemisphere | biased-topdown
    count: int = 12
    radius: float = 7.0
    incline_deg: float = 30.0              # ring incline, hemisphere/top-down spread
    azimuth_spread_deg: float = 55.0
    fronto: bool = False                   # add an identity fronto-parallel view per polygon
    aligned: bool = False                  # add a guidance-aligned view per polygon
    image_size: tuple[int, int] = (320, 240)
    hfov_deg: float = 50.0
    brightness_offsets: list[float] = field(default_factory=list)
    corrupted: list[int] = field(default_factory=list)
    dropped_sector_deg: float = 0.0
    texture_blur: float = 0.6
    seed: int = 0
    name: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthSpec":
        kw = dict(d)
        for k in ("size", "image_size"):
            if k in kw:
                kw[k] = tuple(kw[k])
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def standard(cls, name: str) -> "SynthSpec":
        if name not in STANDARD_SPECS:
            raise SceneError(f"unknown standard spec '{name}'", hint=f"choose one of {STANDARD_SPECS}")
        text = resources.files("difftex").joinpath("specs").joinpath(f"{name}.json").read_text()
        return cls.from_json(json.loads(text))

    @classmethod
    def load(cls, ref: str) -> "SynthSpec":
        """A standard spec name or a path to a JSON file."""
        if ref in STANDARD_SPECS:
            return cls.standard(ref)
        p = Path(ref)
        if not p.is_file():
            raise SceneError(f"synth spec not found: {ref}", hint=f"pass a JSON file or one of {STANDARD_SPECS}")
        return cls.from_json(json.loads(p.read_text()))


@dataclass
class SynthScene:
    spec: SynthSpec
    model: ProxyModel
    photos: list[Photo]
    gt_textures: list[np.ndarray]
    charts: list


# --- geometry ----------------------------------------------------------------

def _quad(center, right, up, w, h):
    c = np.asarray(center, float)
    r = np.asarray(right, float) * w / 2
    u = np.asarray(up, float) * h / 2
    return [c - r - u, c + r - u, c + r + u, c - r + u]


def make_geometry(spec: SynthSpec) -> ProxyModel:
    w, h = spec.size
    x, y, z = np.eye(3)
    if spec.geometry == "quad":
        quads = [_quad([0, 0, h / 2], -x, z, w, h)]             # faces +y
    elif spec.geometry == "box":
        a = w / 2
        quads = [
            _quad([0, -a, 0], x, z, w, w),      # -y
            _quad([a, 0, 0], y, z, w, w),       # +x
            _quad([0, a, 0], -x, z, w, w),      # +y
            _quad([-a, 0, 0], -y, z, w, w),     # -x
            _quad([0, 0, a], x, y, w, w),       # +z
            _quad([0, 0, -a], -x, y, w, w),     # -z
        ]
    elif spec.geometry == "corner":
        # convex corner along the vertical edge through the origin
        quads = [
            _quad([-w / 2, 0, h / 2], -x, z, w, h),   # faces +y
            _quad([0, -w / 2, h / 2], y, z, w, h),    # faces +x
        ]
    else:
        raise SceneError(f"unknown synthetic geometry '{spec.geometry}'")
    verts, faces = [], []
    for q in quads:
        face = []
        for v in q:
            verts.append(v)
            face.append(len(verts) - 1)
        faces.append(face)
    return ProxyModel(np.array(verts), faces)


# --- ground-truth textures ---------------------------------------------------

def facade_texture(shape: tuple[int, int], rng: np.random.Generator, blur: float = 0.6) -> np.ndarray:
    """Procedural facade: wall color, window grid with frames, ledges and a plain band at the bottom."""
    h, w = shape
    wall = rng.uniform(0.4, 0.62, size=3)
    img = np.broadcast_to(wall, (h, w, 3)).copy()
    plain = int(round(0.25 * h))                      # flat band kept free of detail
    top = h - plain
    floors = int(rng.integers(3, 5))
    cols = int(rng.integers(4, 7))
    fh = top / floors
    cw = w / cols
    ledge = wall * 0.82
    glass = rng.uniform(0.22, 0.34, size=3) + np.array([0.0, 0.02, 0.08])
    frame = np.clip(wall * 1.25, 0.2, 0.8)
    for f in range(floors):
        y0 = int(round(f * fh))
        img[y0:y0 + max(1, int(0.04 * fh))] = ledge
        for c in range(cols):
            x0 = int(round(c * cw + 0.22 * cw))
            x1 = int(round((c + 1) * cw - 0.22 * cw))
            wy0 = int(round(y0 + 0.25 * fh))
            wy1 = int(round(y0 + 0.8 * fh))
            t = max(1, int(round(0.06 * cw)))
            img[wy0 - t:wy1 + t, x0 - t:x1 + t] = frame
            img[wy0:wy1, x0:x1] = glass + rng.uniform(-0.03, 0.03, size=3)
            img[(wy0 + wy1) // 2:(wy0 + wy1) // 2 + t, x0:x1] = frame
    img[top:top + max(1, int(0.03 * h))] = ledge
    if blur > 0:
        img = gaussian_filter(img, sigma=(blur, blur, 0))
    return quantize(np.clip(img, 0.2, 0.8))


# --- camera rigs -------------------------------------------------------------

def _focal(width: int, hfov_deg: float) -> float:
    return 0.5 * width / math.tan(math.radians(hfov_deg) / 2)


def _fronto_camera(chart) -> Camera:
    poly = chart.polygon
    su, sv = chart.extent
    center_xy = np.array([chart.u_min + su / 2, chart.v_max - sv / 2])
    target = poly.to_world(center_xy)
    f = 1.0 / chart.texel_size * 1.0
    dist = 1.5 * max(su, sv)
    cam = Camera.look_at(target + dist * poly.normal, target, poly.e2, chart.width, chart.height,
                         fx=f * dist)
    return cam


def _direction(az_deg, el_deg, frame):
    """Unit vector at azimuth/elevation in a frame (forward, right, up)."""
    fwd, right, up = frame
    a, e = math.radians(az_deg), math.radians(el_deg)
    return math.cos(e) * (math.cos(a) * fwd + math.sin(a) * right) + math.sin(e) * up


def _rig_cameras(spec: SynthSpec, model: ProxyModel, rng: np.random.Generator) -> list[Camera]:
    width, height = spec.image_size
    f = _focal(width, spec.hfov_deg)
    zaxis = np.array([0.0, 0.0, 1.0])
    center = 0.5 * (model.vertices.min(0) + model.vertices.max(0))
    cams = []
    if spec.rig == "ring":
        inc = [spec.incline_deg, -spec.incline_deg] if spec.geometry == "box" else [spec.incline_deg]
        per = spec.count // len(inc)
        for ri, e in enumerate(inc):
            for i in range(per):
                az = 360.0 * i / per + (180.0 / per) * ri + 7.0
                if spec.dropped_sector_deg and (az % 360.0) < spec.dropped_sector_deg:
                    continue
                d = _direction(az, e, (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), zaxis))
                cams.append(Camera.look_at(center + spec.radius * d, center, zaxis, width, height, f))
    elif spec.rig == "hemisphere":
        poly = model.polygons[0]
        n = poly.normal
        right = np.cross(zaxis, n) if abs(n[2]) < 0.9 else np.array([1.0, 0, 0])
        right /= np.linalg.norm(right)
        up = np.cross(n, right)
        target = poly.centroid()
        for i in range(spec.count):
            az = rng.uniform(-spec.azimuth_spread_deg, spec.azimuth_spread_deg)
            el = rng.uniform(-spec.incline_deg, spec.incline_deg)
            if spec.dropped_sector_deg and 0 <= az < spec.dropped_sector_deg:
                continue
            d = _direction(az, el, (n, right, up))
            jitter = rng.uniform(-0.15, 0.15, size=2) * np.array(spec.size)
            aim = target + jitter[0] * right + jitter[1] * up
            cams.append(Camera.look_at(target + spec.radius * d, aim, zaxis, width, height, f))
    elif spec.rig == "biased-topdown":
        # oblique views from above, spread around the outside of the facades
        normals = [p.normal for p in model.polygons]
        mean_n = np.sum(normals, axis=0)
        mean_n[2] = 0.0
        mean_n /= np.linalg.norm(mean_n)
        right = np.cross(zaxis, mean_n)
        for i in range(spec.count):
            az = -spec.azimuth_spread_deg + 2 * spec.azimuth_spread_deg * (i + 0.5) / spec.count
            el = spec.incline_deg + rng.uniform(0.0, 15.0)
            d = _direction(az, el, (mean_n, right, zaxis))
            cams.append(Camera.look_at(center + spec.radius * d, center, zaxis, width, height, f))
    else:
        raise SceneError(f"unknown camera rig '{spec.rig}'")
    return cams


def _aligned_camera(poly, others: list[Camera], spec: SynthSpec) -> Camera:
    """A view along the polygon's guidance direction (fixed point including itself)."""
    width, height = spec.image_size
    f = _focal(width, spec.hfov_deg)
    target = poly.centroid()
    zaxis = np.array([0.0, 0.0, 1.0])
    dist = spec.radius * 0.8
    d = poly.normal.copy()
    cam = None
    for _ in range(20):
        cam = Camera.look_at(target + dist * d, target, zaxis, width, height, f)
        seeing = [c for c in others if np.dot(c.center - target, poly.normal) > 0] + [cam]
        d = guidance_direction(poly, seeing)
    return Camera.look_at(target + dist * d, target, zaxis, width, height, f)


# --- rendering ----------------------------------------------------------------

def render_photo(model: ProxyModel, camera: Camera, charts, textures) -> np.ndarray:
    depth = render_depth(model, camera)
    img = np.broadcast_to(np.array(BACKGROUND), (camera.height, camera.width, 3)).copy().reshape(-1, 3)
    ids = depth.poly_id.ravel()
    dummy = Photo(camera, np.zeros((camera.height, camera.width, 3)), -1)
    for chart, tex in zip(charts, textures):
        pix = np.flatnonzero(ids == chart.polygon.index)
        if pix.size == 0:
            continue
        rmap = build_render_map(chart, dummy, pix)
        vals, ok = render_polygon_view(TextureMap(tex, np.zeros(tex.shape[:2], bool)), rmap)
        img[pix[ok]] = vals[ok]
    return img.reshape(camera.height, camera.width, 3)


def generate_synthetic_scene(spec: SynthSpec, *, quantize_photos: bool = True) -> SynthScene:
    """Build geometry, ground-truth textures and rendered photos for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    model = make_geometry(spec)
    charts = [build_chart(p, spec.gt_resolution) for p in model.polygons]
    gts = [facade_texture(c.shape, rng, spec.texture_blur) for c in charts]
    cams = []
    if spec.fronto:
        cams += [_fronto_camera(c) for c in charts]
    rig = _rig_cameras(spec, model, rng)
    cams += rig
    if spec.aligned:
        cams += [_aligned_camera(p, rig, spec) for p in model.polygons]
    lo, hi = model.vertices.min(0), model.vertices.max(0)
    for cam in cams:
        if np.all((cam.center > lo) & (cam.center < hi)):
            raise SceneError("a camera lies inside the geometry")
    photos = []
    for k, cam in enumerate(cams):
        rgb = render_photo(model, cam, charts, gts)
        if k < len(spec.brightness_offsets):
            rgb = rgb + spec.brightness_offsets[k]
        if k in spec.corrupted:
            rgb = 1.0 - rgb
        rgb = np.clip(rgb, 0.0, 1.0)
        if quantize_photos:
            rgb = quantize(rgb)
        photos.append(Photo(cam, rgb, k, f"{k:04d}.png"))
    return SynthScene(spec, model, photos, gts, charts)


def write_synthetic_scene(scene: SynthScene, out_dir, config: SceneConfig | None = None) -> SceneConfig:
    """Write the scene in ``scene_io`` formats plus ``gt/`` textures and ``synth_spec.json``."""
    out = Path(out_dir)
    target = scene.spec.target_resolution or scene.spec.gt_resolution
    cfg = config or SceneConfig("proxy.obj", "cameras.json", "photos", out_dir="out",
                                target_resolution=max(256, target), seed=scene.spec.seed)
    cfg = write_scene(out, scene.model, scene.photos, cfg)
    (out / "gt").mkdir(exist_ok=True)
    for i, tex in enumerate(scene.gt_textures):
        write_image(out / "gt" / texture_name(i), tex)
    (out / "synth_spec.json").write_text(json.dumps(scene.spec.to_json(), indent=2))
    return cfg


def read_gt_textures(gt_dir) -> list[np.ndarray]:
    gt_dir = Path(gt_dir)
    sub = gt_dir / "gt" if (gt_dir / "gt").is_dir() else gt_dir
    files = sorted(sub.glob("polygon_*.png"))
    files = [f for f in files if not f.stem.endswith("_source")]
    if not files:
        raise SceneError(f"no ground-truth textures in {sub}")
    return [read_image(f) for f in files]


def evaluate_against_gt(recon: list[np.ndarray], gt: list[np.ndarray], holes=None, charts=None,
                        extra=None) -> MetricsReport:
    """Metrics of reconstructed textures against ground truth on the same chart layout.

    Hole texels and texels outside the polygon are excluded from the error
    percentiles.
    """
    masks = []
    for i in range(len(recon)):
        m = None
        if holes is not None and holes[i] is not None:
            m = ~holes[i]
        if charts is not None:
            inside = charts[i].inside_mask
            m = inside if m is None else (m & inside)
        masks.append(m)
    return evaluate_textures(recon, gt, masks, extra)
