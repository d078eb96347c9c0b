"""Scene input/output: OBJ proxies, JSON cameras, PNG photos and textured exports.

Camera convention: ``p = (fx * x / z + cx, fy * y / z + cy)`` for a point
``(x, y, z) = R X + t`` in the camera frame, ``z > 0`` in front of the camera,
and pixel ``(0, 0)`` is the center of the top-left pixel.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import GeometryError, SceneError
from .geometry import ProxyPolygon, UVChart

logger = logging.getLogger(__name__)

RESOLUTION_CHAIN = (256, 512, 1024, 2048)
PHOTO_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True, eq=False)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def validate(self, name: str = "camera") -> None:
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-9 or np.linalg.det(r) <= 0:
            raise SceneError(f"{name}: non-orthonormal rotation",
                             hint="rotation must be a proper world-to-camera rotation matrix")
        if self.width <= 0 or self.height <= 0 or self.fx <= 0 or self.fy <= 0:
            raise SceneError(f"{name}: invalid intrinsics")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(self.translation))):
            raise SceneError(f"{name}: non-finite extrinsics")

    @classmethod
    def look_at(cls, center, target, up, width: int, height: int, fx: float,
                fy: float | None = None, cx: float | None = None, cy: float | None = None) -> "Camera":
        """Camera at ``center`` looking toward ``target`` with image-up roughly ``up``."""
        center = np.asarray(center, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            raise GeometryError("look_at: up vector parallel to viewing direction")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        return cls(width, height, float(fx), float(fy if fy is not None else fx),
                   float(cx if cx is not None else (width - 1) / 2.0),
                   float(cy if cy is not None else (height - 1) / 2.0),
                   r, -r @ center)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Camera +z axis in world coordinates."""
        return self.rotation[2].copy()

    def pixel_rays(self) -> np.ndarray:
        """World-space ray directions (H, W, 3) through pixel centers, scaled to unit camera depth."""
        xs = (np.arange(self.width) - self.cx) / self.fx
        ys = (np.arange(self.height) - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        d = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        return d @ self.rotation

    def to_json(self, image: str) -> dict:
        return {
            "image": image,
            "width": int(self.width),
            "height": int(self.height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "rotation": [[float(v) for v in row] for row in self.rotation],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        try:
            return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                       float(d["cx"]), float(d["cy"]),
                       np.array(d["rotation"], dtype=np.float64),
                       np.array(d["translation"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"malformed camera entry: {exc}") from exc


@dataclass(eq=False)
class Photo:
    camera: Camera
    rgb: np.ndarray
    id: int
    name: str = ""

    def validate(self) -> None:
        h, w = self.rgb.shape[:2]
        if (w, h) != (self.camera.width, self.camera.height):
            raise SceneError(f"photo {self.name or self.id}: size {w}x{h} does not match camera "
                             f"{self.camera.width}x{self.camera.height}")
        if self.rgb.min() < 0.0 or self.rgb.max() > 1.0:
            raise SceneError(f"photo {self.name or self.id}: values outside [0, 1]")


class ProxyModel:
    """Vertex pool plus planar polygon faces."""

    def __init__(self, vertices, faces, *, planarity_tol: float = 1e-4):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = [list(map(int, f)) for f in faces]
        self.polygons: list[ProxyPolygon] = []
        for i, f in enumerate(self.faces):
            if len(f) < 3:
                raise SceneError(f"face {i} has fewer than 3 vertices")
            if min(f) < 0 or max(f) >= len(self.vertices):
                raise SceneError(f"face {i} references a missing vertex")
            try:
                poly = ProxyPolygon.from_vertices(self.vertices[f], index=i)
            except GeometryError as exc:
                raise SceneError(f"face {i}: {exc}") from exc
            if poly.planarity_error() >= planarity_tol * poly.diameter:
                raise SceneError(f"face {i} is not planar (max deviation {poly.planarity_error():.3g} m)",
                                 polygon=i, hint="split the face into planar polygons")
            self.polygons.append(poly)

    @property
    def diameter(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))


@dataclass
class SceneConfig:
    """Paths and tunables of one texturing run; relative paths resolve against ``base_dir``."""

    proxy_path: str
    camera_file: str
    photo_dir: str
    out_dir: str = "out"
    target_resolution: int = 2048
    loss_coefficients: tuple[float, float, float] = (1.0, 2.0, 10.0)
    adam: tuple[float, float, float] = (0.005, 0.9, 0.99)
    tau: float = 1e-3
    tau_w: float = 0.95
    lambda_s: float = 0.5
    blur_threshold: float = 50.0
    incline_limit_deg: float = 85.0
    seed: int = 0
    base_dir: str = field(default=".", repr=False)

    def validate(self) -> None:
        if self.target_resolution not in RESOLUTION_CHAIN:
            raise SceneError(f"target_resolution must be one of {RESOLUTION_CHAIN}, got {self.target_resolution}")
        if len(self.loss_coefficients) != 3 or any(c < 0 for c in self.loss_coefficients):
            raise SceneError("loss coefficients must be three non-negative numbers")
        if len(self.adam) != 3 or any(c < 0 for c in self.adam):
            raise SceneError("adam settings must be three non-negative numbers")
        if not 0.0 < self.tau < 1.0:
            raise SceneError("tau must lie in (0, 1)")
        if not 0.0 < self.tau_w <= 1.0:
            raise SceneError("tau_w must lie in (0, 1]")
        if self.lambda_s < 0 or self.blur_threshold < 0 or self.incline_limit_deg < 0:
            raise SceneError("lambda_s, blur_threshold and incline_limit_deg must be non-negative")

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        d["loss_coefficients"] = list(self.loss_coefficients)
        d["adam"] = list(self.adam)
        return d

    @classmethod
    def from_json(cls, d: dict, base_dir: str | os.PathLike = ".") -> "SceneConfig":
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown scene keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("loss_coefficients", "adam"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        try:
            return cls(base_dir=str(base_dir), **kw)
        except TypeError as exc:
            raise SceneError(f"bad scene file: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SceneConfig":
        path = Path(path)
        if not path.is_file():
            raise SceneError(f"scene file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SceneError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_json(d, base_dir=path.parent)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


# --- OBJ ---------------------------------------------------------------------

@dataclass
class ObjData:
    vertices: np.ndarray
    faces: list[list[int]]
    texcoords: np.ndarray
    face_texcoords: list[list[int] | None]
    face_materials: list[str | None]
    mtllib: str | None = None


def read_obj(path: str | os.PathLike) -> ObjData:
    path = Path(path)
    if not path.is_file():
        raise SceneError(f"mesh file not found: {path}")
    verts, vts, faces, ftc, fmat = [], [], [], [], []
    material = None
    mtllib = None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        try:
            if tag == "v":
                verts.append([float(x) for x in rest[:3]])
            elif tag == "vt":
                vts.append([float(x) for x in rest[:2]])
            elif tag == "f":
                vi, ti = [], []
                for tok in rest:
                    parts = tok.split("/")
                    a = int(parts[0])
                    vi.append(a - 1 if a > 0 else len(verts) + a)
                    if len(parts) > 1 and parts[1]:
                        b = int(parts[1])
                        ti.append(b - 1 if b > 0 else len(vts) + b)
                faces.append(vi)
                ftc.append(ti if len(ti) == len(vi) else None)
                fmat.append(material)
            elif tag == "usemtl":
                material = rest[0] if rest else None
            elif tag == "mtllib":
                mtllib = " ".join(rest)
        except (ValueError, IndexError) as exc:
            raise SceneError(f"{path}:{lineno}: cannot parse '{raw}'") from exc
    return ObjData(np.array(verts, dtype=np.float64).reshape(-1, 3), faces,
                   np.array(vts, dtype=np.float64).reshape(-1, 2), ftc, fmat, mtllib)


def write_obj(path: str | os.PathLike, vertices: np.ndarray, faces, *, texcoords=None,
              face_texcoords=None, face_materials=None, mtllib: str | None = None) -> None:
    lines = ["# proxy model"]
    if mtllib:
        lines.append(f"mtllib {mtllib}")
    for v in vertices:
        lines.append("v " + " ".join(repr(float(x)) for x in v))
    if texcoords is not None:
        for vt in texcoords:
            lines.append("vt " + " ".join(repr(float(x)) for x in vt))
    current = None
    for i, f in enumerate(faces):
        mat = face_materials[i] if face_materials else None
        if mat is not None and mat != current:
            lines.append(f"usemtl {mat}")
            current = mat
        if face_texcoords and face_texcoords[i] is not None:
            toks = [f"{a + 1}/{b + 1}" for a, b in zip(f, face_texcoords[i])]
        else:
            toks = [str(a + 1) for a in f]
        lines.append("f " + " ".join(toks))
    Path(path).write_text("\n".join(lines) + "\n")


# --- cameras and photos ------------------------------------------------------

def read_cameras(path: str | os.PathLike) -> dict[str, Camera]:
    path = Path(path)
    if not path.is_file():
        raise SceneError(f"camera file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: invalid JSON ({exc})") from exc
    entries = doc["cameras"] if isinstance(doc, dict) else doc
    cams: dict[str, Camera] = {}
    for n, entry in enumerate(entries):
        if "image" not in entry:
            raise SceneError(f"{path}: camera entry {n} has no 'image' field")
        cam = Camera.from_json(entry)
        cam.validate(f"camera '{entry['image']}'")
        if entry["image"] in cams:
            raise SceneError(f"{path}: duplicate camera for {entry['image']}")
        cams[entry["image"]] = cam
    return cams


def write_cameras(path: str | os.PathLike, cameras: dict[str, Camera]) -> None:
    doc = {"cameras": [cam.to_json(name) for name, cam in sorted(cameras.items())]}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | os.PathLike, rgb: np.ndarray) -> None:
    Image.fromarray(to_uint8(rgb), mode="RGB").save(path, format="PNG")


def quantize(rgb: np.ndarray) -> np.ndarray:
    """Round values to the 8-bit grid they will have after a PNG round trip."""
    return to_uint8(rgb).astype(np.float64) / 255.0


def load_scene(config: SceneConfig) -> tuple[ProxyModel, list[Photo]]:
    """Read the proxy mesh, cameras and photos named by ``config``."""
    proxy_path = config.resolve(config.proxy_path)
    camera_path = config.resolve(config.camera_file)
    photo_dir = config.resolve(config.photo_dir)
    obj = read_obj(proxy_path)
    if not obj.faces:
        raise SceneError(f"{proxy_path}: mesh has no faces")
    model = ProxyModel(obj.vertices, obj.faces)
    cameras = read_cameras(camera_path)
    if not photo_dir.is_dir():
        raise SceneError(f"photo directory not found: {photo_dir}")
    names = sorted(p.name for p in photo_dir.iterdir() if p.suffix.lower() in PHOTO_SUFFIXES)
    if len(names) != len(cameras):
        raise SceneError(f"photo/camera count mismatch: {len(names)} photos in {photo_dir}, "
                         f"{len(cameras)} cameras in {camera_path}")
    photos = []
    for k, name in enumerate(names):
        if name not in cameras:
            raise SceneError(f"no camera entry for photo {name}")
        photo = Photo(cameras[name], read_image(photo_dir / name), k, name)
        photo.validate()
        photos.append(photo)
    return model, photos


def write_scene(out_dir: str | os.PathLike, model: ProxyModel, photos: list[Photo],
                config: SceneConfig | None = None) -> SceneConfig:
    """Write a scene in the formats ``load_scene`` reads; returns the written config."""
    out = Path(out_dir)
    (out / "photos").mkdir(parents=True, exist_ok=True)
    write_obj(out / "proxy.obj", model.vertices, model.faces)
    cams = {}
    for p in photos:
        name = p.name or f"{p.id:04d}.png"
        write_image(out / "photos" / name, p.rgb)
        cams[name] = p.camera
    write_cameras(out / "cameras.json", cams)
    cfg = config or SceneConfig("proxy.obj", "cameras.json", "photos")
    cfg = SceneConfig.from_json({**cfg.to_json(), "proxy_path": "proxy.obj",
                                 "camera_file": "cameras.json", "photo_dir": "photos"}, base_dir=out)
    cfg.save(out / "scene.json")
    return cfg


# --- textured export ---------------------------------------------------------

def chart_uvs(chart: UVChart) -> np.ndarray:
    """OBJ texture coordinates (v up) of the polygon's vertices in its chart image."""
    pv = chart.polygon.plane_vertices
    su, sv = chart.extent
    u = (pv[:, 0] - chart.u_min) / su
    v = 1.0 - (chart.v_max - pv[:, 1]) / sv
    return np.stack([u, v], axis=-1)


def texture_name(index: int) -> str:
    return f"polygon_{index:03d}.png"


def source_map_name(index: int) -> str:
    return f"polygon_{index:03d}_source.png"


def write_source_map(path: str | os.PathLike, source: np.ndarray) -> None:
    """Store photo ids as 16-bit values ``id + 1``; 0 marks hole texels."""
    Image.fromarray((source.astype(np.int64) + 1).astype(np.uint16)).save(path, format="PNG")


def read_source_map(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.int64)
    return arr - 1


def write_outputs(out_dir: str | os.PathLike, model: ProxyModel, charts, textures, report: dict,
                  source_maps=None) -> Path:
    """Write per-polygon PNG textures, a textured OBJ/MTL pair and ``report.json``.

    Args:
        out_dir: Destination directory, created if missing.
        model: The proxy model.
        charts: One ``UVChart`` per polygon at the final resolution.
        textures: One (H, W, 3) array per polygon, holes already filled.
        report: JSON-serializable metrics/run report.
        source_maps: Optional per-polygon texel source maps (photo id, -1 for holes).
    """
    out = Path(out_dir)
    try:
        (out / "textures").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SceneError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise SceneError(f"output directory is not writable: {out}")
    if len(charts) != len(model.polygons) or len(textures) != len(model.polygons):
        raise SceneError("need exactly one chart and texture per polygon")
    texcoords, face_tc, mats, mtl = [], [], [], []
    for i, (chart, tex) in enumerate(zip(charts, textures)):
        if tex.shape[:2] != chart.shape:
            raise SceneError(f"texture {tex.shape[:2]} does not match chart {chart.shape}", polygon=i)
        write_image(out / "textures" / texture_name(i), tex)
        if source_maps is not None and source_maps[i] is not None:
            write_source_map(out / "textures" / source_map_name(i), source_maps[i])
        uv = chart_uvs(chart)
        face_tc.append(list(range(len(texcoords), len(texcoords) + len(uv))))
        texcoords.extend(uv.tolist())
        mats.append(f"polygon_{i:03d}")
        mtl += [f"newmtl polygon_{i:03d}", "Ka 1 1 1", "Kd 1 1 1", "Ks 0 0 0",
                f"map_Kd textures/{texture_name(i)}", ""]
    (out / "model.mtl").write_text("\n".join(mtl))
    write_obj(out / "model.obj", model.vertices, model.faces, texcoords=np.array(texcoords),
              face_texcoords=face_tc, face_materials=mats, mtllib="model.mtl")
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return out
