"""Plane frames, texel charts and texel-to-pixel mappings for proxy polygons.

Each polygon gets an orthographic chart on its own plane: square texels laid
out along the plane basis ``(e1, e2)``. Column ``i`` grows along ``e1`` and
row ``j`` grows along ``-e2`` so that row 0 is at the top of the image when the
polygon is seen from the front. Texel ``(i, j)`` has its center at plane
coordinates ``(u_min + (i + 0.5) s, v_max - (j + 0.5) s)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError


def _newell_normal(vertices: np.ndarray) -> np.ndarray:
    nxt = np.roll(vertices, -1, axis=0)
    n = np.array([
        np.sum((vertices[:, 1] - nxt[:, 1]) * (vertices[:, 2] + nxt[:, 2])),
        np.sum((vertices[:, 2] - nxt[:, 2]) * (vertices[:, 0] + nxt[:, 0])),
        np.sum((vertices[:, 0] - nxt[:, 0]) * (vertices[:, 1] + nxt[:, 1])),
    ])
    return n


def plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right-handed in-plane basis: ``e1`` from the world axis most orthogonal to ``normal``."""
    axis = int(np.argmin(np.abs(normal)))  # argmin keeps the lowest index on ties
    a = np.zeros(3)
    a[axis] = 1.0
    e1 = a - np.dot(a, normal) * normal
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    e2 /= np.linalg.norm(e2)
    return e1, e2


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd crossing test of 2D ``points`` (..., 2) against polygon ``poly`` (n, 2)."""
    x = points[..., 0]
    y = points[..., 1]
    inside = np.zeros(x.shape, dtype=bool)
    n = len(poly)
    for a in range(n):
        xa, ya = poly[a]
        xb, yb = poly[(a + 1) % n]
        if ya == yb:
            continue
        crosses = (ya > y) != (yb > y)
        xint = xa + (y - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (x < xint)
    return inside


@dataclass(frozen=True, eq=False)
class ProxyPolygon:
    """A planar polygon of the proxy model with its plane frame."""

    vertices: np.ndarray
    normal: np.ndarray
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    index: int = 0

    @classmethod
    def from_vertices(cls, vertices, index: int = 0) -> "ProxyPolygon":
        v = np.asarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 3:
            raise GeometryError("polygon needs at least 3 vertices", polygon=index)
        n = _newell_normal(v)
        norm = np.linalg.norm(n)
        if norm < 1e-15:
            raise GeometryError("degenerate polygon (zero area)", polygon=index,
                                hint="remove collapsed faces from the proxy mesh")
        n = n / norm
        origin = v.mean(axis=0)
        e1, e2 = plane_basis(n)
        return cls(v, n, origin, e1, e2, index)

    def to_plane(self, points: np.ndarray) -> np.ndarray:
        d = np.asarray(points, dtype=np.float64) - self.origin
        return np.stack([d @ self.e1, d @ self.e2], axis=-1)

    def to_world(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return self.origin + xy[..., :1] * self.e1 + xy[..., 1:2] * self.e2

    @property
    def plane_vertices(self) -> np.ndarray:
        return self.to_plane(self.vertices)

    @property
    def area(self) -> float:
        p = self.plane_vertices
        q = np.roll(p, -1, axis=0)
        return 0.5 * abs(float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1])))

    @property
    def diameter(self) -> float:
        d = self.vertices[:, None, :] - self.vertices[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())

    def planarity_error(self) -> float:
        return float(np.abs((self.vertices - self.origin) @ self.normal).max())

    def centroid(self) -> np.ndarray:
        """Area centroid in world coordinates."""
        p = self.plane_vertices
        q = np.roll(p, -1, axis=0)
        cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
        a = cross.sum() / 2.0
        if abs(a) < 1e-18:
            return self.vertices.mean(axis=0)
        cx = ((p[:, 0] + q[:, 0]) * cross).sum() / (6 * a)
        cy = ((p[:, 1] + q[:, 1]) * cross).sum() / (6 * a)
        return self.to_world(np.array([cx, cy]))


@dataclass(frozen=True, eq=False)
class UVChart:
    """Texel grid covering a polygon's bounding rectangle in its plane frame."""

    polygon: ProxyPolygon
    width: int
    height: int
    texel_size: float
    u_min: float
    v_max: float
    inside_mask: np.ndarray = field(repr=False)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def extent(self) -> tuple[float, float]:
        return self.width * self.texel_size, self.height * self.texel_size

    @property
    def texel_to_plane(self) -> np.ndarray:
        """Affine map ``(i, j, 1) -> (x, y, 1)`` from texel indices to plane coordinates."""
        s = self.texel_size
        return np.array([
            [s, 0.0, self.u_min + 0.5 * s],
            [0.0, -s, self.v_max - 0.5 * s],
            [0.0, 0.0, 1.0],
        ])

    def plane_coords(self) -> np.ndarray:
        """Plane coordinates of all texel centers, shape (H, W, 2)."""
        s = self.texel_size
        xs = self.u_min + (np.arange(self.width) + 0.5) * s
        ys = self.v_max - (np.arange(self.height) + 0.5) * s
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def points(self) -> np.ndarray:
        """World positions of all texel centers, shape (H, W, 3)."""
        return self.polygon.to_world(self.plane_coords())

    def plane_to_texel(self, xy: np.ndarray) -> np.ndarray:
        """Real-valued texel coordinates ``(i, j)`` of plane points."""
        s = self.texel_size
        i = (xy[..., 0] - self.u_min) / s - 0.5
        j = (self.v_max - xy[..., 1]) / s - 0.5
        return np.stack([i, j], axis=-1)

    def homography(self, camera) -> np.ndarray:
        """Plane-induced homography taking plane coordinates ``(x, y, 1)`` to pixels."""
        p = self.polygon
        r = camera.rotation
        m = np.column_stack([r @ p.e1, r @ p.e2, r @ p.origin + camera.translation])
        return camera.K @ m

    def texel_homography(self, camera) -> np.ndarray:
        """Homography taking texel indices ``(i, j, 1)`` to pixels."""
        return self.homography(camera) @ self.texel_to_plane


def build_chart(polygon: ProxyPolygon, stage_resolution: int) -> UVChart:
    """Lay a square-texel grid over ``polygon`` with its longer side at ``stage_resolution`` texels."""
    if stage_resolution < 16:
        raise GeometryError(f"stage resolution {stage_resolution} is below 16", polygon=polygon.index)
    if polygon.area <= 0.0:
        raise GeometryError("degenerate polygon (zero area)", polygon=polygon.index)
    pv = polygon.plane_vertices
    lo = pv.min(axis=0)
    hi = pv.max(axis=0)
    size = hi - lo
    longer = float(size.max())
    if longer <= 0.0:
        raise GeometryError("degenerate polygon (zero extent)", polygon=polygon.index)
    ts = longer / stage_resolution
    counts = []
    for k in range(2):
        if size[k] == longer:
            counts.append(stage_resolution)
        else:
            # guard against 127.99999 -> 128 turning into 129
            counts.append(max(1, int(np.ceil(size[k] / ts - 1e-9))))
    w, h = counts
    chart = UVChart(polygon, w, h, ts, float(lo[0]), float(hi[1]), np.zeros((h, w), bool))
    inside = points_in_polygon(chart.plane_coords(), pv)
    object.__setattr__(chart, "inside_mask", inside)
    return chart


def project_points(camera, points: np.ndarray):
    """Project world points (..., 3) to pixels; returns ``(pixels (..., 2), depth (...))``."""
    pc = points @ camera.rotation.T + camera.translation
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * pc[..., 0] / z + camera.cx
        v = camera.fy * pc[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1), z


def in_image(camera, pixels: np.ndarray) -> np.ndarray:
    x = pixels[..., 0]
    y = pixels[..., 1]
    return (x >= 0) & (x <= camera.width - 1) & (y >= 0) & (y <= camera.height - 1)


def texel_to_pixel(chart: UVChart, camera, texels: np.ndarray | None = None):
    """Map texel centers to real-valued pixel positions in ``camera``.

    Args:
        chart: The polygon chart.
        camera: Target camera (a ``Camera`` or anything with the same fields).
        texels: Texel indices ``(..., 2)`` as ``(i, j)``; all texels when omitted.

    Returns:
        ``(pixels, ok)`` where ``ok`` is False for texels behind the camera or
        outside the image. Out-of-view is a normal outcome, not an error.
    """
    if texels is None:
        jj, ii = np.mgrid[0:chart.height, 0:chart.width]
        texels = np.stack([ii, jj], axis=-1)
    t = np.asarray(texels, dtype=np.float64)
    hmat = chart.texel_homography(camera)
    hom = t @ hmat[:, :2].T + hmat[:, 2]
    w = hom[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = hom[..., :2] / w[..., None]
    # K has (0, 0, 1) as last row, so w is the camera-frame depth
    ok = (w > 0) & in_image(camera, pix)
    return pix, ok


def view_direction_field(chart: UVChart, camera) -> np.ndarray:
    """Unit vectors from every texel center toward the camera center, shape (H, W, 3)."""
    d = camera.center - chart.points()
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise GeometryError("a texel coincides with a camera center", polygon=chart.polygon.index,
                            hint="move the camera off the proxy surface")
    return d / norm


def guidance_direction(polygon: ProxyPolygon, cameras) -> np.ndarray:
    """Average of the mean surface-to-camera direction and the polygon normal, renormalized."""
    cameras = list(cameras)
    if not cameras:
        raise GeometryError("guidance direction needs at least one visible photo", polygon=polygon.index)
    c = polygon.centroid()
    dirs = np.array([cam.center - c for cam in cameras], dtype=np.float64)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # fixed summation order keeps the result independent of the caller's ordering
    order = np.lexsort(dirs.T[::-1])
    total = np.zeros(3)
    for k in order:
        total = total + dirs[k]
    norm = np.linalg.norm(total)
    if norm < 1e-12:
        return polygon.normal.copy()
    g = 0.5 * total / norm + 0.5 * polygon.normal
    gn = np.linalg.norm(g)
    if gn < 1e-12:
        return polygon.normal.copy()
    return g / gn
