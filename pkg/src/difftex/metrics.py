"""Texture quality metrics: error percentiles, SSIM and viewing-angle scores."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter


def texel_distances(texture: np.ndarray, ground_truth: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if texture.shape != ground_truth.shape:
        raise ValueError(f"resolution mismatch: {texture.shape} vs {ground_truth.shape}")
    d = np.linalg.norm(texture - ground_truth, axis=-1)
    return d[mask] if mask is not None else d.ravel()


def nearest_rank(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile (``p`` in percent) without interpolation."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        return float("nan")
    rank = max(1, math.ceil(p / 100.0 * v.size))
    return float(v[min(rank, v.size) - 1])


def error_percentile(texture: np.ndarray, ground_truth: np.ndarray, p: float,
                     mask: np.ndarray | None = None) -> float:
    """Euclidean RGB distance below which ``p`` percent of the (masked) texels fall."""
    return nearest_rank(texel_distances(texture, ground_truth, mask), p)


def ssim(x: np.ndarray, y: np.ndarray, *, sigma: float = 1.5, radius: int = 5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window, averaged over channels and valid windows."""
    if x.shape != y.shape:
        raise ValueError(f"resolution mismatch: {x.shape} vs {y.shape}")
    if min(x.shape[:2]) < 2 * radius + 1:
        raise ValueError("image smaller than the SSIM window")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    trunc = radius / sigma

    def filt(a):
        return gaussian_filter(a, sigma, truncate=trunc)

    vals = []
    for c in range(x.shape[-1]):
        a, b = x[..., c], y[..., c]
        mx, my = filt(a), filt(b)
        sxx = filt(a * a) - mx * mx
        syy = filt(b * b) - my * my
        sxy = filt(a * b) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        m = num / den
        vals.append(m[radius:-radius, radius:-radius].mean())
    return float(np.mean(vals))


def perspective_quality(source: np.ndarray, directions: dict, normal: np.ndarray) -> tuple[float, float]:
    """Frontality and viewing-direction consistency of the texel source map.

    ``q_front`` averages the clamped cosine between each texel's source
    viewing direction and the polygon normal; ``q_vc`` averages
    ``(1 + cos) / 2`` of the source directions over 4-neighbor pairs.
    """
    h, w = source.shape
    d = np.zeros((h, w, 3))
    for pid, field_ in directions.items():
        sel = source == pid
        d[sel] = field_[sel]
    valid = source >= 0
    if not valid.any():
        return 0.0, 0.0
    q_front = float(np.maximum(0.0, d[valid] @ normal).mean())
    pairs = []
    for a, b, va, vb in (
        (d[1:], d[:-1], valid[1:], valid[:-1]),
        (d[:, 1:], d[:, :-1], valid[:, 1:], valid[:, :-1]),
    ):
        ok = va & vb
        pairs.append(0.5 * (1.0 + (a[ok] * b[ok]).sum(-1)))
    allp = np.concatenate(pairs)
    q_vc = float(allp.mean()) if allp.size else 1.0
    return q_front, q_vc


def source_coherence(source: np.ndarray, region: np.ndarray | None = None) -> float:
    """Fraction of 4-neighbor texel pairs (inside ``region``) sharing the same source photo."""
    valid = source >= 0
    if region is not None:
        valid &= region
    same, total = 0, 0
    for a, b, va, vb in (
        (source[1:], source[:-1], valid[1:], valid[:-1]),
        (source[:, 1:], source[:, :-1], valid[:, 1:], valid[:, :-1]),
    ):
        ok = va & vb
        same += int(np.sum(a[ok] == b[ok]))
        total += int(ok.sum())
    return same / total if total else 1.0


@dataclass
class PolygonMetrics:
    polygon: int
    error_p90: float = float("nan")
    error_p95: float = float("nan")
    ssim: float = float("nan")
    q_front: float = float("nan")
    q_vc: float = float("nan")
    hole_fraction: float = 0.0


@dataclass
class MetricsReport:
    polygons: list[PolygonMetrics] = field(default_factory=list)
    error_p90: float = float("nan")
    error_p95: float = float("nan")
    ssim: float = float("nan")
    approximate: str = ("q_front/q_vc are computed from the dominant-source texel map; "
                        "error distances are Euclidean RGB in [0,1]^3")

    def to_json(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        d = asdict(self)
        d["polygons"] = [{k: clean(v) for k, v in p.items()} for p in d["polygons"]]
        for k in ("error_p90", "error_p95", "ssim"):
            d[k] = clean(d[k])
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(["polygon", "error_p90", "error_p95", "ssim", "q_front", "q_vc", "hole_fraction"])
        for p in self.polygons:
            wr.writerow([p.polygon, p.error_p90, p.error_p95, p.ssim, p.q_front, p.q_vc, p.hole_fraction])
        wr.writerow(["all", self.error_p90, self.error_p95, self.ssim, "", "", ""])
        return buf.getvalue()


def evaluate_textures(recon: list[np.ndarray], gt: list[np.ndarray], masks: list[np.ndarray | None],
                      extra: list[dict] | None = None) -> MetricsReport:
    """Per-polygon and pooled metrics. ``masks`` select the texels that count (non-hole, inside)."""
    if len(recon) != len(gt):
        raise ValueError(f"layout mismatch: {len(recon)} reconstructed vs {len(gt)} ground-truth textures")
    report = MetricsReport()
    dists, ssims, weights = [], [], []
    for i, (r, g) in enumerate(zip(recon, gt)):
        if r.shape != g.shape:
            raise ValueError(f"layout mismatch at polygon {i}: {r.shape} vs {g.shape}")
        m = masks[i] if masks[i] is not None else np.ones(r.shape[:2], bool)
        pm = PolygonMetrics(i)
        d = texel_distances(r, g, m)
        if d.size:
            pm.error_p90 = nearest_rank(d, 90)
            pm.error_p95 = nearest_rank(d, 95)
            pm.ssim = ssim(r, g)
            dists.append(d)
            ssims.append(pm.ssim)
            weights.append(d.size)
        if extra and i < len(extra):
            for k, v in extra[i].items():
                setattr(pm, k, v)
        report.polygons.append(pm)
    if dists:
        alld = np.concatenate(dists)
        report.error_p90 = nearest_rank(alld, 90)
        report.error_p95 = nearest_rank(alld, 95)
        report.ssim = float(np.average(ssims, weights=weights))
    return report
