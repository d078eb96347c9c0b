"""Photo filtering and HSV brightness matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import laplace

from .errors import FilterError
from .scene_io import Photo
from .visibility import visible_polygons

N_BINS = 256


def blur_score(rgb: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian of the [0, 255] grayscale image."""
    gray = (rgb @ np.array([0.299, 0.587, 0.114])) * 255.0
    lap = laplace(gray, mode="reflect")
    return float(lap[1:-1, 1:-1].var())


@dataclass
class PhotoFilterReport:
    entries: list[dict] = field(default_factory=list)

    def kept_ids(self) -> list[int]:
        return [e["photo"] for e in self.entries if e["kept"]]

    def to_json(self) -> list[dict]:
        return self.entries


def filter_photos(model, photos, depths, blur_threshold: float = 50.0, incline_limit_deg: float = 85.0):
    """Drop photos that see no polygon, are blurry, or only see polygons at extreme incline.

    Args:
        model: The proxy model.
        photos: Input photos.
        depths: One ``DepthBuffer`` per photo.

    Returns:
        ``(kept_photos, report)``. Raises ``FilterError`` when nothing survives.
    """
    report = PhotoFilterReport()
    kept = []
    for photo, depth in zip(photos, depths):
        entry = {"photo": int(photo.id), "name": photo.name, "kept": True, "reason": None}
        vis = visible_polygons(depth)
        score = blur_score(photo.rgb)
        entry["blur_score"] = score
        angles = []
        for i in sorted(vis):
            poly = model.polygons[i]
            d = photo.camera.center - poly.centroid()
            cos = np.dot(d, poly.normal) / np.linalg.norm(d)
            angles.append(float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))))
        entry["min_incline_deg"] = min(angles) if angles else None
        if not vis:
            entry.update(kept=False, reason="invisible")
        elif score < blur_threshold:
            entry.update(kept=False, reason="blurry")
        elif min(angles) > incline_limit_deg:
            entry.update(kept=False, reason="inclined")
        report.entries.append(entry)
        if entry["kept"]:
            kept.append(photo)
    if not kept:
        raise FilterError("every input photo was filtered out", report=report,
                          hint="lower --blur-threshold or check the camera file")
    return kept, report


def rgb_to_v(rgb: np.ndarray) -> np.ndarray:
    return rgb.max(axis=-1)


def _cdf_points(values: np.ndarray) -> np.ndarray:
    """Cumulative histogram at the 257 bin edges of [0, 1]."""
    hist, _ = np.histogram(values, bins=N_BINS, range=(0.0, 1.0))
    cdf = np.concatenate([[0.0], np.cumsum(hist)]).astype(np.float64)
    return cdf / max(cdf[-1], 1.0)


def _forward(values: np.ndarray, sample: np.ndarray) -> np.ndarray:
    """Exact empirical CDF of ``sample`` at ``values``, ties at their mid-rank."""
    lo = np.searchsorted(sample, values, side="left")
    hi = np.searchsorted(sample, values, side="right")
    return (lo + hi) / (2.0 * max(sample.size, 1))


def _inverse(f: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    """Piecewise-linear inverse CDF that skips empty bins."""
    edges = np.linspace(0.0, 1.0, N_BINS + 1)
    uniq, first = np.unique(cdf, return_index=True)
    last = np.searchsorted(cdf, uniq, side="right") - 1
    # each rising segment runs from the end of one plateau to the start of the next
    out = np.interp(f, np.repeat(uniq, 2), np.stack([edges[first], edges[last]], axis=1).ravel())
    # a value sitting exactly on a plateau maps to where mass resumes,
    # except the top one, which ends where mass ends
    at = edges[last]
    at[-1] = edges[first[-1]]
    pos = np.clip(np.searchsorted(uniq, f), 0, len(uniq) - 1)
    hit = uniq[pos] == f
    return np.where(hit, at[pos], out)


def reference_cdf(photos, masks=None) -> np.ndarray:
    cdfs = []
    for n, p in enumerate(photos):
        v = rgb_to_v(p.rgb)
        if masks is not None and masks[n] is not None and masks[n].any():
            v = v[masks[n]]
        cdfs.append(_cdf_points(v.ravel()))
    return np.mean(cdfs, axis=0)


def match_v(rgb: np.ndarray, src_values: np.ndarray, ref_cdf: np.ndarray) -> np.ndarray:
    """Remap V through ``ref^-1(F(V))`` keeping hue and saturation.

    ``F`` is the empirical CDF of the sorted ``src_values``; using exact ranks
    rather than the binned histogram makes a second matching a no-op.
    """
    v = rgb_to_v(rgb)
    v_new = np.clip(_inverse(_forward(v, src_values), ref_cdf), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(v > 0, v_new / v, 0.0)
    out = rgb * scale[..., None]
    black = v <= 0
    out[black] = v_new[black][:, None]
    return np.clip(out, 0.0, 1.0)


def histogram_match(photos, masks=None) -> list[Photo]:
    """Match every photo's V histogram to the average CDF of all photos.

    Args:
        photos: Photos to adjust.
        masks: Optional per-photo boolean masks selecting the pixels whose
            histogram is matched (e.g. pixels covered by the proxy).
    """
    if not photos:
        return []
    ref = reference_cdf(photos, masks)
    out = []
    for n, p in enumerate(photos):
        v = rgb_to_v(p.rgb)
        sel = v
        if masks is not None and masks[n] is not None and masks[n].any():
            sel = v[masks[n]]
        src = np.sort(sel.ravel())
        out.append(Photo(p.camera, match_v(p.rgb, src, ref), p.id, p.name))
    return out
