"""Per-texel blending weights, texture composition and coarse-to-fine upscaling."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import UVChart, texel_to_pixel, view_direction_field
from .sampling import bilinear_sample, upsample_bilinear

EPS_SUM = 1e-12


@dataclass
class ChartSamples:
    """Photo colors and viewing directions gathered at every texel center of a chart.

    ``colors[k]`` holds ``I_k(f_k(t))`` (bilinear) where photo k sees the texel
    and zero elsewhere; ``directions[k]`` points from the texel toward camera k.
    """

    chart: UVChart
    photo_ids: list[int]
    colors: np.ndarray        # (K, H, W, 3)
    in_view: np.ndarray       # (K, H, W) bool
    directions: np.ndarray    # (K, H, W, 3)

    @property
    def n_photos(self) -> int:
        return len(self.photo_ids)

    @cached_property
    def sq_norm(self) -> np.ndarray:
        """Squared color norms, (K, H, W)."""
        return np.einsum("khwc,khwc->khw", self.colors, self.colors)


def sample_photos(chart: UVChart, photos, visible: np.ndarray) -> ChartSamples:
    """Gather photo colors at texel centers; ``visible`` is the (K, H, W) geometric visibility."""
    k = len(photos)
    colors = np.zeros((k,) + chart.shape + (3,))
    dirs = np.zeros((k,) + chart.shape + (3,))
    for n, photo in enumerate(photos):
        pix, _ = texel_to_pixel(chart, photo.camera)
        vis = visible[n]
        colors[n][vis] = bilinear_sample(photo.rgb, pix[vis])
        dirs[n] = view_direction_field(chart, photo.camera)
    return ChartSamples(chart, [p.id for p in photos], colors, np.asarray(visible, bool), dirs)


@dataclass
class WeightField:
    """Raw blending parameters (one grid per photo) with Adam moment buffers."""

    theta: np.ndarray                 # (K, H, W) in [0, 1]
    photo_ids: list[int]
    m1: np.ndarray = field(default=None, repr=False)
    m2: np.ndarray = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        if self.m1 is None:
            self.m1 = np.zeros_like(self.theta)
        if self.m2 is None:
            self.m2 = np.zeros_like(self.theta)

    def copy(self) -> "WeightField":
        return WeightField(self.theta.copy(), list(self.photo_ids), self.m1.copy(), self.m2.copy(), self.step)


@dataclass
class TextureMap:
    rgb: np.ndarray       # (H, W, 3)
    hole: np.ndarray      # (H, W) bool: texels without any active photo


def init_weights(quality: np.ndarray, mapped: np.ndarray, photo_ids) -> WeightField:
    """Start every active texel at its quality score ``Q_a * Q_c``."""
    theta = np.where(mapped, quality, 0.0)
    return WeightField(np.clip(theta, 0.0, 1.0), list(photo_ids))


def normalized_weights(theta: np.ndarray, mapped: np.ndarray):
    """Per-texel convex weights over active photos.

    Returns ``(w_hat, total, fallback)`` where ``fallback`` marks texels whose
    raw sum is below ``EPS_SUM`` and that use a uniform blend instead.
    """
    th = theta * mapped
    total = th.sum(axis=0)
    fallback = (total < EPS_SUM) & mapped.any(axis=0)
    inv = np.where(total >= EPS_SUM, 1.0 / np.where(total >= EPS_SUM, total, 1.0), 0.0)
    w = th * inv[None]
    if fallback.any():
        count = mapped.sum(axis=0)
        uni = mapped / np.maximum(count, 1)[None]
        w = np.where(fallback[None], uni, w)
    return w, total, fallback


def compose_raw(theta: np.ndarray, samples: ChartSamples, mapped: np.ndarray):
    """Unclipped blend ``U`` plus the pieces its derivative needs: ``(u, total, fallback, hole)``."""
    w, total, fallback = normalized_weights(theta, mapped)
    u = np.einsum("khw,khwc->hwc", w, samples.colors)
    hole = ~mapped.any(axis=0)
    u[hole] = 0.0
    return u, total, fallback, hole


def compose_texture(weights: WeightField, samples: ChartSamples, mapped: np.ndarray) -> TextureMap:
    """Blend sampled photo colors with the normalized weights."""
    u, _, _, hole = compose_raw(weights.theta, samples, mapped)
    return TextureMap(np.clip(u, 0.0, 1.0), hole)


def source_map(weights: WeightField, mapped: np.ndarray, tiebreak: np.ndarray | None = None) -> np.ndarray:
    """Photo id with the dominant normalized weight per texel (-1 for holes).

    Ties go to the larger ``tiebreak`` value (e.g. frontality), then to the
    lower photo index.
    """
    w, _, _ = normalized_weights(weights.theta, mapped)
    w = np.where(mapped, w, -1.0)
    best = w.max(axis=0)
    cand = mapped & (w == best[None])
    if tiebreak is not None:
        tb = np.where(cand, tiebreak, -np.inf)
        cand &= tb == tb.max(axis=0)[None]
    k = np.argmax(cand, axis=0)
    ids = np.asarray(weights.photo_ids, dtype=np.int64)
    out = ids[k] if len(ids) else np.zeros(mapped.shape[1:], dtype=np.int64)
    out = np.where(mapped.any(axis=0), out, -1)
    return out


def upsample_mask(mask: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor counterpart of ``upsample_bilinear`` for boolean grids."""
    h, w = mask.shape[-2:]
    hn, wn = out_shape
    src_i = np.clip(np.rint((np.arange(wn) + 0.5) / 2.0 - 0.5 + 1e-9).astype(np.int64), 0, w - 1)
    src_j = np.clip(np.rint((np.arange(hn) + 0.5) / 2.0 - 0.5 + 1e-9).astype(np.int64), 0, h - 1)
    return mask[..., src_j[:, None], src_i[None, :]]


def upscale_field(weights: WeightField, mapped: np.ndarray, geometric: np.ndarray,
                  target_shape: tuple[int, int] | None = None):
    """Move the weight field one stage up the resolution chain.

    Args:
        weights: Current field at resolution ``(H, W)``.
        mapped: Current chart-space activation masks ``(K, H, W)``.
        geometric: Visibility masks at the new resolution ``(K, H', W')``.
        target_shape: New ``(H', W')``; taken from ``geometric`` when omitted.

    Returns:
        ``(weights, mapped)`` at the new resolution. Adam moments restart at zero.
    """
    shape = target_shape or geometric.shape[1:]
    if shape[0] <= mapped.shape[1] and shape[1] <= mapped.shape[2]:
        raise ValueError("field is already at the requested resolution")
    up_mask = upsample_mask(mapped, shape) & geometric
    theta = np.stack([upsample_bilinear(t, shape) for t in weights.theta]) if len(weights.theta) else \
        np.zeros((0,) + tuple(shape))
    theta = np.where(up_mask, np.clip(theta, 0.0, 1.0), 0.0)
    return WeightField(theta, list(weights.photo_ids)), up_mask


def fill_holes(rgb: np.ndarray, hole: np.ndarray, fill_value: float = 0.5) -> np.ndarray:
    """Fill hole texels by growing inward from known texels, averaging known 4-neighbors."""
    out = rgb.copy()
    known = ~hole
    if not known.any():
        out[...] = fill_value
        return out
    while not known.all():
        acc = np.zeros_like(out)
        cnt = np.zeros(known.shape)
        for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
            k = np.roll(known, shift, axis=axis)
            v = np.roll(out, shift, axis=axis)
            # np.roll wraps around; drop the wrapped row/column
            edge = [slice(None)] * 2
            edge[axis] = 0 if shift == 1 else -1
            k[tuple(edge)] = False
            acc += np.where(k[..., None], v, 0.0)
            cnt += k
        grow = ~known & (cnt > 0)
        out[grow] = acc[grow] / cnt[grow][:, None]
        known = known | grow
    return out
