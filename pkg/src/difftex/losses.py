"""Quality terms, the restricted polygon renderer and the three losses with analytic gradients.

All losses are functions of the raw weights ``theta`` (K, H, W) only; masks,
quality scores, pair costs and the texture used for the pair costs are
frozen in a ``LossContext`` that is rebuilt every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .geometry import UVChart
from .sampling import bilinear_taps
from .texture_field import EPS_SUM, ChartSamples, TextureMap, compose_raw
from .visibility import MaskSet

EPS_COLOR = 1e-4
GRAY = np.array([0.299, 0.587, 0.114])


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# --- quality ---------------------------------------------------------------

def color_stats(colors: np.ndarray, mapped: np.ndarray, sq_norm: np.ndarray | None = None):
    """Mean color and per-channel-pooled standard deviation of the active samples per texel."""
    m = mapped.astype(np.float64)
    n = np.maximum(mapped.sum(axis=0), 1)
    mean = np.einsum("khw,khwc->hwc", m, colors) / n[..., None]
    if sq_norm is None:
        sq_norm = np.einsum("khwc,khwc->khw", colors, colors)
    # pooled over channels: mean of E[c^2] - E[c]^2
    var = (np.einsum("khw,khw->hw", m, sq_norm) / n - np.einsum("hwc,hwc->hw", mean, mean)) / 3.0
    return mean, np.sqrt(np.maximum(var, 0.0))


@dataclass
class QualityMatrix:
    q: np.ndarray           # (K, H, W) Q_a * Q_c, zero outside the masks
    angle: np.ndarray       # (K, H, W) Q_a
    color: np.ndarray       # (K, H, W) Q_c
    mean: np.ndarray        # (H, W, 3)
    std: np.ndarray         # (H, W)


def frontality(samples: ChartSamples, normal: np.ndarray) -> np.ndarray:
    """``Q_a``: clamped cosine between each texel's view direction and the normal."""
    return np.maximum(0.0, samples.directions @ normal)


def quality_matrix(samples: ChartSamples, mapped: np.ndarray, normal: np.ndarray,
                   angle: np.ndarray | None = None) -> QualityMatrix:
    """Frontality times color consensus for every photo and texel."""
    q_a = frontality(samples, normal) if angle is None else angle
    mean, std = color_stats(samples.colors, mapped, samples.sq_norm)
    dev2 = (samples.sq_norm - 2.0 * np.einsum("khwc,hwc->khw", samples.colors, mean)
            + np.einsum("hwc,hwc->hw", mean, mean))
    q_c = np.exp(-np.maximum(dev2, 0.0) / (2.0 * std[None] ** 2 + EPS_COLOR))
    q = q_a * q_c * mapped
    return QualityMatrix(q, q_a, q_c, mean, std)


# --- restricted renderer ---------------------------------------------------

@dataclass
class RenderMap:
    """Footprint pixels of one photo mapped back into the chart through the inverse homography."""

    pix: np.ndarray         # (P,) flat pixel indices
    colors: np.ndarray      # (P, 3) photo colors at those pixels
    taps: np.ndarray        # (P, 4) flat texel indices
    weights: np.ndarray     # (P, 4) bilinear weights
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def operators(self, hole_flat: np.ndarray):
        """Sparse ``(fetch, fetch_t, pull, ok)`` for a hole set.

        ``fetch`` renders U at the pixels with hole taps renormalized away,
        ``pull`` is the plain bilinear fetch used for the quality map, and
        ``ok`` flags pixels with at least one non-hole tap.
        """
        key = hash(hole_flat.tobytes())
        hit = self._cache.get("ops")
        if hit is not None and hit[0] == key:
            return hit[1]
        n = hole_flat.size
        p = len(self.pix)
        rows = np.repeat(np.arange(p), 4)
        wv, norm = _valid_tap_weights(self, hole_flat)
        ok = norm > 0
        wn = np.where(ok[:, None], wv / np.where(ok, norm, 1.0)[:, None], 0.0)
        fetch = sparse.csr_matrix((wn.ravel(), (rows, self.taps.ravel())), shape=(p, n))
        pull = sparse.csr_matrix((self.weights.ravel(), (rows, self.taps.ravel())), shape=(p, n))
        ops = (fetch, fetch.T.tocsr(), pull, ok)
        self._cache["ops"] = (key, ops)
        return ops


def build_render_map(chart: UVChart, photo, footprint: np.ndarray) -> RenderMap:
    """Inverse-map the footprint pixels into the chart.

    A camera lying in the polygon's plane has a singular homography; it sees
    nothing of the polygon and gets an empty map.
    """
    h = chart.texel_homography(photo.camera)
    if len(footprint) == 0 or abs(np.linalg.det(h)) < 1e-12 * np.abs(h).max() ** 3:
        empty = np.zeros(0, dtype=np.int64)
        return RenderMap(empty, np.zeros((0, 3)), np.zeros((0, 4), dtype=np.int64), np.zeros((0, 4)))
    hinv = np.linalg.inv(h)
    w = photo.camera.width
    px = (footprint % w).astype(np.float64)
    py = (footprint // w).astype(np.float64)
    hom = np.stack([px, py, np.ones_like(px)], axis=-1) @ hinv.T
    coords = hom[:, :2] / hom[:, 2:3]
    taps, wts = bilinear_taps(chart.shape, coords)
    colors = photo.rgb.reshape(-1, 3)[footprint]
    return RenderMap(footprint, colors, taps, wts)


def _valid_tap_weights(rmap: RenderMap, hole_flat: np.ndarray):
    wv = np.where(hole_flat[rmap.taps], 0.0, rmap.weights)
    norm = wv.sum(axis=1)
    return wv, norm


def render_polygon_view(texture: TextureMap, rmap: RenderMap, active: np.ndarray | None = None):
    """Render the textured polygon at the photo's footprint pixels.

    Bilinear texture fetch that ignores hole texels (their weight is spread
    over the remaining taps). Returns ``(values (P, 3), ok (P,))``; pixels
    outside ``active`` or with only hole taps are flagged not ok.
    """
    u = texture.rgb.reshape(-1, 3)
    wv, norm = _valid_tap_weights(rmap, texture.hole.ravel())
    ok = norm > 0
    if active is not None:
        ok &= active
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.einsum("pk,pkc->pc", wv, u[rmap.taps]) / norm[:, None]
    vals[~ok] = 0.0
    return vals, ok


def render_image(texture: TextureMap, rmap: RenderMap, shape, active=None) -> np.ndarray:
    """Full (H, W, 3) render with NaN outside the rendered pixels."""
    vals, ok = render_polygon_view(texture, rmap, active)
    img = np.full((shape[0] * shape[1], 3), np.nan)
    img[rmap.pix[ok]] = vals[ok]
    return img.reshape(shape[0], shape[1], 3)


# --- loss context ----------------------------------------------------------

@dataclass
class LossContext:
    samples: ChartSamples
    masks: MaskSet
    render_maps: list[RenderMap]
    quality: np.ndarray             # (K, H, W)
    residual2: np.ndarray           # (K, H, W) |a_hat (d_k - v~)|^2
    cost_up: np.ndarray             # (K, H-1, W) C(t, up(t)) with t in rows 1..H-1, 0 off pair_up
    cost_left: np.ndarray           # (K, H, W-1) C(t, left(t)) with t in cols 1..W-1, 0 off pair_left
    pair_up: np.ndarray             # (H-1, W) both texels inside the polygon
    pair_left: np.ndarray           # (H, W-1)
    alpha: float = 1.0
    beta: float = 2.0
    omega: float = 10.0
    composed: tuple | None = None   # (theta, compose_raw result) reused when the loss sees that theta

    @property
    def mapped(self) -> np.ndarray:
        return self.masks.mapped


def perspective_residual(samples: ChartSamples, mapped: np.ndarray, guidance: np.ndarray,
                         base: np.ndarray | None = None) -> np.ndarray:
    """``|a_hat (d_k - v~)|^2`` per photo and texel; ``base`` is the unmasked value if already known."""
    if base is None:
        base = ((samples.directions - guidance) ** 2).sum(axis=-1)
    return base * mapped


def gradient_magnitude(colors: np.ndarray) -> np.ndarray:
    """Grayscale central-difference gradient magnitude per photo, (K, H, W)."""
    gray = colors @ GRAY
    out = np.zeros(gray.shape)
    for k in range(gray.shape[0]):
        if min(gray.shape[1:]) < 2:
            continue
        gy, gx = np.gradient(gray[k])
        out[k] = np.sqrt(gx ** 2 + gy ** 2)
    return out


def pair_costs(texture_rgb: np.ndarray, mapped: np.ndarray, overlap: np.ndarray,
               grad_mag: np.ndarray, lambda_s: float, pair_up: np.ndarray | None = None,
               pair_left: np.ndarray | None = None):
    """Costs ``C = m_k(t) D(t, q) + lambda_s`` for up and left neighbor pairs.

    Pairs not flagged in ``pair_up`` / ``pair_left`` get cost zero.
    """
    count = mapped.sum(axis=0)
    g = np.einsum("khw,khw->hw", mapped.astype(np.float64), grad_mag) / np.maximum(count, 1)
    u = texture_rgb
    d_up = sigmoid(np.linalg.norm(u[1:] - u[:-1], axis=-1)) * (1.0 + g[1:])
    d_left = sigmoid(np.linalg.norm(u[:, 1:] - u[:, :-1], axis=-1)) * (1.0 + g[:, 1:])
    c_up = overlap[:, 1:, :] * d_up[None]
    c_up += lambda_s
    c_left = overlap[:, :, 1:] * d_left[None]
    c_left += lambda_s
    if pair_up is not None:
        c_up *= pair_up[None]
    if pair_left is not None:
        c_left *= pair_left[None]
    return c_up, c_left


def build_context(samples: ChartSamples, masks: MaskSet, render_maps, texture: TextureMap,
                  quality: np.ndarray, guidance: np.ndarray, grad_mag: np.ndarray,
                  lambda_s: float = 0.5, alpha: float = 1.0, beta: float = 2.0,
                  omega: float = 10.0, persp_base: np.ndarray | None = None,
                  composed: tuple | None = None) -> LossContext:
    mapped = masks.mapped
    inside = samples.chart.inside_mask
    pair_up = inside[1:] & inside[:-1]
    pair_left = inside[:, 1:] & inside[:, :-1]
    c_up, c_left = pair_costs(texture.rgb, mapped, masks.overlap, grad_mag, lambda_s, pair_up, pair_left)
    return LossContext(
        samples, masks, list(render_maps), quality * mapped,
        perspective_residual(samples, mapped, guidance, persp_base), c_up, c_left,
        pair_up, pair_left,
        float(alpha), float(beta), float(omega), composed)


# --- losses ----------------------------------------------------------------

def _compose(theta, ctx):
    if ctx.composed is not None and ctx.composed[0] is theta:
        return ctx.composed[1]
    return compose_raw(theta, ctx.samples, ctx.mapped)


def loss_render(theta: np.ndarray, ctx: LossContext):
    """Quality-weighted squared render residuals plus the L1 sparsity term.

    Returns ``(value, grad)`` with ``grad`` shaped like ``theta``.
    """
    samples, mapped = ctx.samples, ctx.mapped
    h, w = samples.chart.shape
    u, total, fallback, hole = _compose(theta, ctx)
    u_flat = u.reshape(-1, 3)
    hole_flat = hole.ravel()
    g_u = np.zeros((h * w, 3))
    value = 0.0
    for k, rmap in enumerate(ctx.render_maps):
        fetch, fetch_t, pull, ok_tap = rmap.operators(hole_flat)
        ok = ctx.masks.active_footprint(k) & ok_tap
        if not ok.any():
            continue
        diff = fetch @ u_flat - rmap.colors
        q = pull @ ctx.quality[k].ravel()
        q2 = np.where(ok, q * q, 0.0)
        value += float(np.sum(q2[:, None] * diff * diff))
        g_u += fetch_t @ (2.0 * q2[:, None] * diff)         # dL/dR pulled back to texels
    g_u = g_u.reshape(h, w, 3)
    ok_t = (~fallback) & (~hole) & (total >= EPS_SUM)
    inv_total = np.where(ok_t, 1.0 / np.where(ok_t, total, 1.0), 0.0)
    # dU/dtheta_k = (S_k - U) / sum(theta)
    grad = np.einsum("hwc,khwc->khw", g_u, samples.colors) - np.einsum("hwc,hwc->hw", g_u, u)[None]
    grad *= (inv_total * 1.0)[None]
    grad *= mapped
    value += float(np.abs(theta).sum())
    grad = grad + np.sign(theta)
    return value, grad


def loss_perspective(theta: np.ndarray, ctx: LossContext):
    """Weight times squared deviation of each photo's viewing direction from the guidance."""
    value = float(np.sum(theta * ctx.residual2))
    return value, ctx.residual2


def loss_parameter(theta: np.ndarray, ctx: LossContext):
    """Cost-weighted absolute differences of masked weights between up/left neighbors."""
    mapped = ctx.mapped
    a = theta * mapped
    grad = np.zeros_like(theta)
    value = 0.0
    for axis, cost in ((1, ctx.cost_up), (2, ctx.cost_left)):
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        hi, lo = tuple(hi), tuple(lo)
        s = np.sign(a[hi] - a[lo])
        s *= cost
        value += float(np.vdot(s, a[hi] - a[lo]))    # sign(d) * d = |d|
        grad[hi] += s
        grad[lo] -= s
    grad *= mapped
    return value, grad


@dataclass
class LossBreakdown:
    render: float
    persp: float
    para: float
    total: float
    grad: np.ndarray
    grad_render: np.ndarray | None = None
    grad_persp: np.ndarray | None = None
    grad_para: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {"render": self.render, "persp": self.persp, "para": self.para, "total": self.total}


def total_loss_and_grad(theta: np.ndarray, ctx: LossContext) -> LossBreakdown:
    lr, gr = loss_render(theta, ctx)
    lp, gp = loss_perspective(theta, ctx)
    la, ga = loss_parameter(theta, ctx)
    total = ctx.alpha * lr + ctx.beta * lp + ctx.omega * la
    grad = ctx.alpha * gr
    grad += ctx.beta * gp
    grad += ctx.omega * ga
    grad *= ctx.mapped
    return LossBreakdown(lr, lp, la, total, grad, gr, gp, ga)
