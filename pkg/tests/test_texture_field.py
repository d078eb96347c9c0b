import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import fronto_camera, quad_model, small_stage
from difftex.geometry import build_chart
from difftex.losses import quality_matrix
from difftex.scene_io import Camera, Photo, ProxyModel
from difftex.texture_field import (
    ChartSamples,
    WeightField,
    compose_texture,
    fill_holes,
    init_weights,
    normalized_weights,
    sample_photos,
    source_map,
    upsample_mask,
    upscale_field,
)
from difftex.sampling import upsample_bilinear
from difftex.visibility import compute_visibility_masks, render_depth

seeds = st.integers(0, 2**32 - 1)


def _fronto_setup(rgb_fn, res=32, dist=3.0):
    model = quad_model()
    chart = build_chart(model.polygons[0], res)
    cam = fronto_camera(chart, dist)
    rgb = rgb_fn(cam)
    photo = Photo(cam, rgb, 0)
    depth = render_depth(model, cam)
    masks = compute_visibility_masks(chart, [photo], [depth], 1e-4 * model.diameter)
    return chart, photo, masks, sample_photos(chart, [photo], masks.mapped)


def _random_samples(rng, k=3, h=8, w=8, p_mapped=0.8):
    mapped = rng.uniform(size=(k, h, w)) < p_mapped
    colors = np.where(mapped[..., None], rng.uniform(size=(k, h, w, 3)), 0.0)
    chart = build_chart(quad_model().polygons[0], 16)
    return ChartSamples(chart, list(range(k)), colors, mapped, np.zeros((k, h, w, 3))), mapped


def test_fronto_uniform_photo_initializes_to_one():
    # a distant camera makes every texel frontal up to (extent / distance)^2
    chart, photo, masks, samples = _fronto_setup(lambda c: np.full((c.height, c.width, 3), 0.4), dist=1000.0)
    q = quality_matrix(samples, masks.mapped, chart.polygon.normal)
    w = init_weights(q.q, masks.mapped, [0])
    assert masks.mapped.all()
    assert np.abs(w.theta - 1.0).max() < 1e-6
    assert np.array_equal(q.color, np.ones_like(q.color))


def test_grazing_photo_initializes_near_zero():
    model = quad_model()
    chart = build_chart(model.polygons[0], 32)
    cam = Camera.look_at([0, -1.0, 0.02], [0, 0, 0], [0, 0, 1], 64, 64, 40.0)
    photo = Photo(cam, np.full((64, 64, 3), 0.5), 0)
    depth = render_depth(model, cam)
    masks = compute_visibility_masks(chart, [photo], [depth], 1e-4 * model.diameter)
    samples = sample_photos(chart, [photo], masks.mapped)
    q = quality_matrix(samples, masks.mapped, chart.polygon.normal)
    w = init_weights(q.q, masks.mapped, [0])
    assert masks.mapped.any()
    assert w.theta[masks.mapped].max() < 0.05


def test_outlier_photo_gets_lower_initial_weight():
    # with only two samples the deviations from their mean are equal, so the
    # consensus needs a second agreeing photo before the outlier stands out
    rng = np.random.default_rng(0)
    samples, _ = _random_samples(rng, k=3, h=1, w=1)
    mapped = np.ones((3, 1, 1), bool)
    samples.colors[:] = 0.5
    samples.colors[1, 0, 0] = [0.9, 0.1, 0.2]
    samples.directions[:] = [0, 0, 1]
    q = quality_matrix(samples, mapped, np.array([0.0, 0.0, 1.0]))
    w = init_weights(q.q, mapped, [0, 1, 2])
    c = samples.colors[:, 0, 0]
    mu = c.mean(axis=0)
    var = ((c ** 2).sum(axis=1).mean() - mu @ mu) / 3
    expect = np.exp(-((c - mu) ** 2).sum(axis=1) / (2 * var + 1e-4))
    assert np.allclose(w.theta[:, 0, 0], expect, atol=1e-12)
    assert w.theta[1, 0, 0] < w.theta[0, 0, 0] == w.theta[2, 0, 0]


def test_identity_resample_reproduces_the_photo():
    rng = np.random.default_rng(1)
    chart, photo, masks, samples = _fronto_setup(lambda c: rng.uniform(size=(c.height, c.width, 3)))
    tex = compose_texture(WeightField(np.ones((1,) + chart.shape), [0]), samples, masks.mapped)
    assert not tex.hole.any()
    assert np.abs(tex.rgb - photo.rgb).max() < 1e-12


def test_identical_content_is_reproduced_for_any_weights():
    rng = np.random.default_rng(2)
    samples, _ = _random_samples(rng, k=3)
    mapped = np.ones((3, 8, 8), bool)
    samples.colors[:] = samples.colors[0]
    theta = rng.uniform(size=(3, 8, 8))
    tex = compose_texture(WeightField(theta, [0, 1, 2]), samples, mapped)
    assert np.abs(tex.rgb - samples.colors[0]).max() < 1e-12


@given(seeds)
def test_composition_matches_per_texel_oracle(seed):
    rng = np.random.default_rng(seed)
    samples, mapped = _random_samples(rng)
    theta = np.where(mapped, rng.uniform(size=mapped.shape), 0.0)
    theta[:, 0, 0] = 0.0                                  # exercise the uniform fallback
    mapped[:, 1, 1] = False                               # and a hole
    tex = compose_texture(WeightField(theta, [0, 1, 2]), samples, mapped)
    ref = oracles.compose_scalar(theta, samples.colors, mapped)
    assert np.abs(tex.rgb - ref).max() < 1e-12
    assert tex.hole[1, 1] and tex.hole.sum() == int((~mapped.any(axis=0)).sum())


@given(seeds)
def test_normalized_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    mapped = rng.uniform(size=(4, 10, 10)) < 0.6
    theta = rng.uniform(size=mapped.shape) * (rng.uniform(size=mapped.shape) < 0.7)
    w, _, _ = normalized_weights(theta, mapped)
    live = mapped.any(axis=0)
    assert np.abs(w.sum(axis=0)[live] - 1).max() < 1e-9
    assert np.all(w[~mapped] == 0)


@given(seeds, st.floats(1e-3, 1e3))
def test_composition_is_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    samples, mapped = _random_samples(rng)
    theta = rng.uniform(0.01, 1, size=mapped.shape)
    a = compose_texture(WeightField(theta, [0, 1, 2]), samples, mapped)
    b = compose_texture(WeightField(theta * scale, [0, 1, 2]), samples, mapped)
    assert np.abs(a.rgb - b.rgb).max() < 1e-12


@given(seeds)
def test_composition_is_convex(seed):
    rng = np.random.default_rng(seed)
    samples, mapped = _random_samples(rng)
    theta = rng.uniform(size=mapped.shape)
    tex = compose_texture(WeightField(theta, [0, 1, 2]), samples, mapped)
    lo = np.where(mapped[..., None], samples.colors, np.inf).min(axis=0)
    hi = np.where(mapped[..., None], samples.colors, -np.inf).max(axis=0)
    live = mapped.any(axis=0)
    assert np.all(tex.rgb[live] >= lo[live] - 1e-12) and np.all(tex.rgb[live] <= hi[live] + 1e-12)
    assert tex.rgb.min() >= 0 and tex.rgb.max() <= 1


def test_upscaling_preserves_constants():
    field = np.full((16, 16), 0.37)
    assert np.abs(upsample_bilinear(field, (32, 32)) - 0.37).max() < 1e-15


def test_upscaling_preserves_a_linear_ramp_up_to_the_clamped_border():
    i = np.arange(16)
    field = np.broadcast_to(0.02 * i + 0.1, (16, 16))
    up = upsample_bilinear(field, (32, 32))
    x_new = (np.arange(32) + 0.5) / 2 - 0.5          # new texel centers in old texel units
    ramp = 0.02 * np.clip(x_new, 0, 15) + 0.1
    assert np.abs(up - ramp[None]).max() < 1e-12
    assert np.abs(up[:, 1:-1] - (0.02 * x_new[1:-1] + 0.1)[None]).max() < 1e-12


@given(seeds)
def test_upscaling_matches_textbook_bilinear(seed):
    field = np.random.default_rng(seed).uniform(size=(16, 16))
    up = upsample_bilinear(field, (32, 32))
    assert np.abs(up - oracles.upsample_scalar(field, (32, 32))).max() < 1e-12


def test_upscale_field_clamps_masks_and_resets_moments():
    rng = np.random.default_rng(3)
    theta = rng.uniform(size=(2, 16, 16))
    w = WeightField(theta, [4, 7], m1=np.ones_like(theta), m2=np.ones_like(theta), step=9)
    mapped = np.ones((2, 16, 16), bool)
    mapped[1, :, :8] = False
    geo = np.ones((2, 32, 32), bool)
    geo[0, 0, 0] = False
    new_w, new_m = upscale_field(w, mapped, geo)
    assert new_w.theta.shape == (2, 32, 32) and new_w.photo_ids == [4, 7]
    assert new_w.step == 0 and not new_w.m1.any() and not new_w.m2.any()
    assert not new_m[0, 0, 0] and not new_m[1, :, :16].any() and new_m[1, :, 16:].all()
    assert np.all(new_w.theta[~new_m] == 0)
    assert new_w.theta.min() >= 0 and new_w.theta.max() <= 1
    with pytest.raises(ValueError):
        upscale_field(new_w, new_m, geo)


def test_nearest_mask_upsampling_doubles_cells():
    m = np.array([[True, False], [False, True]])
    up = upsample_mask(m, (4, 4))
    assert np.array_equal(up, np.kron(m, np.ones((2, 2), bool)))


def test_source_map_picks_the_dominant_weight():
    theta = np.array([[[0.2, 0.5]], [[0.6, 0.5]]])
    mapped = np.array([[[True, True]], [[True, True]]])
    src = source_map(WeightField(theta, [3, 9]), mapped, tiebreak=np.array([[[0.1, 0.1]], [[0.9, 0.9]]]))
    assert src.tolist() == [[9, 9]]
    mapped[:, 0, 0] = False
    assert source_map(WeightField(theta, [3, 9]), mapped)[0, 0] == -1


def test_fill_holes():
    rgb = np.zeros((6, 6, 3))
    rgb[:, :3] = 0.2
    rgb[:, 3:] = 0.8
    hole = np.zeros((6, 6), bool)
    assert np.array_equal(fill_holes(rgb, hole), rgb)
    hole[2:4, 1:5] = True
    out = fill_holes(np.where(hole[..., None], 0.0, rgb), hole)
    assert np.all(out[hole] >= 0.2 - 1e-12) and np.all(out[hole] <= 0.8 + 1e-12)
    assert np.array_equal(out[~hole], rgb[~hole])
    assert np.all(fill_holes(rgb, np.ones((6, 6), bool)) == 0.5)


def test_unseen_texels_are_flagged_as_holes():
    _, inp, stage = small_stage(4)
    mapped = stage.geometric.mapped
    tex = compose_texture(WeightField(np.ones(mapped.shape), stage.samples.photo_ids), stage.samples, mapped)
    assert np.array_equal(tex.hole, ~mapped.any(axis=0))
