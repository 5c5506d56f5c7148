import math

import numpy as np
import pytest

from meshtex.geometry import Camera
from meshtex.predictor import MockPredictor, PredictorError
from meshtex.refine import (
    apply_masked_update,
    blank_pixel_count,
    build_view_contexts,
    gaussian_blur_mask,
    histogram_match,
    img2img_epoch,
    inpaint_epoch,
    rendered_blank_mask,
    select_inpaint_view,
)
from meshtex.renderer import Grid, inverse_render
from meshtex.sampler import build_schedule

FRONT = Camera(0, 0, 2.0, 45.0, 64)
BACK = Camera(0, 180, 2.0, 45.0, 64)


def front_covered_texture(mesh, texture_size=64):
    """Constant texture written only by the front view; rest is blank."""
    ctx = build_view_contexts(mesh, [FRONT], texture_size)[0]
    covered = ctx.footprints.visible
    vals = np.zeros((3, texture_size, texture_size), np.float32)
    vals[:, covered] = 0.4
    return Grid(vals, "rgb_texture"), ~covered


def test_histogram_match_identity(rng):
    vals = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    img = Grid(vals, "rgb_image")
    mask = Grid(np.ones((1, 16, 16), np.float32), "mask")
    out = histogram_match(img, img, mask)
    assert np.abs(out.values - vals).max() <= 1e-6


def test_histogram_match_shift(rng):
    src = rng.uniform(0.1, 0.5, size=(3, 16, 16)).astype(np.float32)
    ref = Grid(src + 0.25, "rgb_image")
    mask = Grid(np.ones((1, 16, 16), np.float32), "mask")
    out = histogram_match(Grid(src, "rgb_image"), ref, mask)
    assert np.abs(out.values - (src + 0.25)).max() <= 1e-6


def test_histogram_match_monotone_and_passthrough(rng):
    src = rng.uniform(size=(3, 16, 16)).astype(np.float32)
    ref = Grid(rng.uniform(size=(3, 16, 16)).astype(np.float32), "rgb_image")
    mask_vals = (rng.uniform(size=(1, 16, 16)) < 0.5).astype(np.float32)
    mask = Grid(mask_vals, "mask")
    out = histogram_match(Grid(src, "rgb_image"), ref, mask)
    sel = mask_vals[0] > 0
    assert np.array_equal(out.values[:, ~sel], src[:, ~sel])
    for ch in range(3):
        order = np.argsort(src[ch][sel], kind="stable")
        assert (np.diff(out.values[ch][sel][order]) >= -1e-9).all()


def test_histogram_match_empty_mask(rng):
    src = Grid(rng.uniform(size=(3, 8, 8)).astype(np.float32), "rgb_image")
    ref = Grid(rng.uniform(size=(3, 8, 8)).astype(np.float32), "rgb_image")
    out = histogram_match(src, ref, Grid(np.zeros((1, 8, 8), np.float32), "mask"))
    assert np.array_equal(out.values, src.values)


def test_apply_masked_update(rng):
    old = Grid(rng.uniform(size=(3, 8, 8)).astype(np.float32), "rgb_texture")
    new = Grid(rng.uniform(size=(3, 8, 8)).astype(np.float32), "rgb_texture")
    m = rng.uniform(size=(8, 8)).astype(np.float32)
    m[:4] = 0.0
    out = apply_masked_update(old, new, m)
    assert np.array_equal(out.values[:, :4], old.values[:, :4])
    want = old.values * (1 - m) + new.values * m
    assert np.abs(out.values - want).max() <= 1e-6
    full = apply_masked_update(old, new, np.ones((8, 8), np.float32))
    assert np.abs(full.values - new.values).max() <= 1e-6


def test_gaussian_blur_mask():
    mask = np.zeros((32, 32), bool)
    mask[16, 16] = True
    out = gaussian_blur_mask(mask, 2.0)
    assert out.max() <= 1.0 and out.min() >= 0.0
    assert out[16, 16] == out.max()
    assert abs(out.sum() - 1.0) <= 1e-6  # Gaussian kernel preserves mass


def test_blank_masks_and_view_selection(sphere_mesh):
    texture, blank = front_covered_texture(sphere_mesh)
    front_ctx, back_ctx = build_view_contexts(sphere_mesh, [FRONT, BACK], 64)
    n_front = blank_pixel_count(blank, sphere_mesh, front_ctx)
    n_back = blank_pixel_count(blank, sphere_mesh, back_ctx)
    assert n_back > n_front
    assert n_back > 0
    assert select_inpaint_view(blank, sphere_mesh, [front_ctx, back_ctx]) == 1
    none_blank = np.zeros_like(blank)
    assert select_inpaint_view(none_blank, sphere_mesh, [front_ctx, back_ctx]) is None
    screen = rendered_blank_mask(blank, sphere_mesh, back_ctx)
    assert screen.shape == (64, 64)
    assert (screen[back_ctx.buffers.foreground_mask == 0] == 0).all()


def test_inpaint_epoch_no_blank_is_noop(sphere_mesh):
    texture, _ = front_covered_texture(sphere_mesh)
    blank = np.zeros((64, 64), bool)
    ctxs = build_view_contexts(sphere_mesh, [BACK], 64)
    ref = build_view_contexts(sphere_mesh, [FRONT], 64)[0]
    out_tex, out_blank = inpaint_epoch(
        texture, blank, sphere_mesh, ctxs, ref, MockPredictor(), "p"
    )
    assert np.array_equal(out_tex.values, texture.values)
    assert not out_blank.any()


def test_inpaint_epoch_single_view_contract(sphere_mesh):
    """Replay one iteration: texels outside the blurred blank band are
    bit-identical and the blank flags follow the documented update."""
    texture, blank = front_covered_texture(sphere_mesh)
    ctx = build_view_contexts(sphere_mesh, [BACK], 64)[0]
    ref = build_view_contexts(sphere_mesh, [FRONT], 64)[0]
    sigma = 4.0
    out_tex, out_blank = inpaint_epoch(
        texture, blank, sphere_mesh, [ctx], ref, MockPredictor(), "p",
        sigma_blur_px=sigma, seed=0,
    )
    blank_img = rendered_blank_mask(blank, sphere_mesh, ctx)
    hard = blank_img > 0.5
    blurred = np.maximum(gaussian_blur_mask(hard, sigma), hard.astype(np.float64))
    mask_img = Grid(blurred[None].astype(np.float32), "mask")
    mask_tex, _ = inverse_render(mask_img, ctx.footprints)
    w = ctx.footprints.visible
    m_vals = np.where(w, mask_tex.values[0], 0.0)
    outside = m_vals == 0.0
    assert np.array_equal(out_tex.values[:, outside], texture.values[:, outside])
    assert np.array_equal(out_blank, blank & ~(w & (m_vals >= 0.5)))
    assert out_blank.sum() < blank.sum()
    assert out_tex.values.min() >= 0.0 and out_tex.values.max() <= 1.0


def test_inpaint_epoch_multi_view_reduces_blank(sphere_mesh):
    texture, blank = front_covered_texture(sphere_mesh)
    views = [(0, 180), (0, 90), (0, 270), (60, 0), (-60, 0), (60, 180), (-60, 180)]
    ctxs = build_view_contexts(
        sphere_mesh, [Camera(el, az, 2.0, 45.0, 64) for el, az in views], 64
    )
    ref = build_view_contexts(sphere_mesh, [FRONT], 64)[0]
    out_tex, out_blank = inpaint_epoch(
        texture, blank, sphere_mesh, ctxs, ref, MockPredictor(), "p",
        sigma_blur_px=4.0, seed=0,
    )
    charted = ctxs[0].footprints.charted
    assert (out_blank & charted).sum() < 0.5 * (blank & charted).sum()
    # Texels the front view wrote and no iteration touched keep their value.
    assert (np.abs(out_tex.values[:, ~blank] - 0.4) <= 0.4 + 1e-6).all()


class FailingPredictor(MockPredictor):
    def inpaint(self, *a, **k):
        raise PredictorError("down")

    def img2img(self, *a, **k):
        raise PredictorError("down")


def test_epochs_survive_backend_failure(sphere_mesh):
    texture, blank = front_covered_texture(sphere_mesh)
    ctxs = build_view_contexts(sphere_mesh, [BACK], 64)
    ref = build_view_contexts(sphere_mesh, [FRONT], 64)[0]
    out_tex, out_blank = inpaint_epoch(
        texture, blank, sphere_mesh, ctxs, ref, FailingPredictor(), "p"
    )
    assert np.array_equal(out_tex.values, texture.values)
    assert np.array_equal(out_blank, blank)
    sched = build_schedule(8)
    out2 = img2img_epoch(texture, sphere_mesh, ctxs, FailingPredictor(), "p", sched)
    assert np.array_equal(out2.values, texture.values)


def test_img2img_epoch_contract(sphere_mesh):
    texture, blank = front_covered_texture(sphere_mesh)
    sched = build_schedule(8)
    ctx = build_view_contexts(sphere_mesh, [FRONT], 64)[0]
    out = img2img_epoch(
        texture, sphere_mesh, [ctx], MockPredictor(), "p", sched,
        strength=0.4, rng=np.random.default_rng(3),
    )
    uncovered = ~ctx.footprints.visible
    assert np.array_equal(out.values[:, uncovered], texture.values[:, uncovered])
    assert out.values.min() >= -1e-6
    changed = ~np.isclose(out.values, texture.values).all(axis=0)
    assert changed.any()


def test_img2img_epoch_deterministic(sphere_mesh):
    texture, _ = front_covered_texture(sphere_mesh)
    sched = build_schedule(8)
    ctxs = build_view_contexts(sphere_mesh, [FRONT, BACK], 64)
    outs = [
        img2img_epoch(
            texture, sphere_mesh, ctxs, MockPredictor(), "p", sched,
            rng=np.random.default_rng(9), seed=1,
        )
        for _ in range(2)
    ]
    assert np.array_equal(outs[0].values, outs[1].values)


def test_img2img_strength_validation(sphere_mesh):
    texture, _ = front_covered_texture(sphere_mesh)
    sched = build_schedule(8)
    ctxs = build_view_contexts(sphere_mesh, [FRONT], 64)
    for bad in (0.0, 1.0, -0.3):
        with pytest.raises(ValueError):
            img2img_epoch(texture, sphere_mesh, ctxs, MockPredictor(), "p", sched, strength=bad)
