"""Texture refinement epochs: inpainting of never-seen texels, then
img2img detail repair on a denser view sweep.

Both epochs render the current texture, push it through the predictor
backend, and fold the result back with a per-texel convex blend, so texels
outside the affected band are bit-identical before and after.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.ndimage

from .geometry import Camera, Mesh, ViewBuffers, rasterize_view
from .predictor import NoisePredictor, PredictorError
from .renderer import Grid, TexelFootprint, compute_footprints, inverse_render, render
from .sampler import normalized_inverse_depth

log = logging.getLogger(__name__)

BLANK_RENDER_THRESHOLD = 0.5


@dataclass
class ViewContext:
    """Cached per-camera raster data reused across epoch iterations."""

    camera: Camera
    buffers: ViewBuffers
    footprints: TexelFootprint
    depth: Grid  # normalized inverse depth at image resolution


def build_view_contexts(
    mesh: Mesh, cameras: Sequence[Camera], texture_size: int
) -> list[ViewContext]:
    out = []
    for cam in cameras:
        buffers = rasterize_view(mesh, cam)
        fp = compute_footprints(mesh, cam, buffers, texture_size)
        depth = Grid(normalized_inverse_depth(buffers)[None].astype(np.float32), "mask")
        out.append(ViewContext(cam, buffers, fp, depth))
    return out


def rendered_blank_mask(blank: np.ndarray, mesh: Mesh, ctx: ViewContext) -> np.ndarray:
    """Screen-space indicator of blank texels, restricted to the foreground."""
    mask_tex = Grid(blank.astype(np.float32)[None], "mask")
    rendered = render(mask_tex, mesh, ctx.buffers)
    return rendered.values[0] * ctx.buffers.foreground_mask


def blank_pixel_count(blank: np.ndarray, mesh: Mesh, ctx: ViewContext) -> int:
    return int((rendered_blank_mask(blank, mesh, ctx) > BLANK_RENDER_THRESHOLD).sum())


def select_inpaint_view(
    blank: np.ndarray, mesh: Mesh, contexts: Sequence[ViewContext]
) -> int | None:
    """Index of the view seeing the most blank pixels; None when no view
    sees any (ties go to the earlier view)."""
    counts = [blank_pixel_count(blank, mesh, ctx) for ctx in contexts]
    best = int(np.argmax(counts))
    if counts[best] == 0:
        return None
    return best


def gaussian_blur_mask(mask: np.ndarray, sigma: float) -> np.ndarray:
    return np.clip(scipy.ndimage.gaussian_filter(mask.astype(np.float64), sigma), 0.0, 1.0)


def apply_masked_update(
    texture: Grid, new_tex: Grid, mask_tex_values: np.ndarray
) -> Grid:
    """Per-texel convex blend T*(1-m) + new*m; texels with m == 0 are kept
    bit-identical."""
    m = mask_tex_values[None]
    blended = texture.values * (1.0 - m) + new_tex.values * m
    out = np.where(m == 0.0, texture.values, blended)
    return Grid(out.astype(np.float32), texture.role)


def inpaint_epoch(
    texture: Grid,
    blank: np.ndarray,
    mesh: Mesh,
    contexts: Sequence[ViewContext],
    reference_ctx: ViewContext,
    predictor: NoisePredictor,
    prompt: str,
    cfg_scale: float = 7.5,
    sigma_blur_px: float = 32.0,
    seed: int = 0,
) -> tuple[Grid, np.ndarray]:
    """Iteratively fill texels never written by any sampling view.

    Each iteration picks the view with the largest rendered blank area,
    inpaints its rendering against a reference-view canvas, and blends the
    result back through the blurred blank mask. Returns the updated texture
    and blank flags.
    """
    texture = texture.copy()
    blank = blank.copy()
    ref_image = render(texture, mesh, reference_ctx.buffers)
    for _ in range(len(contexts)):
        pick = select_inpaint_view(blank, mesh, contexts)
        if pick is None:
            break
        ctx = contexts[pick]
        blank_img = rendered_blank_mask(blank, mesh, ctx)
        hard = blank_img > BLANK_RENDER_THRESHOLD
        # Feather outward only: the blank region itself must stay at 1 or a
        # wide blur of a small island would never cross the fill threshold.
        blurred = np.maximum(gaussian_blur_mask(hard, sigma_blur_px), hard.astype(np.float64))
        target = render(texture, mesh, ctx.buffers)
        # Reference on the left, inpaint target on the right; the mask is
        # zero over the reference half so it is condition-only.
        canvas = Grid(
            np.concatenate([ref_image.values, target.values], axis=2), "rgb_image"
        )
        canvas_mask = Grid(
            np.concatenate([np.zeros_like(blurred), blurred], axis=1)[None].astype(
                np.float32
            ),
            "mask",
        )
        canvas_depth = Grid(
            np.concatenate(
                [reference_ctx.depth.values, ctx.depth.values], axis=2
            ),
            "mask",
        )
        try:
            result = predictor.inpaint(
                canvas, canvas_mask, canvas_depth, prompt, cfg_scale, seed
            )
        except PredictorError as exc:
            log.warning("inpainting aborted: %s; returning texture so far", exc)
            return texture, blank
        x_prime = Grid(result.values[:, :, ref_image.width :], "rgb_image")
        mask_img = Grid(blurred[None].astype(np.float32), "mask")
        new_tex, weight = inverse_render(x_prime, ctx.footprints, ctx.buffers)
        mask_tex, _ = inverse_render(mask_img, ctx.footprints)
        w = weight.values[0] > 0
        m_vals = np.where(w, mask_tex.values[0], 0.0)
        texture = apply_masked_update(texture, new_tex, m_vals)
        blank = blank & ~(w & (m_vals >= 0.5))
    return texture, blank


def img2img_epoch(
    texture: Grid,
    mesh: Mesh,
    contexts: Sequence[ViewContext],
    predictor: NoisePredictor,
    prompt: str,
    schedule,
    strength: float = 0.4,
    cfg_scale: float = 7.5,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> Grid:
    """Partial re-noise and denoise of each view's rendering, color-matched
    back to the pre-update rendering and blended in by view similarity."""
    if not 0.0 < strength < 1.0:
        raise ValueError("strength must lie in (0, 1)")
    if rng is None:
        rng = np.random.default_rng(seed)
    texture = texture.copy()
    step = max(1, round(strength * schedule.steps))
    alpha = schedule.alpha(step)
    for ctx in contexts:
        rendering = render(texture, mesh, ctx.buffers)
        latent = predictor.encode(rendering)
        noise = rng.standard_normal(latent.values.shape).astype(np.float32)
        noisy = Grid(
            np.sqrt(alpha) * latent.values + np.sqrt(1.0 - alpha) * noise,
            "latent_image",
        )
        factor = rendering.height // latent.height
        depth_lat = Grid(
            ctx.depth.values.reshape(
                1, latent.height, factor, latent.width, factor
            ).mean(axis=(2, 4)),
            "mask",
        )
        try:
            denoised = predictor.img2img(
                noisy, depth_lat, prompt, strength, cfg_scale, seed
            )
        except PredictorError as exc:
            log.warning("img2img aborted: %s; returning texture so far", exc)
            return texture
        decoded = predictor.decode([denoised])[0]
        fg = Grid(ctx.buffers.foreground_mask[None].astype(np.float32), "mask")
        matched = histogram_match(decoded, rendering, fg)
        sim_img = Grid(
            np.clip(ctx.buffers.normal_similarity, 0.0, 1.0)[None].astype(np.float32),
            "mask",
        )
        new_tex, weight = inverse_render(matched, ctx.footprints, ctx.buffers)
        sim_tex, _ = inverse_render(sim_img, ctx.footprints)
        w = weight.values[0] > 0
        m_vals = np.where(w, np.clip(sim_tex.values[0], 0.0, 1.0), 0.0)
        texture = apply_masked_update(texture, new_tex, m_vals)
    return texture


def histogram_match(source: Grid, reference: Grid, mask: Grid) -> Grid:
    """Per-channel monotone CDF map of the source's masked pixels onto the
    reference's; unmasked pixels pass through untouched."""
    sel = mask.values[0] > 0
    if not sel.any():
        return source.copy()
    out = source.values.copy()
    for ch in range(source.channels):
        src = source.values[ch][sel]
        ref = reference.values[ch][sel]
        order = np.argsort(src, kind="stable")
        ranks = np.empty_like(order)
        ranks[order] = np.arange(len(src))
        quantiles = (ranks + 0.5) / len(src)
        ref_sorted = np.sort(ref)
        ref_q = (np.arange(len(ref)) + 0.5) / len(ref)
        out[ch][sel] = np.interp(quantiles, ref_q, ref_sorted)
    return Grid(out, source.role)
