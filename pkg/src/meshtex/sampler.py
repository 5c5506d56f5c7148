"""Texture-space denoising: per-view latent textures, dynamic alignment,
and softmax view merging.

The denoising loop never keeps noisy latents in texture space. Each step
re-noises the rendered latent texture (foreground), composes it with a
tracked background latent, asks the predictor for noise, and inverse-renders
the resulting clean estimate back to UV space. Rendering and inverse
rendering interpolate, so only noise-free estimates survive the round trip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .geometry import Camera, Mesh, ViewBuffers, rasterize_view
from .renderer import (
    Grid,
    TexelFootprint,
    compute_footprints,
    downsample_mask,
    inverse_render,
    render,
)

LATENT_CHANNELS = 4
DEFAULT_TAU = 0.1


class ScheduleError(ValueError):
    pass


def default_alpha_bar(model_steps: int = 1000) -> Callable[[float], float]:
    """Cumulative signal curve of the standard linear-beta noising process."""
    betas = np.linspace(1e-4, 0.02, model_steps)
    log_ab = np.cumsum(np.log1p(-betas))
    times = np.arange(model_steps, dtype=np.float64)

    def alpha_bar(t: float) -> float:
        return float(np.exp(np.interp(t, times, log_ab)))

    return alpha_bar


@dataclass
class Schedule:
    """Sampling-time tables: descending timesteps, signal coefficients, and
    the derived stochastic noise scales.

    Index convention: step i runs T..1; alphas[i] is the signal coefficient
    at step i with alphas[0] = 1 (fully denoised boundary), and sigmas[i]
    applies to the i-th update. sigma(T+1) = 0 so the very first composed
    foreground is pure scaled noise.
    """

    timesteps: np.ndarray  # (T,) model times for i = T..1, descending
    alphas: np.ndarray  # (T+1,) indexed by i, alphas[0] == 1
    sigmas: np.ndarray  # (T+1,) indexed by i, sigmas[0] unused
    sigma_final: float = 0.0  # sigma at the T+1 boundary

    @property
    def steps(self) -> int:
        return len(self.timesteps)

    def t(self, i: int) -> float:
        return float(self.timesteps[self.steps - i])

    def alpha(self, i: int) -> float:
        return float(self.alphas[i])

    def sigma(self, i: int) -> float:
        if i == self.steps + 1:
            return self.sigma_final
        return float(self.sigmas[i])


def build_schedule(
    steps: int,
    alpha_bar: Callable[[float], float] | None = None,
    t_max: float = 999.0,
) -> Schedule:
    """Linearly spaced timesteps over (0, t_max] with the stochasticity of
    the original non-deterministic sampler:

        sigma_i = sqrt((1 - a_{i-1}) / (1 - a_i)) * sqrt(1 - a_i / a_{i-1})
    """
    if steps < 1:
        raise ScheduleError("need at least one step")
    if alpha_bar is None:
        alpha_bar = default_alpha_bar()
    timesteps = np.array([t_max * i / steps for i in range(steps, 0, -1)])
    alphas = np.ones(steps + 1)
    for i in range(1, steps + 1):
        alphas[i] = alpha_bar(timesteps[steps - i])
    if not (np.diff(alphas[::-1]) > 0).all() or alphas.min() <= 0 or alphas.max() > 1:
        raise ScheduleError("alpha curve must be monotone decreasing in time, in (0, 1]")
    sigmas = np.zeros(steps + 1)
    for i in range(1, steps + 1):
        a_i, a_prev = alphas[i], alphas[i - 1]
        sigmas[i] = math.sqrt((1 - a_prev) / (1 - a_i)) * math.sqrt(1 - a_i / a_prev) if a_prev < 1 else 0.0
    sched = Schedule(timesteps, alphas, sigmas)
    for i in range(1, steps + 1):
        if 1 - sched.alpha(i) - sched.sigma(i + 1) ** 2 < -1e-12:
            raise ScheduleError(f"negative radicand at step {i}")
    return sched


@dataclass
class AlignmentSchedule:
    """Per-step blend factor toward the consensus latent texture.

    Default is a raised-sine bump: weak coupling at the start and end of
    denoising, strong in the middle.
    """

    c: np.ndarray  # (T+1,) indexed by step i; c[0] unused

    @classmethod
    def bump(cls, steps: int, c_min: float = 0.1, c_max: float = 0.9) -> "AlignmentSchedule":
        i = np.arange(steps + 1, dtype=np.float64)
        vals = c_min + (c_max - c_min) * np.sin(math.pi * i / steps) ** 2
        return cls(np.clip(vals, 0.0, 1.0))

    @classmethod
    def constant(cls, steps: int, value: float) -> "AlignmentSchedule":
        return cls(np.full(steps + 1, float(value)))

    def at(self, i: int) -> float:
        return float(self.c[i])


@dataclass
class ViewState:
    """Everything the sampler tracks for a single viewpoint.

    `camera` is the full-resolution camera used for decoding; `lat_camera`
    and `buffers` operate at latent resolution, where the denoising loop
    renders and gathers.
    """

    camera: Camera
    lat_camera: Camera
    buffers: ViewBuffers  # latent-resolution view buffers
    footprints: TexelFootprint  # at latent texture resolution
    depth_map: Grid  # normalized inverse depth at latent resolution
    fg_mask: Grid  # downsampled foreground mask
    similarity: Grid  # downsampled normal-similarity mask
    z_bg: Grid  # background latent image
    eps_cache: Grid  # cached predicted noise for the next composition
    z_tex: Grid  # per-view latent texture (clean estimate)
    weight: Grid  # {0,1} texel coverage for this view
    sim_tex: np.ndarray  # per-texel similarity of the owning face
    z0_final: Grid | None = None  # clean latent image kept for decoding


def normalized_inverse_depth(buffers: ViewBuffers) -> np.ndarray:
    """Per-view inverse depth scaled to [0,1] on foreground, 0 elsewhere.

    A flat-depth view (range below 1e-12) normalizes to a constant 0.5.
    """
    fg = buffers.foreground_mask > 0
    out = np.zeros_like(buffers.depth)
    if not fg.any():
        return out
    inv = 1.0 / buffers.depth[fg]
    lo, hi = inv.min(), inv.max()
    if hi - lo < 1e-12:
        out[fg] = 0.5
    else:
        out[fg] = (inv - lo) / (hi - lo)
    return out


def init_states(
    mesh: Mesh,
    cameras: Sequence[Camera],
    schedule: Schedule,
    rng: np.random.Generator,
    latent_factor: int = 8,
    latent_texture_size: int = 128,
) -> list[ViewState]:
    """Zero latent textures; Gaussian backgrounds and initial cached noise;
    masks and footprints derived from the geometry.

    Draw order per view (kept stable for reproducibility): background latent,
    then initial cached noise.
    """
    states = []
    for cam in cameras:
        full = rasterize_view(mesh, cam)
        s_lat = cam.image_size // latent_factor
        fg = downsample_mask(Grid(full.foreground_mask[None], "mask"), latent_factor)
        sim = downsample_mask(
            Grid(np.clip(full.normal_similarity, 0, 1)[None], "mask"), latent_factor
        )
        depth = downsample_mask(
            Grid(normalized_inverse_depth(full)[None], "mask"), latent_factor
        )
        lat_cam = replace(cam, image_size=s_lat)
        buffers = rasterize_view(mesh, lat_cam)
        fp = compute_footprints(mesh, lat_cam, buffers, latent_texture_size)
        z_bg = Grid(
            rng.standard_normal((LATENT_CHANNELS, s_lat, s_lat)).astype(np.float32),
            "latent_image",
        )
        eps0 = Grid(
            rng.standard_normal((LATENT_CHANNELS, s_lat, s_lat)).astype(np.float32),
            "latent_image",
        )
        states.append(
            ViewState(
                camera=cam,
                lat_camera=lat_cam,
                buffers=buffers,
                footprints=fp,
                depth_map=depth,
                fg_mask=fg,
                similarity=sim,
                z_bg=z_bg,
                eps_cache=eps0,
                z_tex=Grid.zeros(
                    LATENT_CHANNELS, latent_texture_size, latent_texture_size, "latent_texture"
                ),
                weight=Grid(fp.visible.astype(np.float32)[None], "mask"),
                sim_tex=np.clip(fp.similarity, 0.0, 1.0),
            )
        )
    return states


def compose_latent_image(
    state: ViewState, schedule: Schedule, i: int, rng: np.random.Generator, mesh: Mesh
) -> Grid:
    """Re-noise the rendered latent texture on the foreground and mix in the
    tracked background, plus the step's stochastic noise."""
    a_i = schedule.alpha(i)
    s_next = schedule.sigma(i + 1)
    radicand = 1.0 - a_i - s_next**2
    if radicand < -1e-9:
        raise ScheduleError(f"negative radicand at step {i}")
    radicand = max(radicand, 0.0)
    rendered = render(state.z_tex, mesh, state.buffers)
    m = state.fg_mask.values
    eps_fresh = rng.standard_normal(rendered.values.shape).astype(np.float32)
    z = (
        m * (math.sqrt(a_i) * rendered.values + math.sqrt(radicand) * state.eps_cache.values)
        + (1.0 - m) * state.z_bg.values
        + s_next * eps_fresh
    )
    return Grid(z, "latent_image")


def predict_z0(z_img: Grid, eps_hat: Grid, alpha_i: float) -> Grid:
    """Clean-sample estimate implied by a noise prediction."""
    if not 0.0 < alpha_i <= 1.0:
        raise ValueError("alpha_i outside (0, 1]")
    z0 = (z_img.values - math.sqrt(1.0 - alpha_i) * eps_hat.values) / math.sqrt(alpha_i)
    return Grid(z0, "latent_image")


def update_after_prediction(
    state: ViewState, z0_hat: Grid, eps_hat: Grid, schedule: Schedule, i: int
) -> None:
    """Inverse-render the clean estimate onto the view's latent texture
    (covered texels only), advance the background latent, cache the noise."""
    tex, weight = inverse_render(z0_hat, state.footprints, state.buffers)
    w = weight.values[0] > 0
    new_vals = state.z_tex.values.copy()
    new_vals[:, w] = tex.values[:, w]
    state.z_tex = Grid(new_vals, "latent_texture")
    a_prev = schedule.alpha(i - 1)
    s_i = schedule.sigma(i)
    radicand = max(1.0 - a_prev - s_i**2, 0.0)
    state.z_bg = Grid(
        math.sqrt(a_prev) * z0_hat.values + math.sqrt(radicand) * eps_hat.values,
        "latent_image",
    )
    state.eps_cache = eps_hat.copy()
    state.z0_final = z0_hat.copy()


def softmax_view_weights(
    sims: np.ndarray, covered: np.ndarray, tau: float = DEFAULT_TAU
) -> np.ndarray:
    """Per-texel softmax over covering views of clamped similarities.

    sims, covered: (N, T, T). Returns (N, T, T) weights summing to 1 on
    texels covered by at least one view, 0 elsewhere.
    """
    sims = np.clip(sims, 0.0, 1.0)
    logits = np.where(covered, sims / tau, -np.inf)
    any_cover = covered.any(axis=0)
    logits = logits - np.where(any_cover, logits.max(axis=0), 0.0)
    with np.errstate(over="ignore"):
        e = np.where(covered, np.exp(logits), 0.0)
    denom = e.sum(axis=0)
    return np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)


def dynamic_align(states: Sequence[ViewState], c_i: float, tau: float = DEFAULT_TAU) -> None:
    """Blend each view's latent texture toward the softmax consensus on the
    texels that view covers; untouched where c_i = 0 or nothing covers."""
    if not 0.0 <= c_i <= 1.0:
        raise ValueError("c_i outside [0, 1]")
    if c_i == 0.0:
        return
    covered = np.stack([s.weight.values[0] > 0 for s in states])
    sims = np.stack([s.sim_tex for s in states])
    w = softmax_view_weights(sims, covered, tau)  # (N, T, T)
    textures = np.stack([s.z_tex.values for s in states])  # (N, C, T, T)
    unitex = np.einsum("nhw,nchw->chw", w.astype(np.float32), textures)
    for n, state in enumerate(states):
        mask = covered[n]
        vals = state.z_tex.values.copy()
        vals[:, mask] = c_i * unitex[:, mask] + (1.0 - c_i) * vals[:, mask]
        state.z_tex = Grid(vals, "latent_texture")


def denoise(
    states: Sequence[ViewState],
    schedule: Schedule,
    alignment: AlignmentSchedule,
    predictor,
    prompt: str,
    cfg_scale: float,
    rng: np.random.Generator,
    mesh: Mesh,
    seed: int = 0,
) -> None:
    """Run the full denoising stage: compose every view, one batched
    predictor call per step, clean-estimate update, then dynamic alignment."""
    from .predictor import NoiseRequest

    for i in range(schedule.steps, 0, -1):
        composed = [compose_latent_image(s, schedule, i, rng, mesh) for s in states]
        req = NoiseRequest(
            latent_images=composed,
            timestep=schedule.t(i),
            prompt=prompt,
            depth_maps=[s.depth_map for s in states],
            cfg_scale=cfg_scale,
            style_consistency=True,
            seed=seed,
        )
        eps_hats = predictor.predict_noise(req)
        a_i = schedule.alpha(i)
        for state, z_img, eps_hat in zip(states, composed, eps_hats):
            z0 = predict_z0(z_img, eps_hat, a_i)
            update_after_prediction(state, z0, eps_hat, schedule, i)
        dynamic_align(states, alignment.at(i))


def decode_and_merge(
    states: Sequence[ViewState],
    decoder,
    mesh: Mesh,
    texture_size: int,
    tau: float = DEFAULT_TAU,
) -> tuple[Grid, np.ndarray]:
    """Decode every view's final clean latent, inverse-render to RGB texture
    space, and softmax-merge by view similarity.

    Returns (rgb texture, blank flags) where blank marks texels covered by
    no view.
    """
    if any(s.z0_final is None for s in states):
        raise ValueError("denoise must run before decoding")
    images = decoder.decode([s.z0_final for s in states], style_consistency=True)
    textures = []
    weights = []
    sims = []
    for state, img in zip(states, images):
        full = rasterize_view(mesh, state.camera)
        fp = compute_footprints(mesh, state.camera, full, texture_size)
        tex, w = inverse_render(img, fp, full)
        textures.append(tex.values)
        weights.append(w.values[0] > 0)
        sims.append(np.clip(fp.similarity, 0.0, 1.0))
    covered = np.stack(weights)
    w = softmax_view_weights(np.stack(sims), covered, tau)
    merged = np.einsum("nhw,nchw->chw", w.astype(np.float32), np.stack(textures))
    blank = ~covered.any(axis=0)
    merged[:, blank] = 0.0
    return Grid(np.clip(merged, 0.0, 1.0), "rgb_texture"), blank
