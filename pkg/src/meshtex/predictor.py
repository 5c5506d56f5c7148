"""The denoiser/autoencoder contract and its two implementations.

The mock is a closed-form oracle: its noise prediction always points the
clean-sample estimate at a deterministic target computed from the depth map,
so the whole texture pipeline has an analytically known answer and any
deviation isolates a pipeline bug. The remote client speaks the binary wire
protocol to the backend service.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import wire
from .renderer import Grid
from .sampler import default_alpha_bar

DOWNSAMPLE_FACTOR = 8
LATENT_CHANNELS = 4


class PredictorError(RuntimeError):
    """Retriable failure while talking to a predictor backend."""


@dataclass
class NoiseRequest:
    latent_images: Sequence[Grid]
    timestep: float
    prompt: str
    depth_maps: Sequence[Grid]  # normalized inverse depth in [0,1]
    cfg_scale: float
    style_consistency: bool
    seed: int

    def __post_init__(self):
        if len(self.latent_images) < 1:
            raise ValueError("need at least one view")
        shapes = {g.values.shape for g in self.latent_images}
        if len(shapes) != 1:
            raise ValueError("all latent grids must share a shape")
        if self.cfg_scale < 1.0:
            raise ValueError("cfg_scale must be >= 1")


class NoisePredictor(abc.ABC):
    """Conditional denoiser with autoencoder companions."""

    @abc.abstractmethod
    def predict_noise(self, req: NoiseRequest) -> list[Grid]: ...

    @abc.abstractmethod
    def encode(self, image: Grid) -> Grid: ...

    @abc.abstractmethod
    def decode(self, latents: Sequence[Grid], style_consistency: bool = False) -> list[Grid]: ...

    @abc.abstractmethod
    def inpaint(
        self, canvas: Grid, mask: Grid, depth: Grid, prompt: str, cfg_scale: float, seed: int
    ) -> Grid: ...

    @abc.abstractmethod
    def img2img(
        self,
        latent: Grid,
        depth: Grid,
        prompt: str,
        strength: float,
        cfg_scale: float,
        seed: int,
    ) -> Grid: ...


def area_downsample(values: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = values.shape
    if h % factor or w % factor:
        raise ValueError("dimensions not divisible by downsample factor")
    return values.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def bilinear_upsample(values: np.ndarray, factor: int) -> np.ndarray:
    """Area-pool inverse: bilinear interpolation between cell centers."""
    c, h, w = values.shape
    out_h, out_w = h * factor, w * factor
    # Output pixel centers in input cell-center coordinates.
    ys = (np.arange(out_h) + 0.5) / factor - 0.5
    xs = (np.arange(out_w) + 0.5) / factor - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    tx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    v00 = values[:, y0[:, None], x0[None, :]]
    v01 = values[:, y0[:, None], x1[None, :]]
    v10 = values[:, y1[:, None], x0[None, :]]
    v11 = values[:, y1[:, None], x1[None, :]]
    return (
        v00 * (1 - ty) * (1 - tx)
        + v01 * (1 - ty) * tx
        + v10 * ty * (1 - tx)
        + v11 * ty * tx
    )


def harmonic_fill(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill masked pixels with the solution of the Laplace equation whose
    boundary values are the surrounding unmasked pixels.

    image: (C, H, W); mask: (H, W) bool, True = fill. A fully masked image
    falls back to the per-channel mean of nothing, i.e. 0.5.
    """
    if not mask.any():
        return image.copy()
    c, h, w = image.shape
    if mask.all():
        return np.full_like(image, 0.5)
    idx = -np.ones((h, w), dtype=np.int64)
    rows, cols = np.nonzero(mask)
    idx[rows, cols] = np.arange(len(rows))
    m = len(rows)
    data, ri, ci = [], [], []
    rhs = np.zeros((m, c))
    diag = np.zeros(m)
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ny, nx = rows + dy, cols + dx
        ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        diag += ok
        nidx = np.where(ok, idx[np.clip(ny, 0, h - 1), np.clip(nx, 0, w - 1)], -2)
        interior = ok & (nidx >= 0)
        ri.extend(np.nonzero(interior)[0])
        ci.extend(nidx[interior])
        data.extend([-1.0] * int(interior.sum()))
        boundary = ok & (nidx == -1)
        if boundary.any():
            b = np.nonzero(boundary)[0]
            rhs[b] += image[:, ny[b], nx[b]].T
    lap = scipy.sparse.coo_matrix(
        (
            np.concatenate([np.asarray(data, dtype=np.float64), diag]),
            (
                np.concatenate([np.asarray(ri, dtype=np.int64), np.arange(m)]),
                np.concatenate([np.asarray(ci, dtype=np.int64), np.arange(m)]),
            ),
        ),
        shape=(m, m),
    ).tocsc()
    solve = scipy.sparse.linalg.factorized(lap)
    out = image.copy()
    for k in range(c):
        out[k, rows, cols] = solve(rhs[:, k])
    return out


class MockPredictor(NoisePredictor):
    """Deterministic oracle backend for offline verification.

    The noise prediction is constructed so the implied clean sample equals a
    per-view target derived from the depth map (by default the depth values
    broadcast over all latent channels). Style consistency averages targets
    across views wherever all depth maps agree.
    """

    def __init__(
        self,
        alpha_bar: Callable[[float], float] | None = None,
        target_fn: Callable[[np.ndarray], np.ndarray] | None = None,
        depth_agree_tol: float = 1e-3,
    ):
        self.alpha_bar = alpha_bar or default_alpha_bar()
        self.target_fn = target_fn or (lambda d: d)
        self.depth_agree_tol = depth_agree_tol

    def targets(self, depth_maps: Sequence[Grid], style_consistency: bool) -> list[np.ndarray]:
        per_view = []
        for d in depth_maps:
            g1 = self.target_fn(d.values[0].astype(np.float64))
            per_view.append(np.broadcast_to(g1, (LATENT_CHANNELS,) + g1.shape).copy())
        if style_consistency and len(per_view) > 1:
            depths = np.stack([d.values[0] for d in depth_maps])
            agree = (depths.max(axis=0) - depths.min(axis=0)) <= self.depth_agree_tol
            if agree.any():
                mean = np.mean(per_view, axis=0)
                for g in per_view:
                    g[:, agree] = mean[:, agree]
        return per_view

    def predict_noise(self, req: NoiseRequest) -> list[Grid]:
        if not 0.0 <= req.timestep <= 999.0:
            raise PredictorError(f"timestep {req.timestep} outside the model schedule")
        a = self.alpha_bar(req.timestep)
        if not 0.0 < a < 1.0:
            raise PredictorError(f"timestep {req.timestep} outside the model schedule")
        gs = self.targets(req.depth_maps, req.style_consistency)
        out = []
        for z, g in zip(req.latent_images, gs):
            eps = (z.values - np.sqrt(a) * g) / np.sqrt(1.0 - a)
            out.append(Grid(eps.astype(np.float32), "latent_image"))
        return out

    def encode(self, image: Grid) -> Grid:
        if image.role != "rgb_image":
            raise ValueError("encode expects an rgb_image grid")
        if image.height % DOWNSAMPLE_FACTOR or image.width % DOWNSAMPLE_FACTOR:
            raise ValueError("image dimensions not divisible by the downsample factor")
        rgb = area_downsample(image.values, DOWNSAMPLE_FACTOR)
        latent = np.zeros((LATENT_CHANNELS,) + rgb.shape[1:], dtype=np.float32)
        latent[:3] = rgb
        return Grid(latent, "latent_image")

    def decode(self, latents: Sequence[Grid], style_consistency: bool = False) -> list[Grid]:
        out = []
        for z in latents:
            rgb = bilinear_upsample(z.values[:3], DOWNSAMPLE_FACTOR)
            out.append(Grid(np.clip(rgb, 0.0, 1.0).astype(np.float32), "rgb_image"))
        return out

    def inpaint(self, canvas, mask, depth, prompt, cfg_scale, seed) -> Grid:
        filled = harmonic_fill(
            canvas.values.astype(np.float64), mask.values[0] > 0.5
        )
        return Grid(np.clip(filled, 0.0, 1.0).astype(np.float32), "rgb_image")

    def img2img(self, latent, depth, prompt, strength, cfg_scale, seed) -> Grid:
        g1 = self.target_fn(depth.values[0].astype(np.float64))
        g = np.broadcast_to(g1, latent.values.shape)
        blended = (1.0 - strength) * latent.values + strength * g
        return Grid(blended.astype(np.float32), "latent_image")


class IdentityMockPredictor(MockPredictor):
    """Mock whose img2img denoising returns its input unchanged."""

    def img2img(self, latent, depth, prompt, strength, cfg_scale, seed) -> Grid:
        return latent.copy()


class RemotePredictor(NoisePredictor):
    """Wire-protocol client for the backend service."""

    def __init__(self, endpoint: str, timeout: float = 300.0):
        if not endpoint:
            raise ValueError("remote predictor needs an endpoint")
        self.endpoint = endpoint
        self.timeout = timeout

    def _call(self, request: wire.Request) -> wire.Response:
        try:
            resp = wire.roundtrip(self.endpoint, request, timeout=self.timeout)
        except (OSError, wire.ProtocolError) as exc:
            raise PredictorError(f"backend call failed: {exc}") from exc
        if resp.status != wire.STATUS_OK:
            raise PredictorError(f"backend returned status {resp.status}")
        return resp

    def predict_noise(self, req: NoiseRequest) -> list[Grid]:
        grids = np.stack([g.values for g in req.latent_images])
        depths = np.stack([d.values[0] for d in req.depth_maps])
        n, c, h, w = grids.shape
        payload = np.concatenate([grids.ravel(), depths.ravel()])
        flags = wire.FLAG_STYLE_CONSISTENCY if req.style_consistency else 0
        resp = self._call(
            wire.Request(
                wire.MSG_PREDICT_NOISE, n, c, h, w, req.timestep, req.cfg_scale,
                flags, req.seed, req.prompt, payload,
            )
        )
        return [Grid(g, "latent_image") for g in resp.grids()]

    def encode(self, image: Grid) -> Grid:
        resp = self._call(
            wire.Request(
                wire.MSG_ENCODE, 1, image.channels, image.height, image.width,
                0.0, 1.0, 0, 0, "", image.values.ravel(),
            )
        )
        return Grid(resp.grids()[0], "latent_image")

    def decode(self, latents: Sequence[Grid], style_consistency: bool = False) -> list[Grid]:
        grids = np.stack([g.values for g in latents])
        n, c, h, w = grids.shape
        flags = wire.FLAG_STYLE_CONSISTENCY if style_consistency else 0
        resp = self._call(
            wire.Request(wire.MSG_DECODE, n, c, h, w, 0.0, 1.0, flags, 0, "", grids.ravel())
        )
        return [Grid(g, "rgb_image") for g in resp.grids()]

    def inpaint(self, canvas, mask, depth, prompt, cfg_scale, seed) -> Grid:
        payload = np.concatenate(
            [canvas.values.ravel(), mask.values.ravel(), depth.values.ravel()]
        )
        flags = wire.FLAG_MASK | wire.FLAG_REFERENCE
        resp = self._call(
            wire.Request(
                wire.MSG_INPAINT, 1, canvas.channels, canvas.height, canvas.width,
                0.0, cfg_scale, flags, seed, prompt, payload,
            )
        )
        return Grid(resp.grids()[0], "rgb_image")

    def img2img(self, latent, depth, prompt, strength, cfg_scale, seed) -> Grid:
        payload = np.concatenate([latent.values.ravel(), depth.values.ravel()])
        resp = self._call(
            wire.Request(
                wire.MSG_IMG2IMG, 1, latent.channels, latent.height, latent.width,
                float(strength), cfg_scale, 0, seed, prompt, payload,
            )
        )
        return Grid(resp.grids()[0], "latent_image")


def make_predictor(kind: str, endpoint: str = "", **kwargs) -> NoisePredictor:
    if kind == "mock":
        return MockPredictor(**kwargs)
    if kind == "remote":
        return RemotePredictor(endpoint, **kwargs)
    raise ValueError(f"unknown predictor kind {kind!r}")
