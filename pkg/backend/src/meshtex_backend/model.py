"""Stand-in depth-conditioned denoiser and autoencoder.

Pretrained diffusion weights are not shipped with this service; the stand-in
is a small deterministic network with the same call surface, the same latent
geometry (4 channels, 8x spatial factor), and real hooked layers, so the
protocol, the classifier-free guidance plumbing, and the style-consistency
hooks are all exercised for real. Swapping in a pretrained model means
replacing this module behind the same `Pipeline` interface.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .layers import CrossViewAttention, GroupNorm3d

LATENT_CHANNELS = 4
DOWNSAMPLE_FACTOR = 8
MODEL_STEPS = 1000
EMBED_DIM = 32


def alpha_bar_table(steps: int = MODEL_STEPS) -> torch.Tensor:
    betas = torch.linspace(1e-4, 0.02, steps, dtype=torch.float64)
    return torch.cumprod(1.0 - betas, dim=0)


def prompt_embedding(prompt: str) -> torch.Tensor:
    """Deterministic pseudo text encoder: a fixed Gaussian vector per prompt."""
    if not prompt:
        return torch.zeros(EMBED_DIM)
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:4], "little")
    vec = np.random.default_rng(seed).standard_normal(EMBED_DIM)
    return torch.from_numpy(vec).float()


def timestep_embedding(t: float) -> torch.Tensor:
    freqs = torch.exp(torch.linspace(0.0, -8.0, EMBED_DIM // 2))
    angles = t * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class StandInDenoiser(nn.Module):
    """Conv stack with one cross-view attention block and two group norms,
    conditioned on depth, timestep, and the prompt embedding."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.conv_in = nn.Conv2d(LATENT_CHANNELS + 1, width, 3, padding=1)
        self.norm1 = GroupNorm3d(4, width)
        self.conv_mid = nn.Conv2d(width, width, 3, padding=1)
        self.attn = CrossViewAttention(width)
        self.norm2 = GroupNorm3d(4, width)
        self.conv_out = nn.Conv2d(width, LATENT_CHANNELS, 3, padding=1)
        self.cond_proj = nn.Linear(2 * EMBED_DIM, width)

    def forward(
        self,
        latents: torch.Tensor,  # (N, 4, H, W)
        depth: torch.Tensor,  # (N, 1, H, W)
        t: float,
        prompt_vec: torch.Tensor,
        style_consistency: bool,
    ) -> torch.Tensor:
        n, _, h, w = latents.shape
        cond = self.cond_proj(torch.cat([timestep_embedding(t), prompt_vec]))
        x = self.conv_in(torch.cat([latents, depth], dim=1))
        x = x + cond.view(1, -1, 1, 1)
        x = F.silu(self.norm1(x, style_consistency))
        x = self.conv_mid(x)
        tokens = x.flatten(2).transpose(1, 2)  # (N, H*W, width)
        x = x + self.attn(tokens, style_consistency).transpose(1, 2).reshape(x.shape)
        x = F.silu(self.norm2(x, style_consistency))
        return self.conv_out(x)


class StandInDecoder(nn.Module):
    """Latent-to-RGB decoder with the same hooks as the denoiser."""

    def __init__(self, width: int = 32):
        super().__init__()
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, width, 3, padding=1)
        self.norm = GroupNorm3d(4, width)
        self.attn = CrossViewAttention(width)
        self.up = nn.ConvTranspose2d(width, 3, DOWNSAMPLE_FACTOR, stride=DOWNSAMPLE_FACTOR)

    def forward(self, latents: torch.Tensor, style_consistency: bool) -> torch.Tensor:
        x = self.conv_in(latents)
        x = F.silu(self.norm(x, style_consistency))
        tokens = x.flatten(2).transpose(1, 2)
        x = x + self.attn(tokens, style_consistency).transpose(1, 2).reshape(x.shape)
        return torch.clamp(self.up(x), 0.0, 1.0)


class StandInPipeline:
    """The five wire operations over the stand-in networks.

    Everything runs on CPU in eval mode with fixed-seed initialization, so a
    given request always yields the same bytes.
    """

    def __init__(self, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.denoiser = StandInDenoiser().eval()
            self.decoder = StandInDecoder().eval()
            self.encoder = nn.Conv2d(
                3, LATENT_CHANNELS, DOWNSAMPLE_FACTOR, stride=DOWNSAMPLE_FACTOR
            ).eval()
        del gen
        for p in self.parameters():
            p.requires_grad_(False)
        self.alpha_bar = alpha_bar_table()

    def parameters(self):
        for module in (self.denoiser, self.decoder, self.encoder):
            yield from module.parameters()

    def hooked_layers(self) -> dict[str, nn.Module]:
        return {
            "denoiser.norm1": self.denoiser.norm1,
            "denoiser.norm2": self.denoiser.norm2,
            "denoiser.attn": self.denoiser.attn,
            "decoder.norm": self.decoder.norm,
            "decoder.attn": self.decoder.attn,
        }

    def _alpha(self, t: float) -> float:
        idx = min(max(int(round(t)), 0), MODEL_STEPS - 1)
        return float(self.alpha_bar[idx])

    @torch.no_grad()
    def predict_noise(
        self,
        latents: np.ndarray,  # (N, 4, H, W)
        depths: np.ndarray,  # (N, H, W)
        t: float,
        prompt: str,
        cfg_scale: float,
        style_consistency: bool,
        guess_mode: bool = False,
    ) -> np.ndarray:
        if not 0.0 <= t <= MODEL_STEPS - 1:
            raise ValueError(f"timestep {t} outside the model schedule")
        z = torch.from_numpy(latents).float()
        d = torch.from_numpy(depths).float().unsqueeze(1)
        cond = self.denoiser(z, d, t, prompt_embedding(prompt), style_consistency)
        if guess_mode:
            eps = cond
        else:
            uncond = self.denoiser(z, d, t, prompt_embedding(""), style_consistency)
            eps = uncond + cfg_scale * (cond - uncond)
        return eps.numpy().astype(np.float32)

    @torch.no_grad()
    def encode(self, images: np.ndarray) -> np.ndarray:  # (N, 3, H, W)
        if images.shape[2] % DOWNSAMPLE_FACTOR or images.shape[3] % DOWNSAMPLE_FACTOR:
            raise ValueError("image size not divisible by the latent factor")
        return self.encoder(torch.from_numpy(images).float()).numpy().astype(np.float32)

    @torch.no_grad()
    def decode(self, latents: np.ndarray, style_consistency: bool) -> np.ndarray:
        out = self.decoder(torch.from_numpy(latents).float(), style_consistency)
        return out.numpy().astype(np.float32)

    @torch.no_grad()
    def inpaint(
        self,
        canvas: np.ndarray,  # (3, H, W), reference left / target right
        mask: np.ndarray,  # (H, W) in [0, 1]
        depth: np.ndarray,  # (H, W)
        prompt: str,
        cfg_scale: float,
        seed: int,
    ) -> np.ndarray:
        """Diffusion-style fill of the masked region, blended by the mask.

        The fill solves a smoothing iteration whose fixed values are the
        unmasked pixels, i.e. masked content is grown inward from its
        surroundings. Deterministic in all inputs.
        """
        x = torch.from_numpy(canvas).double()
        m = torch.clamp(torch.from_numpy(mask).double(), 0.0, 1.0)
        hard = (m >= 0.5).double()
        if hard.sum() == 0:
            return canvas.astype(np.float32)
        fill = x.clone()
        known = 1.0 - hard
        mean = (x * known).sum(dim=(1, 2), keepdim=True) / known.sum().clamp(min=1.0)
        fill = fill * known + mean * hard
        kernel = torch.tensor([[0.0, 0.25, 0.0], [0.25, 0.0, 0.25], [0.0, 0.25, 0.0]])
        kernel = kernel.double().view(1, 1, 3, 3)
        for _ in range(200):
            smoothed = torch.nn.functional.conv2d(
                fill.unsqueeze(1), kernel, padding=1
            ).squeeze(1)
            weight = torch.nn.functional.conv2d(
                torch.ones_like(fill[:1]).unsqueeze(1), kernel, padding=1
            ).squeeze(1)
            fill = fill * known + (smoothed / weight) * hard
        out = x * (1.0 - m) + fill * m
        return torch.clamp(out, 0.0, 1.0).float().numpy()

    @torch.no_grad()
    def img2img(
        self,
        latent: np.ndarray,  # (4, h, w)
        depth: np.ndarray,  # (h, w)
        prompt: str,
        strength: float,
        cfg_scale: float,
        style_consistency: bool,
    ) -> np.ndarray:
        """One-shot clean estimate at the strength-equivalent noise level."""
        if not 0.0 < strength < 1.0:
            raise ValueError("strength must lie in (0, 1)")
        t = strength * (MODEL_STEPS - 1)
        eps = self.predict_noise(
            latent[None], depth[None], t, prompt, cfg_scale, style_consistency
        )[0]
        a = self._alpha(t)
        z0 = (latent - np.sqrt(1.0 - a) * eps) / np.sqrt(a)
        blended = (1.0 - strength) * latent + strength * z0
        return blended.astype(np.float32)
