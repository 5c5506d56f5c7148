"""Job orchestration: config, viewpoint presets, the sample -> inpaint ->
img2img pipeline, and artifact export."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import refine, sampler
from .geometry import Camera, MeshError, load_mesh, normalize_mesh
from .predictor import IdentityMockPredictor, MockPredictor, RemotePredictor
from .renderer import Grid, dilate_values, save_png, write_gtex
from .sampler import AlignmentSchedule, build_schedule, init_states

log = logging.getLogger(__name__)

# (elevation, azimuth) presets; the denser sets drive the refinement epochs.
SAMPLING_VIEWS = [(0, 0), (0, 90), (0, 180), (0, 270)]
INPAINTING_VIEWS = [
    (90, 0), (0, 45), (0, 315), (0, 135), (0, 225), (60, 0), (60, 45),
    (60, 315), (60, 90), (60, 270), (60, 135), (60, 225), (60, 180),
]
IMG2IMG_VIEWS = [
    (0, 180), (0, 135), (0, 225), (0, 90), (0, 270), (0, 45), (0, 315), (0, 0),
]
CANONICAL_VIEWS = {
    "front": (0, 0),
    "back": (0, 180),
    "left": (0, 90),
    "right": (0, 270),
    "top": (90, 0),
}

ENDPOINT_ENV = "MESHTEX_BACKEND"


@dataclass
class JobConfig:
    mesh_path: str = ""
    prompt: str = ""
    seed: int = 0
    steps: int = 20
    cfg_scale: float = 7.5
    image_size: int = 512
    latent_factor: int = 8
    texture_size: int = 1024
    latent_texture_size: int = 128
    tau: float = 0.1
    c_min: float = 0.1
    c_max: float = 0.9
    sigma_blur: float = 4.0  # in latent texels
    img2img_strength: float = 0.4
    camera_distance: float = 2.0
    fov_y: float = 45.0
    predictor: str = "mock"  # mock | remote
    endpoint: str = ""
    output_dir: str = "out"
    sampling_views: list = field(default_factory=lambda: list(SAMPLING_VIEWS))
    inpainting_views: list = field(default_factory=lambda: list(INPAINTING_VIEWS))
    img2img_views: list = field(default_factory=lambda: list(IMG2IMG_VIEWS))
    debug_dumps: bool = False

    def validate(self):
        if self.image_size <= 0 or self.texture_size <= 0 or self.latent_texture_size <= 0:
            raise ValueError("sizes must be positive")
        if self.image_size % self.latent_factor:
            raise ValueError("image_size must be divisible by latent_factor")
        if not (self.sampling_views and self.inpainting_views and self.img2img_views):
            raise ValueError("camera sets must be nonempty")

    def cameras(self, views) -> list[Camera]:
        return [
            Camera(el, az, self.camera_distance, self.fov_y, self.image_size)
            for el, az in views
        ]

    def serialize(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name.endswith("_views"):
                val = ";".join(f"{el},{az}" for el, az in val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "JobConfig":
        cfg = cls()
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config key {key!r}")
            current = getattr(cfg, key)
            if key.endswith("_views"):
                views = []
                for pair in value.split(";"):
                    if pair:
                        el, az = pair.split(",")
                        views.append((float(el), float(az)))
                setattr(cfg, key, views)
            elif isinstance(current, bool):
                setattr(cfg, key, value.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(cfg, key, int(value))
            elif isinstance(current, float):
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
        return cfg


def make_job_predictor(config: JobConfig):
    if config.predictor == "mock":
        return MockPredictor()
    if config.predictor == "identity-mock":
        return IdentityMockPredictor()
    if config.predictor == "remote":
        endpoint = config.endpoint or os.environ.get(ENDPOINT_ENV, "")
        return RemotePredictor(endpoint)
    raise ValueError(f"unknown predictor {config.predictor!r}")


def run_job(config: JobConfig) -> dict:
    """Execute the three pipeline stages and write all artifacts.

    Returns the manifest dict. Raises on stage failure after recording the
    failed stage in the manifest.
    """
    config.validate()
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": {
            f.name: getattr(config, f.name) for f in dataclasses.fields(config)
        },
        "seed": config.seed,
        "timings": {},
        "failed_stage": None,
    }
    job_start = time.perf_counter()
    stage = "load"
    try:
        t0 = time.perf_counter()
        mesh = normalize_mesh(load_mesh(config.mesh_path))
        predictor = make_job_predictor(config)
        manifest["timings"]["load"] = time.perf_counter() - t0

        stage = "sampling"
        t0 = time.perf_counter()
        rng = np.random.default_rng(config.seed)
        schedule = build_schedule(config.steps)
        alignment = AlignmentSchedule.bump(config.steps, config.c_min, config.c_max)
        states = init_states(
            mesh,
            config.cameras(config.sampling_views),
            schedule,
            rng,
            config.latent_factor,
            config.latent_texture_size,
        )
        sampler.denoise(
            states, schedule, alignment, predictor, config.prompt,
            config.cfg_scale, rng, mesh, seed=config.seed,
        )
        if config.debug_dumps:
            debug_dir = out_dir / "debug"
            debug_dir.mkdir(exist_ok=True)
            for n, state in enumerate(states):
                write_gtex(debug_dir / f"latent_texture_{n}.gtex", state.z_tex)
        texture, blank = sampler.decode_and_merge(
            states, predictor, mesh, config.texture_size, config.tau
        )
        manifest["blank_before_inpaint"] = int(blank.sum())
        manifest["timings"]["sampling"] = time.perf_counter() - t0

        stage = "inpainting"
        t0 = time.perf_counter()
        contexts = refine.build_view_contexts(
            mesh, config.cameras(config.inpainting_views), config.texture_size
        )
        ref_ctx = refine.build_view_contexts(
            mesh, config.cameras(config.sampling_views[:1]), config.texture_size
        )[0]
        texture, blank = refine.inpaint_epoch(
            texture, blank, mesh, contexts, ref_ctx, predictor, config.prompt,
            config.cfg_scale, config.sigma_blur * config.latent_factor, config.seed,
        )
        manifest["blank_after_inpaint"] = int(blank.sum())
        manifest["timings"]["inpainting"] = time.perf_counter() - t0

        stage = "img2img"
        t0 = time.perf_counter()
        i2i_contexts = refine.build_view_contexts(
            mesh, config.cameras(config.img2img_views), config.texture_size
        )
        texture = refine.img2img_epoch(
            texture, mesh, i2i_contexts, predictor, config.prompt, schedule,
            config.img2img_strength, config.cfg_scale,
            np.random.default_rng(config.seed + 1), config.seed,
        )
        manifest["timings"]["img2img"] = time.perf_counter() - t0

        stage = "export"
        t0 = time.perf_counter()
        # Bleed covered values into blank texels so seams sample cleanly.
        export_vals = dilate_values(texture.values, ~blank, 2)
        export_texture = Grid(export_vals, "rgb_texture")
        save_png(out_dir / "texture.png", export_texture)
        views_dir = out_dir / "views"
        views_dir.mkdir(exist_ok=True)
        from .geometry import rasterize_view
        from .renderer import render

        for n, state in enumerate(states):
            buffers = rasterize_view(mesh, state.camera)
            save_png(views_dir / f"view_{n:02d}.png", render(export_texture, mesh, buffers))
        canonical_dir = out_dir / "canonical"
        canonical_dir.mkdir(exist_ok=True)
        export_canonical_renders(export_texture, mesh, config, canonical_dir)
        manifest["timings"]["export"] = time.perf_counter() - t0
    except Exception:
        manifest["failed_stage"] = stage
        manifest["wall_time"] = time.perf_counter() - job_start
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
        raise
    manifest["wall_time"] = time.perf_counter() - job_start
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def export_canonical_renders(texture: Grid, mesh, config: JobConfig, out_dir) -> list[Path]:
    """Five canonical viewpoints on a pure white background."""
    from .renderer import render

    out_dir = Path(out_dir)
    paths = []
    for name, (el, az) in CANONICAL_VIEWS.items():
        cam = Camera(el, az, config.camera_distance, config.fov_y, config.image_size)
        from .geometry import rasterize_view

        buffers = rasterize_view(mesh, cam)
        img = render(texture, mesh, buffers)
        fg = buffers.foreground_mask[None]
        composited = Grid(
            (img.values * fg + (1.0 - fg)).astype(np.float32), "rgb_image"
        )
        path = out_dir / f"{name}.png"
        save_png(path, composited)
        paths.append(path)
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="meshtex", description="Synthesize a UV texture for a mesh from a text prompt."
    )
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--mesh", help="OBJ mesh path")
    parser.add_argument("--prompt", help="text prompt")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--backend", help="remote backend endpoint host:port")
    parser.add_argument("--mock", action="store_true", help="use the offline mock predictor")
    parser.add_argument("--output", help="output directory")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--image-size", type=int, dest="image_size")
    parser.add_argument("--texture-size", type=int, dest="texture_size")
    parser.add_argument(
        "--latent-texture-size", type=int, dest="latent_texture_size"
    )
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    config = JobConfig()
    if args.config:
        config = JobConfig.parse(Path(args.config).read_text())
    if args.mesh:
        config.mesh_path = args.mesh
    if args.prompt:
        config.prompt = args.prompt
    if args.seed is not None:
        config.seed = args.seed
    if args.backend:
        config.predictor = "remote"
        config.endpoint = args.backend
    if args.mock:
        config.predictor = "mock"
    if args.output:
        config.output_dir = args.output
    for key in ("steps", "image_size", "texture_size", "latent_texture_size"):
        val = getattr(args, key)
        if val is not None:
            setattr(config, key, val)

    if not config.mesh_path or not Path(config.mesh_path).exists():
        log.error("mesh file not found: %r", config.mesh_path)
        return 2
    try:
        manifest = run_job(config)
    except (MeshError, ValueError) as exc:
        log.error("job failed: %s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("job failed: %s", exc)
        return 1
    log.info(
        "done in %.1fs, blank texels after inpainting: %s",
        manifest["wall_time"],
        manifest.get("blank_after_inpaint"),
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
