import dataclasses
import json

import numpy as np
import pytest

from meshtex.cli import CANONICAL_VIEWS, JobConfig, main, make_job_predictor, run_job
from meshtex.predictor import IdentityMockPredictor, MockPredictor
from meshtex.renderer import load_png


def small_config(sphere_obj, out_dir):
    cfg = JobConfig(
        mesh_path=str(sphere_obj),
        prompt="weathered bronze",
        seed=7,
        steps=4,
        image_size=64,
        texture_size=64,
        latent_texture_size=8,
        output_dir=str(out_dir),
    )
    cfg.inpainting_views = cfg.inpainting_views[:5]
    cfg.img2img_views = cfg.img2img_views[:3]
    return cfg


def test_config_round_trip():
    cfg = JobConfig(
        mesh_path="m.obj", prompt="rusty metal", seed=3, steps=12,
        image_size=128, texture_size=256, latent_texture_size=32,
        sampling_views=[(0.0, 0.0), (30.0, 120.0)], debug_dumps=True,
    )
    back = JobConfig.parse(cfg.serialize())
    for f in dataclasses.fields(JobConfig):
        assert getattr(back, f.name) == getattr(cfg, f.name), f.name


def test_config_parse_rejects_unknown_key():
    with pytest.raises(ValueError):
        JobConfig.parse("no_such_key = 1\n")


def test_config_parse_comments_and_views():
    cfg = JobConfig.parse("steps = 9  # fast\n\nsampling_views = 0,0;10,90\n")
    assert cfg.steps == 9
    assert cfg.sampling_views == [(0.0, 0.0), (10.0, 90.0)]


def test_config_validation():
    with pytest.raises(ValueError):
        JobConfig(image_size=60, latent_factor=8).validate()
    with pytest.raises(ValueError):
        JobConfig(texture_size=0).validate()
    with pytest.raises(ValueError):
        JobConfig(sampling_views=[]).validate()


def test_make_job_predictor():
    assert isinstance(make_job_predictor(JobConfig(predictor="mock")), MockPredictor)
    pred = make_job_predictor(JobConfig(predictor="identity-mock"))
    assert isinstance(pred, IdentityMockPredictor)
    with pytest.raises(ValueError):
        make_job_predictor(JobConfig(predictor="nope"))
    with pytest.raises(ValueError):
        make_job_predictor(JobConfig(predictor="remote"))  # no endpoint anywhere


def test_main_missing_mesh(tmp_path):
    assert main(["--mesh", str(tmp_path / "absent.obj"), "--mock"]) == 2


def test_run_job_artifacts(sphere_obj, tmp_path):
    cfg = small_config(sphere_obj, tmp_path / "out")
    manifest = run_job(cfg)
    assert manifest["failed_stage"] is None
    assert manifest["blank_after_inpaint"] <= manifest["blank_before_inpaint"]
    out = tmp_path / "out"
    assert (out / "texture.png").exists()
    assert (out / "manifest.json").exists()
    on_disk = json.loads((out / "manifest.json").read_text())
    assert on_disk["seed"] == 7
    assert set(on_disk["timings"]) == {"load", "sampling", "inpainting", "img2img", "export"}
    for n in range(len(cfg.sampling_views)):
        assert (out / "views" / f"view_{n:02d}.png").exists()
    for name in CANONICAL_VIEWS:
        assert (out / "canonical" / f"{name}.png").exists()
    tex = load_png(out / "texture.png")
    assert tex.values.shape == (3, 64, 64)
    assert tex.values.min() >= 0.0 and tex.values.max() <= 1.0


def test_canonical_renders_white_background(sphere_obj, tmp_path):
    cfg = small_config(sphere_obj, tmp_path / "out")
    run_job(cfg)
    front = load_png(tmp_path / "out" / "canonical" / "front.png")
    corners = front.values[:, [0, 0, -1, -1], [0, -1, 0, -1]]
    assert (corners == 1.0).all()
    # The mesh itself must not be pure white everywhere.
    assert (front.values < 1.0).any()


def test_run_job_deterministic(sphere_obj, tmp_path):
    digests = []
    for name in ("a", "b"):
        cfg = small_config(sphere_obj, tmp_path / name)
        run_job(cfg)
        digests.append((tmp_path / name / "texture.png").read_bytes())
    assert digests[0] == digests[1]


def test_main_smoke_cli(sphere_obj, tmp_path):
    code = main(
        [
            "--mesh", str(sphere_obj), "--mock", "--prompt", "mossy stone",
            "--seed", "1", "--steps", "3", "--image-size", "64",
            "--texture-size", "64", "--latent-texture-size", "8",
            "--output", str(tmp_path / "cli_out"),
        ]
    )
    assert code == 0
    assert (tmp_path / "cli_out" / "texture.png").exists()
