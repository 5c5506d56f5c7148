"""Texture-to-screen rendering and its texel-centric inverse.

Rendering samples the texture bilinearly at UVs interpolated from the view
buffers; there is no lighting. The inverse is a gather: the mesh is
rasterized in UV space so each covered texel owns a surface point, which is
projected and depth-tested against the view's z-buffer. Both directions are
linear in their value grids, which the texture-space sampler relies on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import BACKGROUND, Camera, Mesh, ViewBuffers, _raster_triangle_2d, _uv_to_grid

# Visibility slack for the texel depth test, in units of the (normalized)
# scene diagonal.
DEPTH_EPSILON = 1e-3

# Texels on faces more grazing than this are never marked visible: their
# screen footprint degenerates, so any image-space gather is unreliable, and
# the similarity-softmax merge would all but ignore them anyway.
SIMILARITY_THRESHOLD = 0.2

# How far inverse-rendered values bleed into uncovered neighbor texels so
# bilinear sampling across chart seams stays clean.
SEAM_DILATION_STEPS = 2

ROLES = ("latent_texture", "latent_image", "rgb_texture", "rgb_image", "mask")
_TEXTURE_OF_IMAGE = {"latent_image": "latent_texture", "rgb_image": "rgb_texture", "mask": "mask"}
_IMAGE_OF_TEXTURE = {v: k for k, v in _TEXTURE_OF_IMAGE.items()}


class GridError(ValueError):
    pass


@dataclass
class Grid:
    """Channel-major value grid tagged with its role in the pipeline."""

    values: np.ndarray  # (C, H, W) float32
    role: str

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise GridError("grid values must be (C, H, W)")
        if self.role not in ROLES:
            raise GridError(f"unknown grid role {self.role!r}")
        if not np.isfinite(self.values).all():
            raise GridError("grid contains non-finite values")
        if self.role == "mask" and self.values.shape[0] != 1:
            raise GridError("mask grids have a single channel")
        if self.role.startswith("rgb") and self.values.shape[0] != 3:
            raise GridError("rgb grids have three channels")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def copy(self) -> "Grid":
        return Grid(self.values.copy(), self.role)

    @classmethod
    def zeros(cls, channels: int, height: int, width: int, role: str) -> "Grid":
        return cls(np.zeros((channels, height, width), dtype=np.float32), role)


@dataclass
class TexelFootprint:
    """Per-texel view correspondence realizing the inverse rendering gather.

    All arrays are (T, T). `visible` marks texels whose surface point passes
    the depth test and faces the camera; `charted` marks texels covered by
    any UV triangle at all.
    """

    visible: np.ndarray  # bool
    charted: np.ndarray  # bool
    pixel_x: np.ndarray  # continuous pixel coords (center = int + 0.5)
    pixel_y: np.ndarray
    depth: np.ndarray
    similarity: np.ndarray  # owning face's normal similarity, 0 if uncharted
    face: np.ndarray  # owning face index, BACKGROUND if uncharted


def bilinear_sample(values: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at continuous pixel coords with edge clamping.

    Coordinates follow the pixel-center convention: (0.5, 0.5) is the center
    of the top-left cell. Returns (C, P).
    """
    c, h, w = values.shape
    fx = np.clip(px - 0.5, 0.0, w - 1.0)
    fy = np.clip(py - 0.5, 0.0, h - 1.0)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (fx - x0).astype(values.dtype)
    ty = (fy - y0).astype(values.dtype)
    v00 = values[:, y0, x0]
    v01 = values[:, y0, x1]
    v10 = values[:, y1, x0]
    v11 = values[:, y1, x1]
    top = v00 * (1 - tx) + v01 * tx
    bot = v10 * (1 - tx) + v11 * tx
    return top * (1 - ty) + bot * ty


def render(texture: Grid, mesh: Mesh, buffers: ViewBuffers) -> Grid:
    """R: bilinear texture lookup at each foreground pixel, 0 on background."""
    image_role = _IMAGE_OF_TEXTURE.get(texture.role)
    if image_role is None:
        raise GridError(f"cannot render a grid with role {texture.role!r}")
    s = buffers.face_id.shape[0]
    out = np.zeros((texture.channels, s, s), dtype=np.float32)
    rows, cols = np.nonzero(buffers.face_id != BACKGROUND)
    if len(rows):
        fid = buffers.face_id[rows, cols]
        bary = buffers.barycentric[rows, cols]  # (P, 3)
        uv = np.einsum("pk,pkd->pd", bary, mesh.uv_corners[fid])
        px = uv[:, 0] * texture.width
        py = (1.0 - uv[:, 1]) * texture.height
        out[:, rows, cols] = bilinear_sample(texture.values, px, py)
    return Grid(out, image_role)


def compute_footprints(
    mesh: Mesh, camera: Camera, buffers: ViewBuffers, texture_size: int
) -> TexelFootprint:
    """Rasterize the mesh in UV space and depth-test each texel's surface
    point against the view's z-buffer."""
    if texture_size <= 0:
        raise ValueError("texture_size must be positive")
    t = texture_size
    visible = np.zeros((t, t), dtype=bool)
    charted = np.zeros((t, t), dtype=bool)
    pixel_x = np.zeros((t, t), dtype=np.float64)
    pixel_y = np.zeros((t, t), dtype=np.float64)
    depth = np.full((t, t), np.inf, dtype=np.float64)
    similarity = np.zeros((t, t), dtype=np.float64)
    face = np.full((t, t), BACKGROUND, dtype=np.int64)

    _, _, fwd = camera.basis()
    sim_faces = np.clip(mesh.face_normals @ (-fwd), -1.0, 1.0)
    s = camera.image_size
    slope = _depth_slope(buffers.depth)

    for f in range(mesh.num_faces):
        cols, rows, bary = _raster_triangle_2d(_uv_to_grid(mesh.uv_corners[f], t), t)
        if len(cols) == 0:
            continue
        # First claim wins: overlapping charts are invalid input, but keep
        # ownership deterministic (lower face index) if they occur.
        fresh = ~charted[rows, cols]
        rows, cols, bary = rows[fresh], cols[fresh], bary[fresh]
        if len(rows) == 0:
            continue
        charted[rows, cols] = True
        points = bary @ mesh.positions[mesh.triangles[f]]
        pix, z = camera.project(points)
        d = np.linalg.norm(points - camera.eye, axis=1)
        px, py = pix[:, 0], pix[:, 1]
        in_bounds = (z > 0) & (px >= 0) & (px < s) & (py >= 0) & (py < s)
        ix = np.clip(px.astype(np.int64), 0, s - 1)
        iy = np.clip(py.astype(np.int64), 0, s - 1)
        zbuf = _interp_foreground_depth(buffers, px, py)
        # Unoccluded if the projected position is owned by this very face,
        # or nothing sits in front of the surface point there. The slack is
        # widened by the local z-buffer slope so grazing surfaces, where
        # depth changes by much more than DEPTH_EPSILON per pixel, are not
        # misclassified as self-occluded.
        slack = DEPTH_EPSILON + slope[iy, ix]
        unoccluded = (buffers.face_id[iy, ix] == f) | (
            np.isfinite(zbuf) & (d <= zbuf + slack)
        )
        # The gather is only trustworthy when at least one pixel of the
        # texel's bilinear neighborhood was rasterized from its own face.
        fx = np.clip(px - 0.5, 0.0, s - 1.0)
        fy = np.clip(py - 0.5, 0.0, s - 1.0)
        cx0 = np.floor(fx).astype(np.int64)
        cy0 = np.floor(fy).astype(np.int64)
        cx1 = np.minimum(cx0 + 1, s - 1)
        cy1 = np.minimum(cy0 + 1, s - 1)
        own_corner = np.zeros(len(px), dtype=bool)
        for cy, cx in ((cy0, cx0), (cy0, cx1), (cy1, cx0), (cy1, cx1)):
            own_corner |= buffers.face_id[cy, cx] == f
        vis = (
            in_bounds
            & unoccluded
            & own_corner
            & (sim_faces[f] >= SIMILARITY_THRESHOLD)
        )
        pixel_x[rows, cols] = px
        pixel_y[rows, cols] = py
        depth[rows, cols] = d
        similarity[rows, cols] = sim_faces[f]
        face[rows, cols] = f
        visible[rows, cols] = vis
    return TexelFootprint(visible, charted, pixel_x, pixel_y, depth, similarity, face)


def _depth_slope(depth: np.ndarray) -> np.ndarray:
    """Per-pixel magnitude of the z-buffer's forward differences, treating
    background (infinite) neighbors as zero slope."""
    z = np.where(np.isfinite(depth), depth, np.nan)
    gx = np.abs(np.diff(z, axis=1, prepend=z[:, :1]))
    gy = np.abs(np.diff(z, axis=0, prepend=z[:1]))
    return np.fmax(np.nan_to_num(gx), np.nan_to_num(gy))


def _interp_foreground_depth(
    buffers: ViewBuffers, px: np.ndarray, py: np.ndarray
) -> np.ndarray:
    """Bilinear z-buffer lookup at continuous positions, weighting only
    foreground pixels; +inf where no foreground neighbor exists."""
    h, w = buffers.depth.shape
    fx = np.clip(px - 0.5, 0.0, w - 1.0)
    fy = np.clip(py - 0.5, 0.0, h - 1.0)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = fx - x0
    ty = fy - y0
    acc = np.zeros_like(fx)
    wsum = np.zeros_like(fx)
    for yy, xx, wgt in (
        (y0, x0, (1 - tx) * (1 - ty)),
        (y0, x1, tx * (1 - ty)),
        (y1, x0, (1 - tx) * ty),
        (y1, x1, tx * ty),
    ):
        z = buffers.depth[yy, xx]
        fg = np.isfinite(z)
        acc += np.where(fg, z * wgt, 0.0)
        wsum += np.where(fg, wgt, 0.0)
    out = np.full_like(fx, np.inf)
    ok = wsum > 0
    out[ok] = acc[ok] / wsum[ok]
    return out


def inverse_render(
    image: Grid, footprints: TexelFootprint, buffers: ViewBuffers | None = None
) -> tuple[Grid, Grid]:
    """R^-1: visible texels gather a bilinear image sample with weight 1.

    When the view `buffers` are given, bilinear weights at each texel are
    renormalized over the pixels rasterized from the texel's own face, so
    the gather never blends across UV chart boundaries; failing that, over
    foreground pixels, so silhouette texels do not blend in background
    values that carry no surface information.

    Values are dilated SEAM_DILATION_STEPS texels into zero-weight neighbors
    (weights untouched) to hide UV-seam bleeding under bilinear filtering.
    """
    texture_role = _TEXTURE_OF_IMAGE.get(image.role)
    if texture_role is None:
        raise GridError(f"cannot inverse-render a grid with role {image.role!r}")
    t = footprints.visible.shape[0]
    values = np.zeros((image.channels, t, t), dtype=np.float32)
    rows, cols = np.nonzero(footprints.visible)
    if len(rows):
        px = footprints.pixel_x[rows, cols]
        py = footprints.pixel_y[rows, cols]
        if buffers is None:
            values[:, rows, cols] = bilinear_sample(image.values, px, py)
        else:
            values[:, rows, cols] = _bilinear_sample_face(
                image.values, buffers, px, py, footprints.face[rows, cols]
            )
    weight = footprints.visible.astype(np.float32)
    values = dilate_values(values, footprints.visible, SEAM_DILATION_STEPS)
    return Grid(values, texture_role), Grid(weight[None], "mask")


def _bilinear_sample_face(
    values: np.ndarray,
    buffers: ViewBuffers,
    px: np.ndarray,
    py: np.ndarray,
    owner: np.ndarray,
) -> np.ndarray:
    """Bilinear sample of (C, H, W), preferring the texel's own face.

    Corner weights are renormalized over pixels whose rasterized face is
    `owner`; if no corner qualifies, over foreground pixels; if none of
    those either, the plain bilinear value is used.
    """
    c, h, w = values.shape
    fx = np.clip(px - 0.5, 0.0, w - 1.0)
    fy = np.clip(py - 0.5, 0.0, h - 1.0)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (fx - x0).astype(values.dtype)
    ty = (fy - y0).astype(values.dtype)
    acc_face = np.zeros((c, len(fx)), dtype=values.dtype)
    acc_fg = np.zeros((c, len(fx)), dtype=values.dtype)
    w_face = np.zeros(len(fx), dtype=values.dtype)
    w_fg = np.zeros(len(fx), dtype=values.dtype)
    for yy, xx, wgt in (
        (y0, x0, (1 - tx) * (1 - ty)),
        (y0, x1, tx * (1 - ty)),
        (y1, x0, (1 - tx) * ty),
        (y1, x1, tx * ty),
    ):
        fid = buffers.face_id[yy, xx]
        wm = np.where(fid == owner, wgt, 0.0)
        acc_face += values[:, yy, xx] * wm[None]
        w_face += wm
        wm = np.where(fid != BACKGROUND, wgt, 0.0)
        acc_fg += values[:, yy, xx] * wm[None]
        w_fg += wm
    out = bilinear_sample(values, px, py)
    ok = w_fg > 0
    out[:, ok] = acc_fg[:, ok] / w_fg[ok][None]
    ok = w_face > 0
    out[:, ok] = acc_face[:, ok] / w_face[ok][None]
    return out


def dilate_values(values: np.ndarray, filled: np.ndarray, steps: int) -> np.ndarray:
    """Grow values into unfilled neighbor texels by averaging filled
    4-neighbors; `filled` itself is never overwritten."""
    values = values.copy()
    filled = filled.copy()
    for _ in range(steps):
        f = filled.astype(np.float32)
        acc = np.zeros_like(values)
        cnt = np.zeros_like(f)
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            acc += np.roll(values * f[None], (dy, dx), axis=(1, 2))
            cnt += np.roll(f, (dy, dx), axis=(0, 1))
        grow = (~filled) & (cnt > 0)
        if not grow.any():
            break
        values[:, grow] = acc[:, grow] / cnt[grow]
        filled = filled | grow
    return values


def downsample_mask(mask: Grid, factor: int) -> Grid:
    """Area-average pooling by an integer factor."""
    if mask.role != "mask":
        raise GridError("downsample_mask expects a mask grid")
    h, w = mask.height, mask.width
    if factor <= 0 or h % factor or w % factor:
        raise GridError(f"factor {factor} does not divide mask dimensions {h}x{w}")
    v = mask.values.reshape(1, h // factor, factor, w // factor, factor)
    return Grid(v.mean(axis=(2, 4)), "mask")


# --- PNG import/export ---------------------------------------------------


def save_png(path, grid: Grid) -> None:
    """8-bit RGB PNG export of an rgb grid (values clamped to [0,1])."""
    from PIL import Image

    if not grid.role.startswith("rgb"):
        raise GridError("save_png expects an rgb grid")
    arr = np.clip(grid.values, 0.0, 1.0)
    img = (arr * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img, mode="RGB").save(path)


def load_png(path, role: str = "rgb_texture") -> Grid:
    from PIL import Image

    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return Grid(arr, role)


# --- GTEX float-grid serialization --------------------------------------

GTEX_MAGIC = b"GTEX"


def write_gtex(path, grid: Grid) -> None:
    """Little-endian f32 dump: 16-byte header {magic, C, H, W} + payload."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", GTEX_MAGIC, grid.channels, grid.height, grid.width))
        fh.write(grid.values.astype("<f4").tobytes())


def read_gtex(path, role: str = "latent_texture") -> Grid:
    with open(path, "rb") as fh:
        header = fh.read(16)
        magic, c, h, w = struct.unpack("<4sIII", header)
        if magic != GTEX_MAGIC:
            raise GridError("bad GTEX magic")
        data = np.frombuffer(fh.read(c * h * w * 4), dtype="<f4").reshape(c, h, w)
    return Grid(data.copy(), role)
