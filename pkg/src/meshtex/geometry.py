"""Mesh loading, cameras, and per-view rasterization.

Conventions (fixed for the whole engine):
    - World space is right-handed, +Y up. Cameras orbit the origin on a
      sphere given by (elevation, azimuth, distance) and look at the origin.
      Azimuth 0 places the camera on +Z.
    - Screen rows grow downward; NDC y=+1 maps to row 0.
    - Depth is the Euclidean distance from the eye to the surface point;
      background pixels hold +inf.
    - Rasterization uses a top-left fill rule and breaks equal-depth ties
      by lower face index, so output is deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

BACKGROUND = -1
DEGENERATE_AREA = 1e-12
_NEAR_CLIP = 1e-4


class MeshError(ValueError):
    pass


@dataclass
class Mesh:
    """Triangle mesh with per-corner UVs and derived face normals.

    positions: (V, 3) float64, triangles: (F, 3) int32 vertex indices,
    uv_corners: (F, 3, 2) float64 in [0, 1]^2, face_normals: (F, 3) unit.
    """

    positions: np.ndarray
    triangles: np.ndarray
    uv_corners: np.ndarray
    face_normals: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int32)
        self.uv_corners = np.asarray(self.uv_corners, dtype=np.float64)
        if self.face_normals is None:
            self.face_normals = compute_face_normals(self.positions, self.triangles)
        self.validate()

    def validate(self):
        v = len(self.positions)
        if len(self.triangles) == 0 or v == 0:
            raise MeshError("empty mesh")
        if self.triangles.min() < 0 or self.triangles.max() >= v:
            raise MeshError(
                f"face references vertex index {self.triangles.max()} of {v}"
            )
        if self.uv_corners.shape != (len(self.triangles), 3, 2):
            raise MeshError("uv_corners shape mismatch")
        if self.uv_corners.min() < -1e-9 or self.uv_corners.max() > 1 + 1e-9:
            raise MeshError("UV coordinates outside [0,1]")
        tri = self.positions[self.triangles]
        areas = 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
        )
        if (areas <= DEGENERATE_AREA).any():
            raise MeshError("degenerate triangle (area <= 1e-12)")

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_faces(self) -> int:
        return len(self.triangles)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)


@dataclass(frozen=True)
class Camera:
    """Orbit camera: spherical position, look-at origin, up = +Y."""

    elevation: float
    azimuth: float
    distance: float = 2.0
    fov_y: float = 45.0
    image_size: int = 512

    def __post_init__(self):
        if not -90.0 <= self.elevation <= 90.0:
            raise ValueError("elevation outside [-90, 90]")
        if not 0.0 <= self.azimuth % 360.0 < 360.0:
            raise ValueError("bad azimuth")
        if self.distance <= 0:
            raise ValueError("distance must be positive")
        if not 0.0 < self.fov_y < 180.0:
            raise ValueError("fov_y outside (0, 180)")
        if self.image_size <= 0:
            raise ValueError("image_size must be positive")

    @property
    def eye(self) -> np.ndarray:
        el = math.radians(self.elevation)
        az = math.radians(self.azimuth)
        return self.distance * np.array(
            [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
        )

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (right, up, forward); forward points from eye to origin."""
        eye = self.eye
        fwd = -eye / np.linalg.norm(eye)
        up_hint = np.array([0.0, 1.0, 0.0])
        if abs(fwd @ up_hint) > 1.0 - 1e-9:
            # Looking straight up/down; pick a deterministic fallback.
            up_hint = np.array([0.0, 0.0, -1.0 if fwd[1] < 0 else 1.0])
        right = np.cross(fwd, up_hint)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (P, 3) -> continuous pixel coords (P, 2) and view-axis
        depth z (P,). Pixel x grows right, y grows down; pixel centers sit at
        integer + 0.5."""
        right, up, fwd = self.basis()
        rel = points - self.eye
        x = rel @ right
        y = rel @ up
        z = rel @ fwd
        tan_half = math.tan(math.radians(self.fov_y) / 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ndc_x = x / (z * tan_half)
            ndc_y = y / (z * tan_half)
        s = self.image_size
        px = (ndc_x + 1.0) * 0.5 * s
        py = (1.0 - ndc_y) * 0.5 * s
        return np.stack([px, py], axis=-1), z


@dataclass
class ViewBuffers:
    """Per-pixel correspondence buffers for one (mesh, camera) pair.

    face_id: (S, S) int32 with BACKGROUND sentinel; barycentric: (S, S, 3)
    perspective-correct; depth: (S, S) distance from eye, +inf background;
    foreground_mask: (S, S) float {0,1}; normal_similarity: (S, S) cosine of
    the face normal against the reversed view axis, 0 on background.
    """

    face_id: np.ndarray
    barycentric: np.ndarray
    depth: np.ndarray
    foreground_mask: np.ndarray
    normal_similarity: np.ndarray


def compute_face_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    tri = positions[triangles]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norms = np.linalg.norm(n, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return n / norms


def load_mesh(path) -> Mesh:
    """Parse a Wavefront OBJ with positions, UVs, and `f v/vt` faces.

    Quads and larger polygons are fan-triangulated. Faces without texture
    coordinates are rejected (the engine consumes UVs, it never creates them).
    """
    positions: list[list[float]] = []
    uvs: list[list[float]] = []
    tris: list[list[int]] = []
    uv_tris: list[list[int]] = []
    path = Path(path)
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                positions.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                corners = []
                for token in parts[1:]:
                    fields = token.split("/")
                    vi = int(fields[0])
                    vti = None
                    if len(fields) > 1 and fields[1]:
                        vti = int(fields[1])
                    if vti is None:
                        raise MeshError("mesh lacks UV parameterization")
                    # OBJ indices are 1-based; negatives count from the end.
                    vi = vi - 1 if vi > 0 else len(positions) + vi
                    vti = vti - 1 if vti > 0 else len(uvs) + vti
                    corners.append((vi, vti))
                for k in range(1, len(corners) - 1):
                    fan = [corners[0], corners[k], corners[k + 1]]
                    tris.append([c[0] for c in fan])
                    uv_tris.append([c[1] for c in fan])
    if not uvs:
        raise MeshError("mesh lacks UV parameterization")
    if not tris:
        raise MeshError(f"no faces in {path}")
    positions_a = np.array(positions, dtype=np.float64)
    uvs_a = np.array(uvs, dtype=np.float64)
    tris_a = np.array(tris, dtype=np.int32)
    uv_tris_a = np.array(uv_tris, dtype=np.int64)
    if uv_tris_a.min() < 0 or uv_tris_a.max() >= len(uvs_a):
        raise MeshError("face references UV index out of range")
    if tris_a.min() < 0 or tris_a.max() >= len(positions_a):
        raise MeshError(
            f"face references vertex index {tris_a.max()} of {len(positions_a)}"
        )
    mesh = Mesh(positions_a, tris_a, uvs_a[uv_tris_a])
    _warn_uv_overlap(mesh)
    return mesh


def _warn_uv_overlap(mesh: Mesh, resolution: int = 256):
    """Rasterize the UV layout at a coarse grid and warn on double coverage."""
    covered = np.full((resolution, resolution), -1, dtype=np.int32)
    overlapped = False
    for f in range(mesh.num_faces):
        cols, rows, _ = _raster_triangle_2d(
            _uv_to_grid(mesh.uv_corners[f], resolution), resolution
        )
        prev = covered[rows, cols]
        if (prev >= 0).any():
            overlapped = True
        covered[rows, cols] = f
    if overlapped:
        log.warning("UV charts overlap (within rasterization tolerance)")


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center the bounding box at the origin and scale its diagonal to 1."""
    lo, hi = mesh.bounds()
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        raise MeshError("zero-extent mesh cannot be normalized")
    center = (lo + hi) / 2
    positions = (mesh.positions - center) / diag
    return Mesh(positions, mesh.triangles.copy(), mesh.uv_corners.copy())


def _uv_to_grid(uv: np.ndarray, size: int) -> np.ndarray:
    """UV in [0,1]^2 -> continuous texel coords; v=1 maps to row 0."""
    out = np.empty_like(uv)
    out[..., 0] = uv[..., 0] * size
    out[..., 1] = (1.0 - uv[..., 1]) * size
    return out


def _raster_triangle_2d(pts: np.ndarray, size: int, size_y: int | None = None):
    """Covered integer cells of a 2D triangle under the top-left fill rule.

    pts: (3, 2) continuous coords, x right / y down. Returns (cols, rows, bary)
    with bary the affine barycentrics at the covered cell centers.
    """
    if size_y is None:
        size_y = size
    x0, y0 = pts[0]
    x1, y1 = pts[1]
    x2, y2 = pts[2]
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    if area == 0.0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty((0, 3))
    swapped = area < 0
    if swapped:
        # Normalize orientation so edge functions are positive inside.
        x1, y1, x2, y2 = x2, y2, x1, y1
        area = -area
    xmin = max(int(math.floor(min(x0, x1, x2) - 0.5)), 0)
    xmax = min(int(math.ceil(max(x0, x1, x2) - 0.5)), size - 1)
    ymin = max(int(math.floor(min(y0, y1, y2) - 0.5)), 0)
    ymax = min(int(math.ceil(max(y0, y1, y2) - 0.5)), size_y - 1)
    if xmin > xmax or ymin > ymax:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty((0, 3))
    cx = np.arange(xmin, xmax + 1) + 0.5
    cy = np.arange(ymin, ymax + 1) + 0.5
    gx, gy = np.meshgrid(cx, cy)

    def edge(ax, ay, bx, by):
        val = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
        # Top-left rule (y grows down): include boundary cells on top edges
        # (horizontal, b right of a) and left edges (b below a).
        top_left = (by > ay) or (by == ay and bx < ax)
        return val > 0 if top_left else val >= 0, val

    in01, e01 = edge(x0, y0, x1, y1)
    in12, e12 = edge(x1, y1, x2, y2)
    in20, e20 = edge(x2, y2, x0, y0)
    inside = in01 & in12 & in20
    rows, cols = np.nonzero(inside)
    b0 = e12[rows, cols] / area
    b1 = e20[rows, cols] / area
    b2 = e01[rows, cols] / area
    bary = np.stack([b0, b1, b2], axis=-1)
    if swapped:
        bary = bary[:, [0, 2, 1]]  # back to the caller's vertex order
    return cols + xmin, rows + ymin, bary


def rasterize_view(mesh: Mesh, camera: Camera) -> ViewBuffers:
    """Z-buffered perspective rasterization of all ViewBuffers fields."""
    lo, hi = mesh.bounds()
    bounding_radius = float(np.linalg.norm(hi - lo)) / 2 + float(
        np.linalg.norm((lo + hi) / 2)
    )
    if camera.distance <= bounding_radius:
        log.warning("camera lies inside the mesh bounding sphere; proceeding")

    s = camera.image_size
    face_id = np.full((s, s), BACKGROUND, dtype=np.int32)
    barycentric = np.zeros((s, s, 3), dtype=np.float64)
    depth = np.full((s, s), np.inf, dtype=np.float64)

    pix, z_axis = camera.project(mesh.positions)
    _, _, fwd = camera.basis()
    sim_faces = np.clip(mesh.face_normals @ (-fwd), -1.0, 1.0)

    for f in range(mesh.num_faces):
        idx = mesh.triangles[f]
        z = z_axis[idx]
        if (z <= _NEAR_CLIP).any():
            continue  # behind or grazing the eye; normalized meshes never clip
        cols, rows, bary = _raster_triangle_2d(pix[idx], s)
        if len(cols) == 0:
            continue
        # Perspective-correct barycentrics from the screen-space ones.
        over_z = bary / z[None, :]
        persp = over_z / over_z.sum(axis=1, keepdims=True)
        # Exact distance to the interpolated surface point (distance itself
        # is not affine over the triangle).
        points = persp @ mesh.positions[idx]
        d = np.linalg.norm(points - camera.eye, axis=1)
        closer = d < depth[rows, cols]
        rows, cols = rows[closer], cols[closer]
        depth[rows, cols] = d[closer]
        face_id[rows, cols] = f
        barycentric[rows, cols] = persp[closer]

    fg = face_id != BACKGROUND
    foreground_mask = fg.astype(np.float64)
    normal_similarity = np.zeros((s, s), dtype=np.float64)
    normal_similarity[fg] = sim_faces[face_id[fg]]
    return ViewBuffers(face_id, barycentric, depth, foreground_mask, normal_similarity)
