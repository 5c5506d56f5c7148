"""Independent brute-force oracles the engine is checked against.

These deliberately share no code with the rasterizer: visibility comes from
per-pixel ray casting (Moller-Trumbore against every triangle), and texture
lookups re-derive UVs from the ray hit.
"""

from __future__ import annotations

import math

import numpy as np

from meshtex.geometry import Camera, Mesh


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit ray directions through every pixel center. Returns (origin, dirs
    (S, S, 3))."""
    s = camera.image_size
    right, up, fwd = camera.basis()
    tan_half = math.tan(math.radians(camera.fov_y) / 2)
    cols = (np.arange(s) + 0.5) / s * 2.0 - 1.0
    rows = 1.0 - (np.arange(s) + 0.5) / s * 2.0
    ndc_x, ndc_y = np.meshgrid(cols, rows)
    dirs = (
        fwd[None, None]
        + ndc_x[..., None] * tan_half * right[None, None]
        + ndc_y[..., None] * tan_half * up[None, None]
    )
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return camera.eye, dirs


def raycast(mesh: Mesh, camera: Camera):
    """Nearest-hit raycast of all pixels. Returns (face_id, distance, bary)
    with face_id -1 for misses; ties broken by lower face index."""
    eye, dirs = pixel_rays(camera)
    s = camera.image_size
    flat_dirs = dirs.reshape(-1, 3)
    best_t = np.full(len(flat_dirs), np.inf)
    best_f = np.full(len(flat_dirs), -1, dtype=np.int64)
    best_bary = np.zeros((len(flat_dirs), 3))
    eps = 1e-12
    for f in range(mesh.num_faces):
        v0, v1, v2 = mesh.positions[mesh.triangles[f]]
        e1, e2 = v1 - v0, v2 - v0
        pvec = np.cross(flat_dirs, e2)
        det = pvec @ e1
        ok = np.abs(det) > eps
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = eye - v0
        u = (pvec @ tvec) * inv_det
        qvec = np.cross(tvec, e1)
        v = (flat_dirs @ qvec) * inv_det
        t = (e2 @ qvec) * inv_det
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0) & (t < best_t)
        best_t[hit] = t[hit]
        best_f[hit] = f
        best_bary[hit] = np.stack([1 - u[hit] - v[hit], u[hit], v[hit]], axis=-1)
    return (
        best_f.reshape(s, s),
        best_t.reshape(s, s),
        best_bary.reshape(s, s, 3),
    )


def texel_visibility(mesh: Mesh, camera: Camera, texture_size: int):
    """Reference texel visibility: each charted texel center is mapped to its
    surface point, then a ray from the eye decides whether anything occludes
    it. Returns (charted, visible) boolean (T, T) arrays. Chart ownership is
    first-by-face-index via a plain point-in-UV-triangle test.
    """
    t = texture_size
    u = (np.arange(t) + 0.5) / t
    centers = np.stack(np.meshgrid(u, 1.0 - u), axis=-1).reshape(-1, 2)  # (u, v)
    owner = np.full(t * t, -1, dtype=np.int64)
    bary = np.zeros((t * t, 3))
    for f in range(mesh.num_faces):
        a, b, c = mesh.uv_corners[f]
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-15:
            continue
        rel = centers - a
        wb = (rel[:, 0] * (c[1] - a[1]) - rel[:, 1] * (c[0] - a[0])) / det
        wc = (rel[:, 1] * (b[0] - a[0]) - rel[:, 0] * (b[1] - a[1])) / det
        wa = 1.0 - wb - wc
        inside = (wa >= 0) & (wb >= 0) & (wc >= 0) & (owner < 0)
        owner[inside] = f
        bary[inside] = np.stack([wa[inside], wb[inside], wc[inside]], axis=-1)
    charted = owner >= 0
    visible = np.zeros(t * t, dtype=bool)
    idx = np.nonzero(charted)[0]
    pts = np.einsum("pk,pkd->pd", bary[idx], mesh.positions[mesh.triangles[owner[idx]]])
    dirs = pts - camera.eye
    dist = np.linalg.norm(dirs, axis=1)
    dirs = dirs / dist[:, None]
    nearest = np.full(len(idx), np.inf)
    eps = 1e-12
    for f in range(mesh.num_faces):
        v0, v1, v2 = mesh.positions[mesh.triangles[f]]
        e1, e2 = v1 - v0, v2 - v0
        pvec = np.cross(dirs, e2)
        det = pvec @ e1
        ok = np.abs(det) > eps
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = camera.eye - v0
        uu = (pvec @ tvec) * inv_det
        qvec = np.cross(tvec, e1)
        vv = (dirs @ qvec) * inv_det
        tt = (e2 @ qvec) * inv_det
        hit = ok & (uu >= -1e-9) & (vv >= -1e-9) & (uu + vv <= 1 + 1e-9) & (tt > 1e-6)
        nearest = np.where(hit, np.minimum(nearest, tt), nearest)
    visible[idx] = nearest >= dist - 1e-6
    return charted.reshape(t, t), visible.reshape(t, t)


def raycast_render(mesh: Mesh, camera: Camera, texture: np.ndarray) -> np.ndarray:
    """Reference render: raycast + UV interpolation + bilinear texture sample.

    texture: (C, H, W). Returns (C, S, S) with zeros on misses.
    """
    face_id, _, bary = raycast(mesh, camera)
    c, th, tw = texture.shape
    s = camera.image_size
    out = np.zeros((c, s, s))
    rows, cols = np.nonzero(face_id >= 0)
    uv = np.einsum(
        "pk,pkd->pd", bary[rows, cols], mesh.uv_corners[face_id[rows, cols]]
    )
    px = np.clip(uv[:, 0] * tw - 0.5, 0, tw - 1)
    py = np.clip((1.0 - uv[:, 1]) * th - 0.5, 0, th - 1)
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    tx, ty = px - x0, py - y0
    sample = (
        texture[:, y0, x0] * (1 - tx) * (1 - ty)
        + texture[:, y0, x1] * tx * (1 - ty)
        + texture[:, y1, x0] * (1 - tx) * ty
        + texture[:, y1, x1] * tx * ty
    )
    out[:, rows, cols] = sample
    return out
