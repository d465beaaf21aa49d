"""Toy blendshape face mesh, detail displacement, pinhole camera and UV rasterization.

Everything here is plain numpy except the screen-space texture sampler, which
is differentiable with respect to the texture (rasterization itself is not).

Conventions
-----------
* Texture/detail map texel ``(row i, col j)`` has its centre at
  ``uv = ((j + 0.5) / W, (i + 0.5) / H)``; ``v`` grows downwards with rows.
  Lookups outside the texel-centre range clamp to the edge texels.
* Screen pixel ``(row y, col x)`` has its centre at ``(x + 0.5, y + 0.5)``.
* Depth is the camera-space distance along the viewing direction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import DISPLACEMENT_CAP, EXPR_DIM, SHAPE_DIM
from .io import read_json, read_pfm, write_json, write_pfm

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-4
_CANDIDATE_BUDGET = 1 << 21


class ParameterError(ValueError):
    pass


# ---------------------------------------------------------------- types

@dataclass(frozen=True)
class BlendshapeModel:
    """Linear face model ``mean + shape_basis @ a_s + expr_basis @ a_e``.

    Bases are stored as (V, 3, dim) so a column is a per-vertex 3-vector field.
    """

    mean: np.ndarray
    shape_basis: np.ndarray
    expr_basis: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    grid_size: int

    @property
    def n_vertices(self):
        return self.mean.shape[0]

    @classmethod
    def toy(cls, seed=0, grid_size=24, shape_dim=SHAPE_DIM, expr_dim=EXPR_DIM):
        """Regular grid over a face-like radial heightfield with smooth random bases."""
        n = grid_size
        t = np.linspace(0.0, 1.0, n)
        uu, vv = np.meshgrid(t, t)  # rows follow v
        x = -0.8 + 1.6 * uu
        y = 0.8 - 1.6 * vv
        r2 = x**2 + y**2
        z = 0.45 * np.exp(-r2 / 0.9)
        z += 0.12 * np.exp(-(x**2 / 0.02 + (y + 0.05) ** 2 / 0.08))  # nose ridge
        z -= 0.04 * np.exp(-((np.abs(x) - 0.3) ** 2 / 0.02 + (y - 0.2) ** 2 / 0.01))  # eye sockets
        mean = np.stack([x, y, z], axis=-1).reshape(-1, 3)
        uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)

        faces = []
        for i in range(n - 1):
            for j in range(n - 1):
                a, b, c, d = i * n + j, (i + 1) * n + j, i * n + j + 1, (i + 1) * n + j + 1
                faces.append((a, b, c))
                faces.append((b, d, c))

        rng = np.random.default_rng(seed)

        def smooth_fields(dim, amplitude):
            # Low-order cosine series per axis, 3 components per column.
            k = 3
            coef = rng.normal(size=(dim, 3, k, k)) / np.arange(1, k + 1)[:, None]
            cu = np.cos(np.pi * np.arange(k)[:, None] * uv[:, 0][None])  # (k, V)
            cv = np.cos(np.pi * np.arange(k)[:, None] * uv[:, 1][None])
            field = np.einsum("dcab,av,bv->vcd", coef, cu, cv)
            field /= np.abs(field).max(axis=(0, 1), keepdims=True)
            return amplitude * field

        return cls(
            mean=mean,
            shape_basis=smooth_fields(shape_dim, 0.05),
            expr_basis=smooth_fields(expr_dim, 0.04),
            faces=np.asarray(faces, dtype=np.int64),
            uv=uv,
            grid_size=n,
        )


@dataclass
class FaceMesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    shape_params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    expr_params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        v = self.vertices.shape[0]
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ParameterError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ParameterError("face index out of range")
        if self.uv.shape != (v, 2):
            raise ParameterError(f"uv must be ({v}, 2), got {self.uv.shape}")
        if np.any(self.uv < 0.0) or np.any(self.uv > 1.0):
            raise ParameterError("uv coordinates must lie in [0, 1]")


@dataclass
class DetailMap:
    """UV-space scalar displacement along vertex normals."""

    data: np.ndarray
    resolution: str = "train"
    cap: float = DISPLACEMENT_CAP

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ParameterError(f"detail map must be 2-D, got {self.data.shape}")
        if self.resolution not in ("train", "full"):
            raise ParameterError(f"unknown resolution tag {self.resolution!r}")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("detail map contains non-finite values")
        if np.abs(self.data).max(initial=0.0) > self.cap * (1 + 1e-6):
            raise ParameterError(f"detail map exceeds displacement cap {self.cap}")

    @classmethod
    def clipped(cls, data, resolution="train", cap=DISPLACEMENT_CAP):
        return cls(np.clip(np.asarray(data, dtype=np.float32), -cap, cap), resolution, cap)

    @classmethod
    def zeros(cls, size, resolution="train"):
        return cls(np.zeros((size, size), np.float32), resolution)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class Camera:
    eye: tuple
    look_at: tuple
    up: tuple
    fov_y: float
    height: int
    width: int

    def __post_init__(self):
        if not 0.0 < self.fov_y < np.pi:
            raise ParameterError("fov_y must lie in (0, pi)")
        if self.height <= 0 or self.width <= 0:
            raise ParameterError("image size must be positive")
        fwd = np.asarray(self.look_at, float) - np.asarray(self.eye, float)
        if np.linalg.norm(fwd) == 0:
            raise ParameterError("eye and look_at coincide")
        up = np.asarray(self.up, float)
        if np.linalg.norm(np.cross(fwd, up)) <= 1e-9 * np.linalg.norm(fwd) * np.linalg.norm(up):
            raise ParameterError("up vector is parallel to the view direction")

    @classmethod
    def orbit(cls, yaw=0.0, pitch=0.0, distance=3.2, fov_y=0.6, size=64):
        eye = distance * np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
        return cls(tuple(eye.tolist()), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), fov_y, size, size)

    def basis(self):
        fwd = np.asarray(self.look_at, float) - np.asarray(self.eye, float)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, float))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        return right, true_up, fwd

    @property
    def focal(self):
        return 0.5 * self.height / np.tan(0.5 * self.fov_y)

    def project(self, points):
        """World points (N, 3) -> (screen xy (N, 2), depth (N,))."""
        right, up, fwd = self.basis()
        rel = np.asarray(points, float) - np.asarray(self.eye, float)
        xc, yc, zc = rel @ right, rel @ up, rel @ fwd
        with np.errstate(divide="ignore", invalid="ignore"):
            sx = 0.5 * self.width + self.focal * xc / zc
            sy = 0.5 * self.height - self.focal * yc / zc
        return np.stack([sx, sy], axis=-1), zc

    def unproject(self, xy, depth):
        """Inverse of ``project`` for screen xy at the given depth."""
        right, up, fwd = self.basis()
        xy = np.asarray(xy, float)
        depth = np.asarray(depth, float)
        xc = (xy[..., 0] - 0.5 * self.width) * depth / self.focal
        yc = -(xy[..., 1] - 0.5 * self.height) * depth / self.focal
        return (np.asarray(self.eye, float) + xc[..., None] * right + yc[..., None] * up
                + depth[..., None] * fwd)

    def to_dict(self):
        return {"eye": list(self.eye), "look_at": list(self.look_at), "up": list(self.up),
                "fov_y": self.fov_y, "height": self.height, "width": self.width}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["eye"]), tuple(d["look_at"]), tuple(d["up"]), float(d["fov_y"]),
                   int(d["height"]), int(d["width"]))


@dataclass
class UVRasterBuffer:
    uv: np.ndarray          # (H, W, 2)
    normal: np.ndarray      # (H, W, 3)
    depth: np.ndarray       # (H, W)
    mask: np.ndarray        # (H, W) in {0, 1}
    face_index: np.ndarray  # (H, W), -1 where uncovered

    @property
    def shape(self):
        return self.mask.shape


# ---------------------------------------------------------------- mesh ops

def build_face_mesh(shape_params, expr_params, model: BlendshapeModel) -> FaceMesh:
    a_s = np.asarray(shape_params, dtype=np.float64)
    a_e = np.asarray(expr_params, dtype=np.float64)
    if a_s.shape != (model.shape_basis.shape[2],):
        raise ParameterError(f"shape_params must have {model.shape_basis.shape[2]} entries, got {a_s.shape}")
    if a_e.shape != (model.expr_basis.shape[2],):
        raise ParameterError(f"expr_params must have {model.expr_basis.shape[2]} entries, got {a_e.shape}")
    verts = model.mean + model.shape_basis @ a_s + model.expr_basis @ a_e
    return FaceMesh(verts, model.faces, model.uv, a_s.copy(), a_e.copy())


def vertex_normals(mesh: FaceMesh) -> np.ndarray:
    """Area-weighted vertex normals (unnormalised face cross products are 2x area)."""
    v = mesh.vertices
    f = mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    bad = norm <= 1e-12
    if np.any(bad):
        logger.warning("%d degenerate vertices with zero normal; using +z", int(bad.sum()))
        acc[bad] = (0.0, 0.0, 1.0)
        norm[bad] = 1.0
    return acc / norm[:, None]


def bilinear_sample(data, uv):
    """Bilinearly sample ``data`` (H, W) or (C, H, W) at ``uv`` (..., 2), clamp-to-edge."""
    arr = np.asarray(data)
    h, w = arr.shape[-2:]
    uv = np.asarray(uv, dtype=np.float64)
    x = uv[..., 0] * w - 0.5
    y = uv[..., 1] * h - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    ya, yb = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    arr = arr.astype(np.float64)
    return ((1 - fx) * (1 - fy) * arr[..., ya, xa] + fx * (1 - fy) * arr[..., ya, xb]
            + (1 - fx) * fy * arr[..., yb, xa] + fx * fy * arr[..., yb, xb])


def apply_detail_displacement(mesh: FaceMesh, details: DetailMap) -> FaceMesh:
    d = bilinear_sample(details.data, mesh.uv)
    n = vertex_normals(mesh)
    return FaceMesh(mesh.vertices + d[:, None] * n, mesh.faces, mesh.uv,
                    mesh.shape_params, mesh.expr_params)


# ---------------------------------------------------------------- rasterization

def _raster_fragments(xy, depth, faces, height, width, perspective):
    """Coverage test for all triangles.

    Returns per-fragment arrays (pixel id, face id, interpolation weights, depth).
    Pixel-centre sampling with a top-left rule on shared edges; both windings
    are rasterized.
    """
    tri_xy = xy[faces]              # (T, 3, 2)
    tri_z = depth[faces]            # (T, 3)
    v0, v1, v2 = tri_xy[:, 0], tri_xy[:, 1], tri_xy[:, 2]
    area2 = ((v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1])
             - (v1[:, 1] - v0[:, 1]) * (v2[:, 0] - v0[:, 0]))
    valid = np.isfinite(tri_xy).all(axis=(1, 2)) & (area2 != 0)
    if perspective:
        valid &= (tri_z > NEAR_PLANE).all(axis=1)
    with np.errstate(invalid="ignore"):
        lo = np.min(tri_xy, axis=1)
        hi = np.max(tri_xy, axis=1)
        xmin = np.ceil(lo[:, 0] - 0.5)
        ymin = np.ceil(lo[:, 1] - 0.5)
        xmax = np.floor(hi[:, 0] - 0.5)
        ymax = np.floor(hi[:, 1] - 0.5)
    valid &= (xmax >= 0) & (ymax >= 0) & (xmin <= width - 1) & (ymin <= height - 1)
    tris = np.nonzero(valid)[0]
    xmin = np.clip(xmin[tris], 0, width - 1).astype(np.int64)
    ymin = np.clip(ymin[tris], 0, height - 1).astype(np.int64)
    xmax = np.clip(xmax[tris], 0, width - 1).astype(np.int64)
    ymax = np.clip(ymax[tris], 0, height - 1).astype(np.int64)
    bw = xmax - xmin + 1
    bh = ymax - ymin + 1
    ok = (bw > 0) & (bh > 0)
    tris, xmin, ymin, bw, bh = tris[ok], xmin[ok], ymin[ok], bw[ok], bh[ok]

    order = np.argsort(bw * bh, kind="stable")
    out = []
    start = 0
    while start < len(order):
        stop = start + 1
        while stop < len(order):
            cells = int(bw[order[stop]] * bh[order[stop]])
            if (stop - start + 1) * cells > _CANDIDATE_BUDGET:
                break
            stop += 1
        sel = order[start:stop]
        out.append(_fragments_chunk(tri_xy, tri_z, area2, tris[sel], xmin[sel], ymin[sel],
                                    int(bw[sel].max()), int(bh[sel].max()),
                                    bw[sel], bh[sel], width, perspective))
        start = stop
    if not out:
        empty = np.zeros(0, np.int64)
        return empty, empty, np.zeros((0, 3)), np.zeros(0)
    return tuple(np.concatenate(parts) for parts in zip(*out))


def _fragments_chunk(tri_xy, tri_z, area2, tris, xmin, ymin, max_w, max_h, bw, bh, width, perspective):
    oy, ox = np.divmod(np.arange(max_w * max_h), max_w)
    px = xmin[:, None] + ox[None]
    py = ymin[:, None] + oy[None]
    inside_box = (ox[None] < bw[:, None]) & (oy[None] < bh[:, None])
    cx = px + 0.5
    cy = py + 0.5
    t_xy = tri_xy[tris]
    sign = np.sign(area2[tris])[:, None]
    covered = inside_box.copy()
    edges = []
    for k in range(3):
        a = t_xy[:, (k + 1) % 3]
        b = t_xy[:, (k + 2) % 3]
        ex = (b[:, 0] - a[:, 0])[:, None]
        ey = (b[:, 1] - a[:, 1])[:, None]
        e = ex * (cy - a[:, 1][:, None]) - ey * (cx - a[:, 0][:, None])
        se = sign * e
        gx = -sign * ey
        gy = sign * ex
        top_left = (gx > 0) | ((gx == 0) & (gy > 0))
        covered &= (se > 0) | ((se == 0) & top_left)
        edges.append(e)
    ti, ci = np.nonzero(covered)
    bary = np.stack([edges[k][ti, ci] for k in range(3)], axis=1) / area2[tris][ti][:, None]
    z = tri_z[tris][ti]
    if perspective:
        w = bary / z
        inv = w.sum(axis=1)
        frag_depth = 1.0 / inv
        weights = w / inv[:, None]
    else:
        weights = bary
        frag_depth = (bary * z).sum(axis=1)
    pix = py[ti, ci] * width + px[ti, ci]
    return pix, tris[ti], weights, frag_depth


def _resolve(pix, face, weights, depth):
    """Z-buffer: nearest fragment per pixel, ties broken by lower face index."""
    order = np.lexsort((face, depth, pix))
    pix, face, weights, depth = pix[order], face[order], weights[order], depth[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    return pix[first], face[first], weights[first], depth[first]


def _fill_buffer(mesh, normals, height, width, pix, face, weights, depth):
    uv = np.zeros((height * width, 2))
    nrm = np.zeros((height * width, 3))
    dep = np.zeros(height * width)
    mask = np.zeros(height * width)
    fidx = np.full(height * width, -1, dtype=np.int64)
    corners = mesh.faces[face]  # (N, 3)
    uv[pix] = np.einsum("nk,nkc->nc", weights, mesh.uv[corners])
    n = np.einsum("nk,nkc->nc", weights, normals[corners])
    length = np.linalg.norm(n, axis=1)
    degenerate = length <= 1e-12
    n[degenerate] = (0.0, 0.0, 1.0)
    length[degenerate] = 1.0
    nrm[pix] = n / length[:, None]
    dep[pix] = depth
    mask[pix] = 1.0
    fidx[pix] = face
    return UVRasterBuffer(
        uv=uv.reshape(height, width, 2).astype(np.float32),
        normal=nrm.reshape(height, width, 3).astype(np.float32),
        depth=dep.reshape(height, width).astype(np.float32),
        mask=mask.reshape(height, width).astype(np.float32),
        face_index=fidx.reshape(height, width),
    )


def rasterize_uv(mesh: FaceMesh, camera: Camera) -> UVRasterBuffer:
    """Perspective rasterization with perspective-correct uv/normal interpolation."""
    if len(mesh.faces) == 0:
        raise ParameterError("mesh has no faces")
    xy, depth = camera.project(mesh.vertices)
    frags = _raster_fragments(xy, depth, mesh.faces, camera.height, camera.width, perspective=True)
    normals = vertex_normals(mesh)
    return _fill_buffer(mesh, normals, camera.height, camera.width, *_resolve(*frags))


def rasterize_texture_space(mesh: FaceMesh, height: int, width: int) -> UVRasterBuffer:
    """Rasterize the mesh in its own UV layout (one pixel per texel).

    Gives world-space normals at texel centres, used to bake shading into
    UV textures.
    """
    xy = mesh.uv * np.array([width, height], dtype=np.float64)
    frags = _raster_fragments(xy, np.ones(len(mesh.uv)), mesh.faces, height, width, perspective=False)
    normals = vertex_normals(mesh)
    return _fill_buffer(mesh, normals, height, width, *_resolve(*frags))


# ---------------------------------------------------------------- texture sampling

def sampling_weights(raster: UVRasterBuffer, tex_height: int, tex_width: int):
    """Texel indices (4, P) and bilinear weights (4, P) for each screen pixel.

    Uncovered pixels get zero weights.
    """
    uv = raster.uv.reshape(-1, 2).astype(np.float64)
    mask = raster.mask.reshape(-1).astype(np.float64)
    x = uv[:, 0] * tex_width - 0.5
    y = uv[:, 1] * tex_height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa, xb = np.clip(x0, 0, tex_width - 1), np.clip(x0 + 1, 0, tex_width - 1)
    ya, yb = np.clip(y0, 0, tex_height - 1), np.clip(y0 + 1, 0, tex_height - 1)
    index = np.stack([ya * tex_width + xa, ya * tex_width + xb, yb * tex_width + xa, yb * tex_width + xb])
    weight = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]) * mask[None]
    index = np.where(mask[None] > 0, index, 0)
    return index, weight


def gather_texels(texture: torch.Tensor, index: torch.Tensor, weight: torch.Tensor, height: int, width: int):
    """Differentiable gather-and-blend.

    texture (B, C, Ht, Wt); index/weight (B, 4, P) -> (B, C, height, width).
    """
    b, c = texture.shape[:2]
    flat = texture.reshape(b, c, -1)
    out = None
    for k in range(4):
        idx = index[:, k].unsqueeze(1).expand(b, c, -1)
        term = torch.gather(flat, 2, idx) * weight[:, k].unsqueeze(1)
        out = term if out is None else out + term
    return out.reshape(b, c, height, width)


def sample_screen(texture, raster):
    """Sample a UV texture into screen space through a raster buffer.

    ``texture`` is a (C, Ht, Wt) tensor/array, or (B, C, Ht, Wt) with a list of
    B rasters. Returns a tensor; gradients flow to the texture only.
    """
    tex = torch.as_tensor(texture)
    single = tex.dim() == 3
    rasters = [raster] if single else list(raster)
    if single:
        tex = tex.unsqueeze(0)
    if len(rasters) != tex.shape[0]:
        raise ParameterError("need one raster per texture in the batch")
    ht, wt = tex.shape[-2:]
    idx, w = zip(*(sampling_weights(r, ht, wt) for r in rasters))
    index = torch.as_tensor(np.stack(idx))
    weight = torch.as_tensor(np.stack(w), dtype=tex.dtype)
    h, wd = rasters[0].shape
    out = gather_texels(tex, index, weight, h, wd)
    return out[0] if single else out


# ---------------------------------------------------------------- persistence

def save_detail_map(path, details: DetailMap):
    path = Path(path)
    write_pfm(path, details.data)
    write_json(path.with_suffix(".json"), {
        "resolution": details.resolution,
        "displacement_cap": details.cap,
        "shape": list(details.shape),
    })


def load_detail_map(path) -> DetailMap:
    path = Path(path)
    data = read_pfm(path)
    if data.ndim != 2:
        raise ParameterError(f"{path}: detail map must be single-channel")
    sidecar = path.with_suffix(".json")
    meta = read_json(sidecar) if sidecar.exists() else {}
    return DetailMap(data, meta.get("resolution", "train"), float(meta.get("displacement_cap", DISPLACEMENT_CAP)))


def save_raster(stem, raster: UVRasterBuffer):
    """Write ``<stem>_{uv,normal,depth,mask}.pfm`` plus ``<stem>.json``."""
    stem = Path(stem)
    h, w = raster.shape
    uv3 = np.concatenate([raster.uv, np.zeros((h, w, 1), np.float32)], axis=-1)
    write_pfm(f"{stem}_uv.pfm", uv3)
    write_pfm(f"{stem}_normal.pfm", raster.normal)
    write_pfm(f"{stem}_depth.pfm", raster.depth)
    write_pfm(f"{stem}_mask.pfm", raster.mask)
    write_json(f"{stem}.json", {"height": h, "width": w, "kind": "uv_raster"})


def load_raster(stem) -> UVRasterBuffer:
    uv = read_pfm(f"{stem}_uv.pfm")[..., :2]
    mask = read_pfm(f"{stem}_mask.pfm")
    return UVRasterBuffer(uv=uv.copy(), normal=read_pfm(f"{stem}_normal.pfm"),
                          depth=read_pfm(f"{stem}_depth.pfm"), mask=mask,
                          face_index=np.full(mask.shape, -1, dtype=np.int64))
