"""Deterministic synthetic faces: identities, expression-driven wrinkle maps, textures and photos.

Generation recipe (all fields derive from ``SynthConfig.pattern_seed`` plus a
per-identity seed, so any implementation following it reproduces the oracle):

* Value noise: lattice of ``g * 2**o + 1`` uniform(-1, 1) values per octave
  ``o < 3`` (base lattice ``g``), smoothstep-interpolated, octave amplitudes
  ``0.5**o``, normalised by the sum of amplitudes.
* Base detail: ``base_amplitude * (0.3 + 0.7 * age) * (z . B(uv)) / sqrt(K)``
  with ``K`` unit-variance value-noise fields ``B`` and a latent ``z`` of norm
  ``sqrt(K)``.
* Expression detail: ``sum_k au_k * (0.75 + 0.5 * age) * ridge_amplitude * P_k(uv)``
  where ``P_k`` is a sinusoidal ridge field under a compact cos^2 window on the
  rectangle listed in ``AU_REGIONS``.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import AGE_DIM, ALBEDO_DIM, AU_DIM, DISPLACEMENT_CAP, EXPR_DIM, ID_DIM, SHAPE_DIM
from .detailnet import ExpressionTarget, SubjectFeatures
from .facegeom import (BlendshapeModel, Camera, DetailMap, FaceMesh, apply_detail_displacement,
                       build_face_mesh, rasterize_texture_space, rasterize_uv, save_detail_map)
from .io import write_json, write_png
from .shading import LightCoeffs, shade_normals, shading_map

# (centre u, centre v, half width, half height, ridge angle [rad], cycles per uv unit, phase)
# Rows 0-4 upper face, 5-11 mid face / cheeks, 12-16 mouth region. v grows downwards.
AU_REGIONS = np.array([
    (0.50, 0.12, 0.18, 0.08, np.pi / 2, 7.2, 0.0),   # forehead, horizontal ridges
    (0.50, 0.22, 0.32, 0.07, np.pi / 2, 6.4, 1.0),   # brows outer
    (0.50, 0.30, 0.09, 0.08, 0.0, 8.0, 0.5),         # glabella, vertical ridges
    (0.28, 0.33, 0.10, 0.06, np.pi / 2, 8.0, 0.0),   # left lid
    (0.72, 0.33, 0.10, 0.06, np.pi / 2, 8.0, 0.0),   # right lid
    (0.18, 0.45, 0.10, 0.10, np.pi / 4, 7.2, 0.0),   # left crow's feet
    (0.82, 0.45, 0.10, 0.10, -np.pi / 4, 7.2, 0.0),  # right crow's feet
    (0.50, 0.45, 0.07, 0.09, np.pi / 2, 8.0, 0.3),   # nose bridge
    (0.30, 0.58, 0.12, 0.10, np.pi / 3, 6.4, 0.0),   # left cheek
    (0.70, 0.58, 0.12, 0.10, -np.pi / 3, 6.4, 0.0),  # right cheek
    (0.36, 0.66, 0.08, 0.12, np.pi / 6, 6.4, 0.8),   # left nasolabial
    (0.64, 0.66, 0.08, 0.12, -np.pi / 6, 6.4, 0.8),  # right nasolabial
    (0.50, 0.76, 0.16, 0.05, np.pi / 2, 8.0, 0.0),   # upper lip
    (0.50, 0.86, 0.16, 0.05, np.pi / 2, 8.0, 0.0),   # lower lip
    (0.50, 0.94, 0.12, 0.05, 0.0, 8.0, 0.4),         # chin
    (0.30, 0.82, 0.08, 0.10, np.pi / 2.5, 7.2, 0.0), # left mouth corner
    (0.70, 0.82, 0.08, 0.10, -np.pi / 2.5, 7.2, 0.0),# right mouth corner
])
assert AU_REGIONS.shape[0] == AU_DIM

SKIN_RGB = np.array([0.62, 0.45, 0.36])


@dataclass(frozen=True)
class SynthConfig:
    pattern_seed: int = 20201214
    model_seed: int = 7
    grid_size: int = 64
    detail_res: int = 64
    full_res: int = 256
    image_res: int = 64
    texture_res: int = 64
    latent_dim: int = 16
    noise_grid: int = 4
    base_amplitude: float = 0.006
    ridge_amplitude: float = 0.06
    au_active_prob: float = 0.35
    camera_jitter: float = 0.1
    displacement_cap: float = DISPLACEMENT_CAP

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- value noise

def value_noise_lattices(rng, grid, octaves=3):
    return [rng.uniform(-1.0, 1.0, size=(grid * 2**o + 1, grid * 2**o + 1)) for o in range(octaves)]


def value_noise_at(lattices, uv, persistence=0.5):
    """Evaluate multi-octave value noise at ``uv`` (..., 2) in [0, 1]^2."""
    uv = np.asarray(uv, dtype=np.float64)
    total = np.zeros(uv.shape[:-1])
    norm = 0.0
    for o, lat in enumerate(lattices):
        g = lat.shape[0] - 1
        x = np.clip(uv[..., 0], 0.0, 1.0) * g
        y = np.clip(uv[..., 1], 0.0, 1.0) * g
        x0 = np.minimum(np.floor(x).astype(np.int64), g - 1)
        y0 = np.minimum(np.floor(y).astype(np.int64), g - 1)
        tx, ty = x - x0, y - y0
        sx, sy = tx * tx * (3 - 2 * tx), ty * ty * (3 - 2 * ty)
        v = ((1 - sx) * (1 - sy) * lat[y0, x0] + sx * (1 - sy) * lat[y0, x0 + 1]
             + (1 - sx) * sy * lat[y0 + 1, x0] + sx * sy * lat[y0 + 1, x0 + 1])
        amp = persistence**o
        total += amp * v
        norm += amp
    return total / norm


def texel_uv(res):
    t = (np.arange(res) + 0.5) / res
    uu, vv = np.meshgrid(t, t)
    return np.stack([uu, vv], axis=-1)


# ---------------------------------------------------------------- universe (fixed patterns)

class Universe:
    """Everything fixed by the pattern seed: noise bases, AU patterns, projections, face model."""

    def __init__(self, config: SynthConfig):
        self.config = c = config
        rng = np.random.default_rng(c.pattern_seed)
        self.noise_basis = [value_noise_lattices(rng, c.noise_grid) for _ in range(c.latent_dim)]
        ref = texel_uv(128)
        self.noise_std = np.array([value_noise_at(lat, ref).std() for lat in self.noise_basis])
        self.id_projection = rng.normal(size=(ID_DIM, c.latent_dim))
        self.age_projection = rng.normal(size=(AGE_DIM - 1, 5))
        self.au_to_expr = rng.normal(scale=0.6, size=(EXPR_DIM, AU_DIM))
        self.albedo_colors = rng.normal(scale=0.025, size=(ALBEDO_DIM, 3))
        self.albedo_freqs = rng.integers(0, 3, size=(ALBEDO_DIM, 2))
        self.model = BlendshapeModel.toy(c.model_seed, c.grid_size)
        self._cache = {}

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def basis_fields(self, res):
        def build():
            uv = texel_uv(res)
            return np.stack([value_noise_at(lat, uv) / s for lat, s in zip(self.noise_basis, self.noise_std)])
        return self._cached(("basis", res), build)

    def au_patterns(self, res):
        return self._cached(("au", res), lambda: au_pattern_fields(texel_uv(res)))


def au_pattern_fields(uv):
    """(AU_DIM, ...) unit-amplitude ridge fields, exactly zero outside their rectangles."""
    u, v = uv[..., 0], uv[..., 1]
    out = []
    for cu, cv, hw, hh, ang, freq, phase in AU_REGIONS:
        du, dv = u - cu, v - cv
        inside = (np.abs(du) < hw) & (np.abs(dv) < hh)
        win = np.cos(0.5 * np.pi * du / hw) ** 2 * np.cos(0.5 * np.pi * dv / hh) ** 2
        ridge = np.sin(2 * np.pi * freq * (np.cos(ang) * du + np.sin(ang) * dv) + phase)
        out.append(np.where(inside, win * ridge, 0.0))
    return np.stack(out)


def au_region_masks(uv):
    u, v = uv[..., 0], uv[..., 1]
    return np.stack([(np.abs(u - cu) < hw) & (np.abs(v - cv) < hh)
                     for cu, cv, hw, hh, *_ in AU_REGIONS])


@functools.lru_cache(maxsize=4)
def get_universe(config: SynthConfig = SynthConfig()) -> Universe:
    return Universe(config)


# ---------------------------------------------------------------- identities

@dataclass
class IdentitySpec:
    seed: int
    base_detail: DetailMap
    albedo_params: np.ndarray
    age: float
    id_embedding: np.ndarray
    shape_params: np.ndarray
    latent: np.ndarray
    mottle_seed: int

    def subject_features(self, config: SynthConfig = SynthConfig()):
        return SubjectFeatures(self.id_embedding, surrogate_age_embed(self, config))


def _base_detail(universe, latent, age, res):
    c = universe.config
    field = np.tensordot(latent, universe.basis_fields(res), axes=1) / np.sqrt(c.latent_dim)
    return c.base_amplitude * (0.3 + 0.7 * age) * field


def sample_identity(seed, config: SynthConfig = SynthConfig(), age=None) -> IdentitySpec:
    """All identity attributes are functions of ``seed`` (``age`` may be overridden)."""
    u = get_universe(config)
    rng = np.random.default_rng([int(seed), 0xFACE])
    drawn_age = float(rng.uniform(0.0, 1.0))
    age = drawn_age if age is None else float(age)
    z = rng.normal(size=config.latent_dim)
    z *= np.sqrt(config.latent_dim) / np.linalg.norm(z)
    gamma = rng.normal(scale=0.7, size=ALBEDO_DIM)
    shape = rng.normal(scale=0.6, size=SHAPE_DIM)
    mottle_seed = int(rng.integers(0, 2**31 - 1))
    base = DetailMap.clipped(_base_detail(u, z, age, config.detail_res), cap=config.displacement_cap)
    emb = u.id_projection @ z
    return IdentitySpec(int(seed), base, gamma, age, emb / np.linalg.norm(emb), shape, z, mottle_seed)


def surrogate_face_embed(identity: IdentitySpec, config: SynthConfig = SynthConfig()):
    emb = get_universe(config).id_projection @ identity.latent
    return (emb / np.linalg.norm(emb)).astype(np.float32)


def surrogate_age_embed(identity: IdentitySpec, config: SynthConfig = SynthConfig()):
    """First coordinate is the age itself; the rest mix age with the identity latent."""
    u = get_universe(config)
    inp = np.concatenate([[2.0 * identity.age - 1.0], 0.5 * identity.latent[:4]])
    return np.concatenate([[identity.age], np.tanh(u.age_projection @ inp)]).astype(np.float32)


def age_gain(age):
    return 0.75 + 0.5 * age


def oracle_detail_map(identity: IdentitySpec, au, age=None, config: SynthConfig = SynthConfig(),
                      resolution="train") -> DetailMap:
    u = get_universe(config)
    age = identity.age if age is None else float(age)
    res = config.detail_res if resolution == "train" else config.full_res
    au = np.asarray(au, dtype=np.float64)
    if res == identity.base_detail.shape[0] and age == identity.age:
        base = identity.base_detail.data.astype(np.float64)
    else:
        base = _base_detail(u, identity.latent, age, res)
    expr = config.ridge_amplitude * age_gain(age) * np.tensordot(au, u.au_patterns(res), axes=1)
    return DetailMap.clipped(base + expr, resolution=resolution, cap=config.displacement_cap)


def expression_from_au(au, config: SynthConfig = SynthConfig()) -> ExpressionTarget:
    au = np.asarray(au, dtype=np.float64)
    return ExpressionTarget(au, get_universe(config).au_to_expr @ au)


def sample_expression(rng, config: SynthConfig = SynthConfig()) -> ExpressionTarget:
    active = rng.uniform(size=AU_DIM) < config.au_active_prob
    au = np.where(active, rng.uniform(0.2, 1.0, size=AU_DIM), 0.0)
    return expression_from_au(au, config)


def sample_light(rng) -> LightCoeffs:
    direction = [rng.uniform(-1.0, 1.0), rng.uniform(-0.3, 1.0), 1.0]
    light = LightCoeffs.directional(direction, rng.uniform(2.7, 3.6), rng.uniform(0.05, 0.15))
    return light.with_min_shading(0.05)


def sample_camera(rng, config: SynthConfig = SynthConfig()) -> Camera:
    j = config.camera_jitter
    return Camera.orbit(yaw=rng.uniform(-j, j), pitch=rng.uniform(-0.5 * j, 0.5 * j), size=config.image_res)


# ---------------------------------------------------------------- appearance

def smooth_albedo(gamma, uv, config: SynthConfig = SynthConfig()):
    """Low-frequency albedo (3, ...) spanned by the albedo parameters; what the renderer is told."""
    u = get_universe(config)
    uv = np.asarray(uv, dtype=np.float64)
    lead = (1,) * (uv.ndim - 1)
    out = np.broadcast_to(SKIN_RGB.reshape((3,) + lead), (3,) + uv.shape[:-1]).copy()
    for j in range(ALBEDO_DIM):
        fu, fv = u.albedo_freqs[j]
        field = np.cos(np.pi * fu * uv[..., 0]) * np.cos(np.pi * fv * uv[..., 1])
        out += gamma[j] * u.albedo_colors[j].reshape((3,) + lead) * field[None]
    return np.clip(out, 0.05, 0.95)


@functools.lru_cache(maxsize=256)
def _mottle_lattices(mottle_seed):
    return value_noise_lattices(np.random.default_rng(mottle_seed), 8)


def true_albedo(identity: IdentitySpec, uv, config: SynthConfig = SynthConfig()):
    """Smooth albedo times identity-specific skin mottling the renderer never sees directly."""
    mottle = 1.0 + 0.12 * value_noise_at(_mottle_lattices(identity.mottle_seed), uv)
    return np.clip(smooth_albedo(identity.albedo_params, uv, config) * mottle[None], 0.0, 1.0)


def face_mesh(identity: IdentitySpec, expr: ExpressionTarget, config: SynthConfig = SynthConfig()) -> FaceMesh:
    return build_face_mesh(identity.shape_params, expr.expr_params, get_universe(config).model)


def render_classical(identity, mesh: FaceMesh, details: DetailMap, camera: Camera, light: LightCoeffs,
                     config: SynthConfig = SynthConfig()):
    """Albedo times SH shading of the displaced mesh; black background. Returns (image, raster)."""
    detailed = apply_detail_displacement(mesh, details)
    raster = rasterize_uv(detailed, camera)
    shade = shading_map(raster, light)
    albedo = true_albedo(identity, raster.uv, config)
    image = np.clip(albedo * shade.data[None], 0.0, 1.0) * raster.mask[None]
    return image.astype(np.float32), raster


def render_ground_truth(identity: IdentitySpec, tgt: ExpressionTarget, camera: Camera, light: LightCoeffs,
                        config: SynthConfig = SynthConfig()):
    details = oracle_detail_map(identity, tgt.au, config=config)
    image, _ = render_classical(identity, face_mesh(identity, tgt, config), details, camera, light, config)
    return image


def bake_texture(identity, mesh: FaceMesh, details: DetailMap, light: LightCoeffs,
                 config: SynthConfig = SynthConfig()):
    """UV texture as a face-capture system would unwrap it: albedo with the lighting baked in."""
    res = config.texture_res
    raster = rasterize_texture_space(apply_detail_displacement(mesh, details), res, res)
    uv = texel_uv(res)
    shade = shade_normals(raster.normal.astype(np.float64), light) * raster.mask
    return np.clip(true_albedo(identity, uv, config) * shade[None], 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- samples & datasets

@dataclass
class Sample:
    identity: IdentitySpec
    src: ExpressionTarget
    tgt: ExpressionTarget
    detail_src: DetailMap
    detail_tgt: DetailMap
    texture: np.ndarray
    image: np.ndarray
    image_src: np.ndarray
    camera: Camera
    light: LightCoeffs
    split: str = "train"


def make_sample(identity: IdentitySpec, rng, config: SynthConfig = SynthConfig(), split="train") -> Sample:
    src = sample_expression(rng, config)
    tgt = sample_expression(rng, config)
    light = sample_light(rng)
    camera = sample_camera(rng, config)
    d_src = oracle_detail_map(identity, src.au, config=config)
    d_tgt = oracle_detail_map(identity, tgt.au, config=config)
    mesh_src = face_mesh(identity, src, config)
    image_src, _ = render_classical(identity, mesh_src, d_src, camera, light, config)
    image, _ = render_classical(identity, face_mesh(identity, tgt, config), d_tgt, camera, light, config)
    texture = bake_texture(identity, face_mesh(identity, tgt, config), d_tgt, light, config)
    return Sample(identity, src, tgt, d_src, d_tgt, texture, image, image_src, camera, light, split)


def identity_seed(dataset_seed, index):
    return int(np.random.SeedSequence([int(dataset_seed), int(index)]).generate_state(1)[0])


def generate_samples(n_identities, n_expr_per_id, seed, config: SynthConfig = SynthConfig(), n_heldout=0):
    """In-memory dataset; identities ``>= n_identities - n_heldout`` form the held-out split."""
    samples = []
    for i in range(n_identities):
        ident = sample_identity(identity_seed(seed, i), config)
        split = "heldout" if i >= n_identities - n_heldout else "train"
        for k in range(n_expr_per_id):
            rng = np.random.default_rng([int(seed), i, k])
            samples.append(make_sample(ident, rng, config, split))
    return samples


def sample_meta(s: Sample, config: SynthConfig = SynthConfig()):
    return {
        "identity_seed": s.identity.seed,
        "split": s.split,
        "age": s.identity.age,
        "albedo_params": s.identity.albedo_params.tolist(),
        "shape_params": s.identity.shape_params.tolist(),
        "src": s.src.to_dict(),
        "tgt": s.tgt.to_dict(),
        "camera": s.camera.to_dict(),
        "light": s.light.to_list(),
        "face_embedding": surrogate_face_embed(s.identity, config).tolist(),
        "age_embedding": surrogate_age_embed(s.identity, config).tolist(),
    }


def make_dataset(n_identities, n_expr_per_id, seed, out_dir, config: SynthConfig = SynthConfig(), n_heldout=0):
    """Write samples to ``out_dir`` and return the manifest (also written as manifest.json)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_samples(n_identities, n_expr_per_id, seed, config, n_heldout)
    entries = []
    for idx, s in enumerate(samples):
        rel = f"samples/{idx:04d}"
        d = out / rel
        d.mkdir(parents=True, exist_ok=True)
        write_png(d / "image.png", s.image)
        write_png(d / "image_src.png", s.image_src)
        write_png(d / "texture.png", s.texture)
        save_detail_map(d / "detail_src.pfm", s.detail_src)
        save_detail_map(d / "detail_tgt.pfm", s.detail_tgt)
        write_json(d / "meta.json", sample_meta(s, config))
        entries.append({"index": idx, "dir": rel, "identity_seed": s.identity.seed, "split": s.split})
    manifest = {
        "seed": int(seed),
        "n_identities": int(n_identities),
        "n_expr_per_id": int(n_expr_per_id),
        "n_heldout": int(n_heldout),
        "config": config.to_dict(),
        "samples": entries,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset(path):
    """Read a dataset directory back into Samples (images come from the PNGs)."""
    from .facegeom import load_detail_map
    from .io import read_json, read_png

    root = Path(path)
    manifest = read_json(root / "manifest.json")
    config = SynthConfig(**manifest["config"])
    samples = []
    for entry in manifest["samples"]:
        d = root / entry["dir"]
        meta = read_json(d / "meta.json")
        ident = sample_identity(meta["identity_seed"], config)
        samples.append(Sample(
            identity=ident,
            src=ExpressionTarget.from_dict(meta["src"]),
            tgt=ExpressionTarget.from_dict(meta["tgt"]),
            detail_src=load_detail_map(d / "detail_src.pfm"),
            detail_tgt=load_detail_map(d / "detail_tgt.pfm"),
            texture=read_png(d / "texture.png"),
            image=read_png(d / "image.png"),
            image_src=read_png(d / "image_src.png"),
            camera=Camera.from_dict(meta["camera"]),
            light=LightCoeffs(meta["light"]),
            split=meta["split"],
        ))
    return samples, config
