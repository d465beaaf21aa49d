import itertools
from pathlib import Path

import numpy as np
import pytest

from facedet3d import synthdata as sd
from facedet3d.facegeom import DetailMap, apply_detail_displacement, rasterize_uv
from facedet3d.shading import LightCoeffs, augment_wrinkles, shading_map

Y00 = 0.2820948


def _identity(k=0):
    return sd.sample_identity(sd.identity_seed(11, k))


# ---------------------------------------------------------------- identities

def test_identity_is_seed_deterministic():
    a, b = sd.sample_identity(123), sd.sample_identity(123)
    assert np.array_equal(a.base_detail.data, b.base_detail.data)
    assert np.array_equal(a.id_embedding, b.id_embedding)
    assert np.array_equal(a.albedo_params, b.albedo_params)
    assert np.array_equal(a.shape_params, b.shape_params)
    assert a.age == b.age and a.mottle_seed == b.mottle_seed


def test_embeddings_of_different_identities_are_dissimilar():
    cos = []
    for k in range(100):
        a, b = sd.sample_identity(2 * k), sd.sample_identity(2 * k + 1)
        cos.append(float(a.id_embedding @ b.id_embedding))
    assert np.mean(cos) < 0.5
    assert np.mean(np.abs(cos)) < 0.5


def test_base_detail_amplitude_scales_with_age():
    young, old = sd.sample_identity(5, age=0.0), sd.sample_identity(5, age=1.0)
    nz = np.abs(old.base_detail.data) > 1e-5
    ratio = young.base_detail.data[nz] / old.base_detail.data[nz]
    assert np.allclose(ratio, 0.3, rtol=1e-5)


def test_surrogate_embeddings():
    ident = _identity()
    assert np.array_equal(sd.surrogate_face_embed(ident), sd.surrogate_face_embed(_identity()))
    assert np.array_equal(sd.surrogate_age_embed(ident), sd.surrogate_age_embed(_identity()))
    assert abs(np.linalg.norm(sd.surrogate_face_embed(ident)) - 1.0) < 1e-6
    assert sd.surrogate_face_embed(ident).shape == (128,) and sd.surrogate_age_embed(ident).shape == (32,)
    first = [sd.surrogate_age_embed(sd.sample_identity(9, age=a))[0] for a in np.linspace(0, 1, 11)]
    assert np.all(np.diff(first) > 0)


# ---------------------------------------------------------------- oracle detail maps

def test_zero_activation_is_base_detail():
    ident = _identity()
    assert np.array_equal(sd.oracle_detail_map(ident, np.zeros(17)).data, ident.base_detail.data)


def test_linear_in_each_au_below_cap():
    ident = _identity(1)
    d0 = sd.oracle_detail_map(ident, np.zeros(17)).data.astype(np.float64)
    for k in range(17):
        au = np.zeros(17)
        au[k] = 0.3
        d1 = sd.oracle_detail_map(ident, au).data.astype(np.float64)
        d2 = sd.oracle_detail_map(ident, 2 * au).data.astype(np.float64)
        unclipped = np.abs(d2) < 0.1 - 1e-6
        assert np.abs((d2 - d0) - 2 * (d1 - d0))[unclipped].max() < 1e-7


def _region_oracle(res):
    """Rectangle masks rebuilt from the AU table, texel centres at (j + 0.5) / res."""
    t = (np.arange(res) + 0.5) / res
    masks = np.zeros((17, res, res), bool)
    for k, (cu, cv, hw, hh, *_) in enumerate(sd.AU_REGIONS):
        for i in range(res):
            for j in range(res):
                masks[k, i, j] = abs(t[j] - cu) < hw and abs(t[i] - cv) < hh
    return masks


def test_au_energy_stays_in_its_region():
    ident = _identity(2)
    masks = _region_oracle(64)
    d0 = sd.oracle_detail_map(ident, np.zeros(17), age=0.5).data.astype(np.float64)
    for k in range(17):
        au = np.zeros(17)
        au[k] = 1.0
        delta = sd.oracle_detail_map(ident, au, age=0.5).data.astype(np.float64) - d0
        inside = (delta[masks[k]] ** 2).sum()
        outside = (delta[~masks[k]] ** 2).sum()
        assert inside > 0 and outside < 0.01 * inside, k


def test_au_groups_follow_face_anatomy():
    v = (np.arange(64) + 0.5) / 64
    fields = sd.au_pattern_fields(sd.texel_uv(64))
    centroid = [(np.abs(f).sum(1) * v).sum() / np.abs(f).sum() for f in fields]
    assert max(centroid[:5]) < min(centroid[5:12])
    assert max(centroid[5:12]) < min(centroid[12:])


def test_expression_separability():
    idents = [_identity(k) for k in range(6)]
    rng = np.random.default_rng(0)
    aus = [sd.sample_expression(rng).au for _ in range(8)]

    def component(ident, au):
        return (sd.oracle_detail_map(ident, au).data.astype(np.float64)
                - sd.oracle_detail_map(ident, np.zeros(17)).data.astype(np.float64))

    comps = [[component(i, a) for a in aus] for i in idents]
    distinct = [np.abs(c[a] - c[b]).mean() for c in comps for a, b in itertools.combinations(range(8), 2)
                if np.linalg.norm(aus[a] - aus[b]) >= 0.5]
    same = [np.abs(comps[i][a] - comps[j][a]).mean() for a in range(8)
            for i, j in itertools.combinations(range(6), 2)]
    assert len(distinct) > 10
    assert np.mean(distinct) > 3 * np.mean(same)


# ---------------------------------------------------------------- classical render

def test_dc_light_renders_scaled_albedo():
    ident = _identity(3)
    rng = np.random.default_rng(3)
    expr = sd.sample_expression(rng)
    cam = sd.sample_camera(rng)
    light = LightCoeffs([2.5] + [0.0] * 8)
    image, raster = sd.render_classical(ident, sd.face_mesh(ident, expr), sd.oracle_detail_map(ident, expr.au),
                                        cam, light)
    ref = np.clip(sd.true_albedo(ident, raster.uv) * 2.5 * Y00, 0, 1) * raster.mask[None]
    assert np.abs(image - ref).max() < 1e-5
    assert np.array_equal(image, sd.render_ground_truth(ident, expr, cam, light))


def test_ridges_change_image_only_near_their_projection():
    ident = _identity(4)
    neutral = sd.expression_from_au(np.zeros(17))
    mesh = sd.face_mesh(ident, neutral)
    cam = sd.Camera.orbit(0.0, 0.0, size=64)
    light = LightCoeffs.directional([0.4, 0.3, 1.0], 3.0, 0.1)
    base = DetailMap.zeros(64)
    k = 8  # left cheek
    au = np.zeros(17)
    au[k] = 1.0
    ridged = DetailMap.clipped(sd.oracle_detail_map(ident, au, age=0.5).data
                               - sd.oracle_detail_map(ident, np.zeros(17), age=0.5).data)
    img0, raster = sd.render_classical(ident, mesh, base, cam, light)
    img1, _ = sd.render_classical(ident, mesh, ridged, cam, light)
    cu, cv, hw, hh, *_ = sd.AU_REGIONS[k]
    margin = 2.0 / 64  # vertex normals blend one grid ring beyond the rectangle
    u, v = raster.uv[..., 0], raster.uv[..., 1]
    band = (np.abs(u - cu) < hw + margin) & (np.abs(v - cv) < hh + margin)
    outside = (raster.mask > 0) & ~band
    diff = np.abs(img1 - img0).mean(0)
    assert diff[band & (raster.mask > 0)].mean() > 1e-2
    assert diff[outside].mean() < 1e-3


# ---------------------------------------------------------------- samples and datasets

def test_sample_image_is_ground_truth_render(small_samples):
    s = small_samples[0]
    assert np.array_equal(s.image, sd.render_ground_truth(s.identity, s.tgt, s.camera, s.light))
    assert np.array_equal(s.detail_tgt.data, sd.oracle_detail_map(s.identity, s.tgt.au).data)


def test_end_to_end_augmentation_round_trip(small_samples):
    for s in small_samples:
        mesh = apply_detail_displacement(sd.face_mesh(s.identity, s.tgt), s.detail_tgt)
        shade = shading_map(rasterize_uv(mesh, s.camera), s.light)
        assert np.array_equal(augment_wrinkles(s.image, shade, shade), s.image)


def _tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_make_dataset_counts_and_regeneration(tmp_path):
    m1 = sd.make_dataset(4, 2, 7, tmp_path / "a")
    sd.make_dataset(4, 2, 7, tmp_path / "b")
    assert len(m1["samples"]) == 8
    assert (tmp_path / "a" / "manifest.json").exists()
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    for entry in m1["samples"]:
        d = tmp_path / "a" / entry["dir"]
        for name in ("image.png", "texture.png", "detail_src.pfm", "detail_tgt.pfm", "meta.json"):
            assert (d / name).exists()


def test_split_is_disjoint_by_identity(tmp_path):
    m = sd.make_dataset(4, 2, 3, tmp_path, n_heldout=1)
    train = {e["identity_seed"] for e in m["samples"] if e["split"] == "train"}
    held = {e["identity_seed"] for e in m["samples"] if e["split"] == "heldout"}
    assert len(train) == 3 and len(held) == 1 and not train & held


def test_load_dataset_round_trip(tmp_path):
    sd.make_dataset(2, 1, 5, tmp_path)
    loaded, config = sd.load_dataset(tmp_path)
    fresh = sd.generate_samples(2, 1, 5)
    assert config == sd.SynthConfig()
    for a, b in zip(loaded, fresh):
        assert np.array_equal(a.detail_tgt.data, b.detail_tgt.data)
        assert np.array_equal(a.tgt.au, b.tgt.au)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


def test_generation_is_deterministic():
    a, b = sd.generate_samples(1, 2, 9), sd.generate_samples(1, 2, 9)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.texture, y.texture)


@pytest.mark.parametrize("n_heldout", [0, 1])
def test_generate_samples_split_rule(n_heldout):
    samples = sd.generate_samples(2, 1, 0, n_heldout=n_heldout)
    assert [s.split for s in samples] == ["train"] * (2 - n_heldout) + ["heldout"] * n_heldout
