import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from facedet3d.detailnet import (AdaIN, DetP, DetPConfig, ExpressionTarget, SRConfig, SRNet, SubjectFeatures,
                                 adain, bicubic_upsample, combine_masked, detp_forward, sr_double, sr_forward)
from facedet3d.facegeom import DetailMap, ParameterError

DIMS = (17, 17, 8, 128, 32)


def _inputs(b=2, res=64, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    d_in = (torch.rand(b, 1, res, res, generator=g) - 0.5) * 0.1
    vecs = [torch.rand(b, n, generator=g) for n in DIMS]
    return [d_in.to(dtype)] + [v.to(dtype) for v in vecs]


def _small_config(**kw):
    return DetPConfig(detail_res=16, enc_widths=(4, 4, 4), dec_widths=(4, 4, 4), vec_channels=2,
                      refine_width=4, canvas_channels=2, style_dim=8, **kw)


# ---------------------------------------------------------------- combine_masked

def test_combine_masked_fixed_points():
    rng = np.random.default_rng(0)
    hal, base = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    assert np.array_equal(combine_masked(hal, np.zeros((8, 8)), base), base)
    assert np.array_equal(combine_masked(hal, np.ones((8, 8)), base), hal)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_combine_masked_matches_elementwise_oracle(seed):
    rng = np.random.default_rng(seed)
    hal, base, mask = rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), rng.uniform(size=(4, 5))
    out = combine_masked(hal, mask, base)
    for i in range(4):
        for j in range(5):
            assert abs(out[i, j] - (mask[i, j] * hal[i, j] + (1 - mask[i, j]) * base[i, j])) < 1e-7


def test_combine_masked_shape_mismatch():
    with pytest.raises(ParameterError):
        combine_masked(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))


# ---------------------------------------------------------------- adain

def test_adain_pure_normalisation():
    x = torch.randn(3, 6, 7, dtype=torch.float64) * 4 + 2
    out = adain(x, torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    assert out.mean(dim=(1, 2)).abs().max() < 1e-4
    assert (out.std(dim=(1, 2), unbiased=False) - 1).abs().max() < 1e-4


def test_adain_constant_channel_goes_to_shift():
    x = torch.full((2, 5, 5), 3.0)
    out = adain(x, torch.tensor([2.0, 0.5]), torch.tensor([0.7, -0.2]))
    assert torch.allclose(out[0], torch.full((5, 5), 0.7))
    assert torch.allclose(out[1], torch.full((5, 5), -0.2))


def test_adain_matches_statistics_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4, 4))
    scale, shift = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    out = adain(torch.as_tensor(x), torch.as_tensor(scale), torch.as_tensor(shift)).numpy()
    for b in range(2):
        for c in range(3):
            ch = x[b, c]
            ref = (ch - ch.mean()) / np.sqrt(ch.var() + 1e-5) * scale[b, c] + shift[b, c]
            assert np.abs(out[b, c] - ref).max() < 1e-5


def test_adain_module_identity_style():
    norm = AdaIN(4, 5)
    torch.nn.init.zeros_(norm.affine.weight)
    x = torch.randn(2, 4, 3, 3)
    out = norm(x, torch.randn(2, 5))
    assert torch.allclose(out, adain(x, torch.ones(2, 4), torch.zeros(2, 4)))


# ---------------------------------------------------------------- DetP

@pytest.fixture(scope="module")
def detp():
    torch.manual_seed(0)
    return DetP().eval()


def test_detp_shapes_and_mask_range(detp):
    with torch.no_grad():
        out = detp(*_inputs())
    for f in ("coarse_hal", "coarse_mask", "fine_hal", "fine_mask", "d_coarse", "d_fine", "d_pred"):
        assert getattr(out, f).shape == (2, 1, 64, 64)
    for m in (out.coarse_mask, out.fine_mask):
        assert m.min() >= 0 and m.max() <= 1


def test_detp_output_invariants_exact(detp):
    d_in, *vecs = _inputs(seed=1)
    with torch.no_grad():
        out = detp(d_in, *vecs)
    assert torch.equal(out.d_coarse, out.coarse_mask * out.coarse_hal + (1 - out.coarse_mask) * d_in)
    assert torch.equal(out.d_fine, out.fine_mask * out.fine_hal + (1 - out.fine_mask) * d_in)
    assert torch.equal(out.d_pred, out.d_coarse + out.d_fine)


@pytest.mark.parametrize("mode, factor", [("input", 2.0), ("zero", 1.0)])
def test_closed_masks(mode, factor):
    model = DetP(DetPConfig(fine_fallback=mode)).eval()
    model.force_masks_closed()
    d_in, *vecs = _inputs(seed=2)
    with torch.no_grad():
        out = model(d_in, *vecs)
    assert torch.equal(out.d_pred, factor * d_in)


def test_detp_deterministic(detp):
    x = _inputs(seed=3)
    with torch.no_grad():
        a, b = detp(*x), detp(*x)
    assert torch.equal(a.d_pred, b.d_pred)


def test_target_au_changes_prediction():
    torch.manual_seed(4)
    model = DetP().eval()
    for p in (model.coarse_head.weight, model.coarse_head.bias):
        torch.nn.init.normal_(p, std=0.1)
    d_in, src, tgt, expr, fid, age = _inputs(seed=4)
    with torch.no_grad():
        a = model(d_in, src, tgt, expr, fid, age).d_pred
        b = model(d_in, src, 1 - tgt, expr, fid, age).d_pred
    assert (a - b).abs().mean() > 0


def test_nan_fails_fast_with_stage(detp):
    d_in, *vecs = _inputs()
    d_in[0, 0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError, match="encoder"):
        detp(d_in, *vecs)


def test_identity_dropout_is_training_only():
    torch.manual_seed(5)
    model = DetP(DetPConfig(id_dropout=0.5))
    d_in, src, tgt, expr, fid, age = _inputs(seed=5)
    model.eval()
    with torch.no_grad():
        a = model(d_in, src, tgt, expr, fid, age).d_pred
        b = model(d_in, src, tgt, expr, fid, age).d_pred
        model.train()
        c = model(d_in, src, tgt, expr, fid, age).d_pred
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_config_validation():
    with pytest.raises(ParameterError):
        DetPConfig(fine_fallback="other")
    with pytest.raises(ParameterError):
        DetPConfig(id_dropout=1.0)
    with pytest.raises(ParameterError):
        DetPConfig(detail_res=60)
    with pytest.raises(ParameterError):
        DetPConfig(enc_widths=(4, 4), dec_widths=(4, 4, 4))
    assert DetPConfig(**DetPConfig().to_dict()) == DetPConfig()


def test_every_weight_group_receives_gradient():
    torch.manual_seed(6)
    model = DetP(_small_config(id_dropout=0.0))
    # open the hallucination heads so gradients reach every upstream layer
    for head in (model.coarse_head, model.fine_head):
        torch.nn.init.normal_(head.weight, std=0.1)
    d_in, *vecs = _inputs(res=16, seed=6)
    (model(d_in, *vecs).d_pred ** 2).sum().backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_weight_group_gradients_match_finite_differences():
    """float32 analytic directional derivatives vs a float64 central difference on the same weights."""
    torch.manual_seed(7)
    model = DetP(_small_config(id_dropout=0.0))
    for head in (model.coarse_head, model.fine_head):
        torch.nn.init.normal_(head.weight, std=0.1)
    ref = DetP(_small_config(id_dropout=0.0))
    ref.load_state_dict(model.state_dict())
    ref.double()
    x32 = _inputs(res=16, seed=7)
    x64 = [t.double() for t in x32]

    (model(*x32).d_pred * 100).pow(2).mean().backward()
    groups = ("encoder", "vec_proj", "fuse", "style_map", "dec_convs", "coarse_head", "refine")
    g = torch.Generator().manual_seed(7)
    eps = 1e-6
    for name in groups:
        params = list(getattr(model, name).parameters())
        ref_params = list(getattr(ref, name).parameters())
        dirs = [torch.randn(p.shape, generator=g, dtype=torch.float64) for p in params]
        analytic = sum(float((p.grad.double() * d).sum()) for p, d in zip(params, dirs))
        values = []
        with torch.no_grad():
            for sign in (1.0, -1.0):
                for p, d in zip(ref_params, dirs):
                    p += sign * eps * d
                values.append(float((ref(*x64).d_pred * 100).pow(2).mean()))
                for p, d in zip(ref_params, dirs):
                    p -= sign * eps * d
        numeric = (values[0] - values[1]) / (2 * eps)
        assert abs(numeric - analytic) / max(abs(analytic), 1e-8) < 1e-2, name


def test_detp_forward_wrapper(detp):
    rng = np.random.default_rng(8)
    d_in = DetailMap(rng.uniform(-0.05, 0.05, (64, 64)))
    src = ExpressionTarget(rng.uniform(size=17), rng.normal(size=8))
    tgt = ExpressionTarget(rng.uniform(size=17), rng.normal(size=8))
    subj = SubjectFeatures(rng.normal(size=128), rng.normal(size=32))
    out = detp_forward(detp, d_in, src, tgt, subj)
    assert out.d_pred.shape == (64, 64)
    assert np.array_equal(out.d_pred, out.d_coarse + out.d_fine)
    assert out.detail_map().shape == (64, 64)


def test_expression_target_validation():
    with pytest.raises(ParameterError):
        ExpressionTarget(np.full(17, 1.5), np.zeros(8))
    with pytest.raises(ParameterError):
        ExpressionTarget(np.zeros(17), np.full(8, np.inf))
    t = ExpressionTarget(np.full(17, 0.25), np.arange(8.0))
    assert np.array_equal(ExpressionTarget.from_dict(t.to_dict()).au, t.au)


# ---------------------------------------------------------------- SR

@pytest.fixture(scope="module")
def srnet():
    torch.manual_seed(0)
    return SRNet().eval()


def test_sr_shape_contract(srnet):
    out = sr_forward(srnet, DetailMap(np.zeros((16, 16))))
    assert out.shape == (64, 64) and out.resolution == "full"


def test_untrained_sr_is_bicubic_and_keeps_constants(srnet):
    x = torch.rand(1, 1, 16, 16) * 0.1 - 0.05
    with torch.no_grad():
        assert torch.equal(srnet(x), bicubic_upsample(x))
    out = sr_forward(srnet, DetailMap(np.full((16, 16), 0.03)))
    assert np.abs(out.data - 0.03).max() < 1e-3


def test_sr_double_is_composition(srnet):
    torch.manual_seed(1)
    net = SRNet().eval()
    torch.nn.init.normal_(net.tail.weight, std=0.01)
    d = DetailMap(np.random.default_rng(9).uniform(-0.03, 0.03, (16, 16)))
    twice = sr_double(net, d)
    assert twice.shape == (256, 256)
    assert np.array_equal(twice.data, sr_forward(net, sr_forward(net, d)).data)
    const = sr_double(srnet, DetailMap(np.full((16, 16), -0.02)))
    assert np.abs(const.data + 0.02).max() < 2e-3


def test_sr_rejects_other_scales():
    with pytest.raises(ParameterError):
        SRNet(SRConfig(scale=2))
