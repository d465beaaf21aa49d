import copy

import numpy as np
import pytest
import torch

from facedet3d import synthdata as sd
from facedet3d.critics import (dage_forward, dexp_forward, dexp_rgb_forward, dface_forward, make_dage, make_dexp,
                               make_dexp_rgb, make_dface)

CRITICS = {
    "dexp": (make_dexp, 1, dexp_forward, {"au_pred": 17, "expr_pred": 8}),
    "dface": (make_dface, 1, dface_forward, {"id_pred": 128}),
    "dage": (make_dage, 1, dage_forward, {"age_pred": 32}),
    "dexp_rgb": (make_dexp_rgb, 3, dexp_rgb_forward, {"au_pred": 17}),
}


def _input(channels, size, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, channels, size, size, generator=g)
    return x if channels == 3 else (x - 0.5) * 0.1


@pytest.mark.parametrize("name", CRITICS)
def test_shape_contract(name):
    make, ch, fwd, heads = CRITICS[name]
    out = fwd(make(), _input(ch, 64, 2))
    assert out["realism"].shape == (2,)
    for head, dim in heads.items():
        assert out[head].shape == (2, dim)


@pytest.mark.parametrize("name", CRITICS)
def test_realism_strictly_inside_unit_interval(name):
    make, ch, fwd, _ = CRITICS[name]
    critic = make()
    with torch.no_grad():
        r = torch.cat([fwd(critic, _input(ch, 64, 250, seed=s))["realism"] for s in range(4)])
        # saturating inputs as well
        r = torch.cat([r, fwd(critic, 1e4 * _input(ch, 64, 8, seed=9))["realism"]])
    assert len(r) == 1008
    assert r.min() > 0 and r.max() < 1
    assert torch.isfinite(torch.log(r)).all() and torch.isfinite(torch.log1p(-r)).all()


@pytest.mark.parametrize("name", CRITICS)
def test_input_gradient_matches_finite_differences(name):
    make, ch, _, _ = CRITICS[name]
    critic = make()
    ref = copy.deepcopy(critic).double()
    x = _input(ch, 8, 1, seed=1).requires_grad_(True)
    critic(x).realism.sum().backward()
    analytic = x.grad.double().reshape(-1)
    x64 = x.detach().double().reshape(-1)
    numeric = torch.zeros_like(x64)
    eps = 1e-6
    with torch.no_grad():
        for k in range(len(x64)):
            plus, minus = x64.clone(), x64.clone()
            plus[k] += eps
            minus[k] -= eps
            numeric[k] = (ref(plus.view_as(x)).realism.sum() - ref(minus.view_as(x)).realism.sum()) / (2 * eps)
    assert (analytic - numeric).norm() / numeric.norm() < 1e-2


@pytest.mark.parametrize("name", CRITICS)
def test_critic_deterministic(name):
    make, ch, _, _ = CRITICS[name]
    critic = make()
    x = _input(ch, 64, 3)
    with torch.no_grad():
        a, b = critic(x), critic(x)
    assert torch.equal(a.realism, b.realism)
    for k in a.aux:
        assert torch.equal(a.aux[k], b.aux[k])


def test_nan_input_fails_fast():
    x = _input(1, 64, 1)
    x[0, 0, 3, 3] = float("nan")
    with pytest.raises(FloatingPointError, match="critic"):
        make_dexp()(x)


# ---------------------------------------------------------------- trained heads

def _detail_data(ids, n_expr, base=1):
    maps, fid, age, au = [], [], [], []
    for i in ids:
        ident = sd.sample_identity(sd.identity_seed(base, i))
        rng = np.random.default_rng([base, i])
        for _ in range(n_expr):
            e = sd.sample_expression(rng)
            maps.append(sd.oracle_detail_map(ident, e.au).data)
            fid.append(sd.surrogate_face_embed(ident))
            age.append(sd.surrogate_age_embed(ident))
            au.append(e.au)

    def t(a):
        return torch.as_tensor(np.array(a), dtype=torch.float32)

    return {"maps": t(maps)[:, None], "id": t(fid), "age": t(age), "au": t(au)}


@pytest.fixture(scope="module")
def detail_split():
    return _detail_data(range(64), 4), _detail_data(range(64, 80), 2)


def _fit(critic, inputs, targets, head, steps, lr, seed=0):
    torch.manual_seed(seed)
    opt = torch.optim.Adam(critic.parameters(), lr)
    g = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        idx = torch.randint(0, len(inputs), (32,), generator=g)
        loss = ((critic(inputs[idx]).aux[head] - targets[idx]) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return critic


@pytest.mark.parametrize("make, head", [(make_dface, "id"), (make_dage, "age")])
def test_trained_embedding_head_generalises(detail_split, make, head):
    train, test = detail_split
    torch.manual_seed(0)
    critic = _fit(make(), train["maps"], train[head], head, steps=400, lr=1e-3)
    with torch.no_grad():
        pred = critic(test["maps"]).aux[head]
    cos = torch.nn.functional.cosine_similarity(pred, test[head]).mean()
    assert cos > 0.7


def test_trained_au_head_beats_constant(detail_split):
    train, test = detail_split
    torch.manual_seed(0)
    critic = _fit(make_dexp(), train["maps"], train["au"], "au", steps=400, lr=1e-3)
    with torch.no_grad():
        mse = ((critic(test["maps"]).aux["au"] - test["au"]) ** 2).mean()
    const = ((train["au"].mean(0) - test["au"]) ** 2).mean()
    assert mse < const


def test_trained_rgb_au_head_beats_constant():
    def images(ids, n_expr):
        imgs, au = [], []
        for i in ids:
            ident = sd.sample_identity(sd.identity_seed(2, i))
            rng = np.random.default_rng([2, i])
            for _ in range(n_expr):
                e = sd.sample_expression(rng)
                imgs.append(sd.render_ground_truth(ident, e, sd.sample_camera(rng), sd.sample_light(rng)))
                au.append(e.au)
        return torch.as_tensor(np.array(imgs)), torch.as_tensor(np.array(au), dtype=torch.float32)

    train_x, train_au = images(range(96), 4)
    test_x, test_au = images(range(96, 112), 2)
    torch.manual_seed(0)
    critic = _fit(make_dexp_rgb(), train_x, train_au, "au", steps=1500, lr=3e-4)
    with torch.no_grad():
        mse = ((critic(test_x).aux["au"] - test_au) ** 2).mean()
    const = ((train_au.mean(0) - test_au) ** 2).mean()
    assert mse < const
