"""Training objectives for detail prediction, super-resolution and rendering."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_WEIGHTS = {
    "adv": 1.0, "au": 1.0, "expr": 1.0, "id": 1.0, "age": 1.0, "regress": 10.0,
    "photo": 1.0, "photo_lr": 1.0, "augw": 1.0, "dsl": 1.0, "r1": 1.0, "sr": 1.0,
}
LOSS_NAMES = tuple(DEFAULT_WEIGHTS)


@dataclass
class LossBreakdown:
    """Named scalar terms, their weights and the weighted total (float64 sum in name order)."""

    values: dict
    weights: dict
    total: float = field(init=False)

    def __post_init__(self):
        unknown = set(self.values) - set(LOSS_NAMES)
        if unknown:
            raise KeyError(f"unknown loss terms {sorted(unknown)}")
        for k, v in self.values.items():
            if not math.isfinite(v):
                raise FloatingPointError(f"loss term {k!r} is not finite")
        total = 0.0
        for k in LOSS_NAMES:
            if k in self.values:
                total += self.weights[k] * self.values[k]
        self.total = total

    def rows(self):
        out = [(k, self.values[k]) for k in LOSS_NAMES if k in self.values]
        return out + [("total", self.total)]


def weighted_sum(terms, weights):
    """Differentiable counterpart of ``LossBreakdown.total``; also returns the breakdown."""
    total = None
    for k in LOSS_NAMES:
        if k in terms:
            part = weights[k] * terms[k]
            total = part if total is None else total + part
    breakdown = LossBreakdown({k: float(v.detach()) for k, v in terms.items()},
                              {k: weights[k] for k in terms})
    return total, breakdown


# ---------------------------------------------------------------- adversarial

def nonsat_g_loss(realism_fake):
    return -torch.log(torch.as_tensor(realism_fake)).mean()


def nonsat_d_loss(realism_real, realism_fake):
    real = torch.as_tensor(realism_real)
    fake = torch.as_tensor(realism_fake)
    return -torch.log1p(-fake).mean() - torch.log(real).mean()


def nonsat_g_loss_logits(logit_fake):
    """Same as ``nonsat_g_loss(sigmoid(logit))`` without saturating."""
    return F.softplus(-logit_fake).mean()


def nonsat_d_loss_logits(logit_real, logit_fake):
    return F.softplus(logit_fake).mean() + F.softplus(-logit_real).mean()


def r1_penalty(critic, real_batch, create_graph=True):
    """Mean squared L2 norm of d realism / d input on real samples.

    ``critic`` returns either a realism tensor or an object with ``.realism``.
    """
    x = real_batch.detach().requires_grad_(True)
    out = critic(x)
    realism = getattr(out, "realism", out)
    (grad,) = torch.autograd.grad(realism.sum(), x, create_graph=create_graph)
    return grad.pow(2).flatten(1).sum(1).mean()


# ---------------------------------------------------------------- pyramid losses

_BINOMIAL = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _as4d(x):
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    return x


def _blur(x):
    c = x.shape[1]
    k = _BINOMIAL.to(x.dtype)
    x = F.pad(x, (2, 2, 2, 2), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, 5).expand(c, 1, 1, 5), groups=c)
    return F.conv2d(x, k.view(1, 1, 5, 1).expand(c, 1, 5, 1), groups=c)


def _down(x):
    return _blur(x)[..., ::2, ::2]


def _up(x, size):
    b, c, h, w = x.shape
    z = x.new_zeros(b, c, 2 * h, 2 * w)
    z[..., ::2, ::2] = x
    return (4.0 * _blur(z))[..., : size[0], : size[1]]


def laplacian_pyramid(x, levels=3):
    """Band-pass levels (finest first) followed by the low-pass residual."""
    cur = _as4d(x)
    bands = []
    for _ in range(levels - 1):
        low = _down(cur)
        bands.append(cur - _up(low, cur.shape[-2:]))
        cur = low
    bands.append(cur)
    return bands


def laplacian_loss(a, b, levels=3):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    total = 0.0
    for lvl, (ba, bb) in enumerate(zip(laplacian_pyramid(a, levels), laplacian_pyramid(b, levels))):
        total = total + (2.0**lvl) * (ba - bb).abs().mean()
    return total


def regression_loss(pred_detail, oracle_detail):
    return laplacian_loss(pred_detail, oracle_detail)


def augw_loss(rendered_star, target_star):
    return laplacian_loss(rendered_star, target_star)


def dsl_loss(probe_shading, true_shading_star, skin_mask):
    return laplacian_loss(probe_shading * skin_mask, true_shading_star * skin_mask)


def sr_loss(sr_output, hi_res_patch):
    return (sr_output - hi_res_patch).abs().mean()


# ---------------------------------------------------------------- perceptual

class RandomFeatureExtractor(nn.Module):
    """Frozen, randomly initialised 4-layer conv net used as a perceptual feature space.

    Stands in for a pretrained classifier; swap in another module through
    ``set_perceptual_extractor``.
    """

    def __init__(self, in_channels=3, seed=1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        specs = [(in_channels, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2)]
        self.convs = nn.ModuleList()
        for cin, cout, stride in specs:
            conv = nn.Conv2d(cin, cout, 3, stride, 1)
            bound = math.sqrt(6.0 / (cin * 9))
            with torch.no_grad():
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
            self.convs.append(conv)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        feats = []
        h = (x - 0.5) * 2.0
        for conv in self.convs:
            h = F.relu(conv(h))
            feats.append(h)
        return feats


_extractors = {}


def set_perceptual_extractor(module):
    """Replace the feature network (e.g. with a pretrained one)."""
    _extractors.clear()
    _extractors[torch.float32] = module


def _get_extractor(dtype):
    if torch.float32 not in _extractors:
        _extractors[torch.float32] = RandomFeatureExtractor()
    if dtype not in _extractors:
        _extractors[dtype] = copy.deepcopy(_extractors[torch.float32]).to(dtype)
    return _extractors[dtype]


def perceptual_loss(a, b):
    a4, b4 = _as4d(a), _as4d(b)
    ext = _get_extractor(a4.dtype)
    total = 0.0
    for fa, fb in zip(ext(a4), ext(b4)):
        total = total + (fa - fb).abs().mean()
    return total


# ---------------------------------------------------------------- regressions

def squared_error(pred, target):
    """Batch mean of the per-sample squared L2 norm."""
    return (pred - target).pow(2).flatten(1).sum(1).mean()


def expression_regression_losses(pred_au, pred_expr, tgt):
    """``tgt`` is an ExpressionTarget or an ``(au, expr_params)`` pair of tensors."""
    if hasattr(tgt, "au"):
        au = torch.as_tensor(tgt.au, dtype=pred_au.dtype).reshape(pred_au.shape)
        expr = torch.as_tensor(tgt.expr_params, dtype=pred_expr.dtype).reshape(pred_expr.shape)
    else:
        au, expr = tgt
    return {"au": squared_error(pred_au, au), "expr": squared_error(pred_expr, expr)}


def photometric_terms(pred, target):
    return {
        "mse": (pred - target).pow(2).mean(),
        "l1": (pred - target).abs().mean(),
        "lap": laplacian_loss(pred, target),
        "pcpt": perceptual_loss(pred, target),
    }


def photometric_bundle(pred, target):
    t = photometric_terms(pred, target)
    return t["mse"] + t["l1"] + t["lap"] + t["pcpt"]
