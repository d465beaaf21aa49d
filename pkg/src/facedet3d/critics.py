"""Discriminators with a realism head plus auxiliary regression heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import AGE_DIM, AU_DIM, EXPR_DIM, ID_DIM

REALISM_EPS = 1e-7
MIN_INPUT = 16


@dataclass
class CriticOutput:
    logit: torch.Tensor    # (B,)
    realism: torch.Tensor  # (B,), strictly inside (0, 1)
    aux: dict


class Critic(nn.Module):
    """Shared template: four stride-2 conv blocks, then linear heads.

    ``heads`` maps an auxiliary head name to its output dimension.
    """

    def __init__(self, in_channels, heads, width=32, input_scale=1.0):
        super().__init__()
        self.input_scale = input_scale
        layers = []
        cin = in_channels
        for _ in range(4):
            layers += [nn.Conv2d(cin, width, 4, 2, 1), nn.LeakyReLU(0.2)]
            cin = width
        self.trunk = nn.Sequential(*layers)
        feat = width * 4 * 4
        self.realism_head = nn.Linear(feat, 1)
        self.heads = nn.ModuleDict({name: nn.Linear(feat, dim) for name, dim in heads.items()})

    def forward(self, x) -> CriticOutput:
        if min(x.shape[-2:]) < MIN_INPUT:
            # four stride-2 blocks need 16 pixels; smaller inputs are resized, keeping gradients
            x = F.interpolate(x, size=(MIN_INPUT, MIN_INPUT), mode="bilinear", align_corners=False)
        h = self.trunk(x * self.input_scale)
        h = F.adaptive_avg_pool2d(h, 4).flatten(1)
        if not torch.isfinite(h).all():
            raise FloatingPointError("non-finite values in critic trunk")
        logit = self.realism_head(h)[:, 0]
        realism = torch.sigmoid(logit).clamp(REALISM_EPS, 1.0 - REALISM_EPS)
        return CriticOutput(logit, realism, {name: head(h) for name, head in self.heads.items()})


# Wrinkle amplitudes are ~0.01-0.05; rescale to unit range before the trunk.
_DETAIL_INPUT_SCALE = 100.0


def make_dexp(width=32):
    return Critic(1, {"au": AU_DIM, "expr": EXPR_DIM}, width, _DETAIL_INPUT_SCALE)


def make_dface(width=32):
    return Critic(1, {"id": ID_DIM}, width, _DETAIL_INPUT_SCALE)


def make_dage(width=32):
    return Critic(1, {"age": AGE_DIM}, width, _DETAIL_INPUT_SCALE)


def make_dexp_rgb(width=32):
    return Critic(3, {"au": AU_DIM}, width)


def dexp_forward(critic, detail_map):
    out = critic(detail_map)
    return {"realism": out.realism, "au_pred": out.aux["au"], "expr_pred": out.aux["expr"]}


def dface_forward(critic, detail_map):
    out = critic(detail_map)
    return {"realism": out.realism, "id_pred": out.aux["id"]}


def dage_forward(critic, detail_map):
    out = critic(detail_map)
    return {"realism": out.realism, "age_pred": out.aux["age"]}


def dexp_rgb_forward(critic, image):
    out = critic(image)
    return {"realism": out.realism, "au_pred": out.aux["au"]}
