"""Detail prediction network (coarse + refinement stages with masked blending) and the 4x SR network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import AGE_DIM, AU_DIM, DETAIL_RES, EXPR_DIM, ID_DIM
from .facegeom import DetailMap, ParameterError


@dataclass
class ExpressionTarget:
    au: np.ndarray
    expr_params: np.ndarray

    def __post_init__(self):
        self.au = np.asarray(self.au, dtype=np.float32)
        self.expr_params = np.asarray(self.expr_params, dtype=np.float32)
        if np.any(self.au < 0) or np.any(self.au > 1):
            raise ParameterError("AU activations must lie in [0, 1]")
        if not np.all(np.isfinite(self.expr_params)):
            raise ParameterError("expression parameters must be finite")

    def to_dict(self):
        return {"au": self.au.tolist(), "expr_params": self.expr_params.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["au"], d["expr_params"])


@dataclass
class SubjectFeatures:
    face_id: np.ndarray
    age: np.ndarray

    def __post_init__(self):
        self.face_id = np.asarray(self.face_id, dtype=np.float32)
        self.age = np.asarray(self.age, dtype=np.float32)
        if not (np.all(np.isfinite(self.face_id)) and np.all(np.isfinite(self.age))):
            raise ParameterError("subject features must be finite")


@dataclass
class DetPOutput:
    coarse_hal: object
    coarse_mask: object
    fine_hal: object
    fine_mask: object
    d_coarse: object
    d_fine: object
    d_pred: object

    def detail_map(self):
        return DetailMap.clipped(np.asarray(self.d_pred))


def combine_masked(hal, mask, base):
    """``mask * hal + (1 - mask) * base``; works on arrays and tensors."""
    if tuple(hal.shape) != tuple(mask.shape) or tuple(hal.shape) != tuple(base.shape):
        raise ParameterError(f"shape mismatch: {tuple(hal.shape)}, {tuple(mask.shape)}, {tuple(base.shape)}")
    return mask * hal + (1 - mask) * base


def adain(features, scale, shift, eps=1e-5):
    """Instance-normalise each channel over space, then apply per-channel scale/shift.

    features (B, C, h, w) or (C, h, w); scale/shift (B, C) or (C,).
    """
    single = features.dim() == 3
    if single:
        features, scale, shift = features[None], scale[None], shift[None]
    mean = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), keepdim=True, unbiased=False)
    out = (features - mean) / torch.sqrt(var + eps)
    out = out * scale[:, :, None, None] + shift[:, :, None, None]
    return out[0] if single else out


class AdaIN(nn.Module):
    """AdaIN whose scale (``1 + .``) and shift are affine in the style vector."""

    def __init__(self, channels, style_dim, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.affine = nn.Linear(style_dim, 2 * channels)
        nn.init.normal_(self.affine.weight, std=0.1)
        nn.init.zeros_(self.affine.bias)

    def forward(self, x, style):
        params = self.affine(style)
        scale = 1.0 + params[:, : self.channels]
        shift = params[:, self.channels:]
        return adain(x, scale, shift, self.eps)


def _check(t, stage):
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in stage '{stage}'")
    return t


# ---------------------------------------------------------------- DetP

@dataclass
class DetPConfig:
    detail_res: int = DETAIL_RES
    enc_widths: tuple = (16, 32, 64, 64)
    dec_widths: tuple = (64, 32, 16, 16)
    vec_channels: int = 8
    refine_width: int = 16
    canvas_channels: int = 16
    canvas_gain: float = 30.0
    style_dim: int = 64
    id_dropout: float = 0.3
    au_dim: int = AU_DIM
    expr_dim: int = EXPR_DIM
    id_dim: int = ID_DIM
    age_dim: int = AGE_DIM
    detail_scale: float = 0.05
    fine_fallback: str = "input"

    def __post_init__(self):
        self.enc_widths = tuple(self.enc_widths)
        self.dec_widths = tuple(self.dec_widths)
        if len(self.enc_widths) != len(self.dec_widths):
            raise ParameterError("encoder and decoder need the same number of levels")
        if self.fine_fallback not in ("input", "zero"):
            raise ParameterError(f"fine_fallback must be 'input' or 'zero', got {self.fine_fallback!r}")
        if not 0.0 <= self.id_dropout < 1.0:
            raise ParameterError(f"id_dropout must lie in [0, 1), got {self.id_dropout}")
        if self.detail_res % (2 ** len(self.enc_widths)):
            raise ParameterError("detail_res must be divisible by 2**levels")

    def to_dict(self):
        d = asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        d["dec_widths"] = list(self.dec_widths)
        return d


class DetP(nn.Module):
    """Encoders per input, AdaIN decoder on the target AUs, masked coarse + fine outputs."""

    def __init__(self, config: DetPConfig | None = None):
        super().__init__()
        self.config = cfg = config or DetPConfig()
        levels = len(cfg.enc_widths)
        self.bottleneck = cfg.detail_res // 2**levels

        self.encoder = nn.ModuleList()
        cin = 1
        for w in cfg.enc_widths:
            self.encoder.append(nn.Conv2d(cin, w, 4, 2, 1))
            cin = w
        cells = self.bottleneck**2
        self.vec_proj = nn.ModuleDict({
            "src_au": nn.Linear(cfg.au_dim, cfg.vec_channels * cells),
            "tgt_expr": nn.Linear(cfg.expr_dim, cfg.vec_channels * cells),
            "face_id": nn.Linear(cfg.id_dim, cfg.vec_channels * cells),
            "age": nn.Linear(cfg.age_dim, cfg.vec_channels * cells),
        })
        self.fuse = nn.Conv2d(cfg.enc_widths[-1] + 4 * cfg.vec_channels, cfg.dec_widths[0], 3, 1, 1)

        # learned full-resolution canvas joins the last decoder stage; AdaIN on the target
        # AUs then mixes its channels into location-specific patterns
        self.canvas = nn.Parameter(0.01 / cfg.canvas_gain * torch.randn(1, cfg.canvas_channels, cfg.detail_res, cfg.detail_res))
        skips = list(cfg.enc_widths[:-1])[::-1] + [1 + cfg.canvas_channels]
        # style vector for every AdaIN: target and source AUs plus age, so the
        # decoder can scale wrinkle depth with age
        self.style_map = nn.Sequential(
            nn.Linear(2 * cfg.au_dim + cfg.age_dim, cfg.style_dim), nn.LeakyReLU(0.2),
            nn.Linear(cfg.style_dim, cfg.style_dim), nn.LeakyReLU(0.2),
        )
        self.dec_convs = nn.ModuleList()
        self.dec_norms = nn.ModuleList()
        cin = cfg.dec_widths[0]
        for w, s in zip(cfg.dec_widths, skips):
            self.dec_convs.append(nn.Conv2d(cin + s, w, 3, 1, 1))
            self.dec_norms.append(AdaIN(w, cfg.style_dim))
            cin = w
        self.coarse_head = nn.Conv2d(cin, 2, 3, 1, 1)

        rw = cfg.refine_width
        self.refine = nn.Sequential(
            nn.Conv2d(1, rw, 3, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(rw, rw, 3, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(rw, 2, 3, 1, 1),
        )
        # hallucination channels start at zero so an untrained model passes d_in through
        with torch.no_grad():
            for head in (self.coarse_head, self.fine_head):
                head.weight[0].zero_()
                head.bias[0].zero_()

    @property
    def fine_head(self):
        return self.refine[-1]

    def forward(self, d_in, src_au, tgt_au, tgt_expr, face_id, age) -> DetPOutput:
        """d_in (B, 1, H, W); vectors (B, dim). Returns a DetPOutput of (B, 1, H, W) tensors."""
        cfg = self.config
        b = d_in.shape[0]
        x = d_in / cfg.detail_scale
        feats = []
        h = x
        for conv in self.encoder:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        # with few training identities the identity vectors invite memorisation
        face_id = F.dropout(face_id, cfg.id_dropout, self.training)
        age = F.dropout(age, cfg.id_dropout, self.training)
        grids = [
            self.vec_proj[name](vec).view(b, cfg.vec_channels, self.bottleneck, self.bottleneck)
            for name, vec in (("src_au", src_au), ("tgt_expr", tgt_expr), ("face_id", face_id), ("age", age))
        ]
        h = F.leaky_relu(self.fuse(torch.cat([h] + grids, dim=1)), 0.2)
        _check(h, "encoder")

        skips = feats[:-1][::-1] + [torch.cat([x, cfg.canvas_gain * self.canvas.expand(b, -1, -1, -1)], dim=1)]
        # the source AUs ride along so the decoder can cancel wrinkles of the input expression
        style = self.style_map(torch.cat([tgt_au, src_au, age], dim=1))
        for conv, norm, skip in zip(self.dec_convs, self.dec_norms, skips):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.leaky_relu(norm(conv(torch.cat([h, skip], dim=1)), style), 0.2)
        raw = self.coarse_head(h)
        _check(raw, "decoder")
        coarse_hal = raw[:, :1] * cfg.detail_scale
        coarse_mask = torch.sigmoid(raw[:, 1:])
        d_coarse = combine_masked(coarse_hal, coarse_mask, d_in)

        raw_f = self.refine(d_coarse / cfg.detail_scale)
        _check(raw_f, "refinement")
        fine_hal = raw_f[:, :1] * cfg.detail_scale
        fine_mask = torch.sigmoid(raw_f[:, 1:])
        fallback = d_in if cfg.fine_fallback == "input" else torch.zeros_like(d_in)
        d_fine = combine_masked(fine_hal, fine_mask, fallback)
        d_pred = d_coarse + d_fine
        _check(d_pred, "output")
        return DetPOutput(coarse_hal, coarse_mask, fine_hal, fine_mask, d_coarse, d_fine, d_pred)

    @torch.no_grad()
    def force_masks_closed(self):
        """Test hook: drive both mask logits to -1e4 so the masks evaluate to exactly 0."""
        for head in (self.coarse_head, self.fine_head):
            head.weight[1].zero_()
            head.bias[1] = -1e4


def detp_forward(model: DetP, d_in: DetailMap, src: ExpressionTarget, tgt: ExpressionTarget,
                 subj: SubjectFeatures) -> DetPOutput:
    """Single-sample convenience wrapper returning (H, W) numpy maps."""
    def vec(a):
        return torch.as_tensor(np.asarray(a, np.float32))[None]

    with torch.no_grad():
        out = model(torch.as_tensor(d_in.data)[None, None], vec(src.au), vec(tgt.au),
                    vec(tgt.expr_params), vec(subj.face_id), vec(subj.age))
    return DetPOutput(*(getattr(out, f).numpy()[0, 0] for f in DetPOutput.__dataclass_fields__))


# ---------------------------------------------------------------- super-resolution

class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=8):
        super().__init__()
        self.body = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, channels // reduction, 1), nn.ReLU(),
            nn.Conv2d(channels // reduction, channels, 1), nn.Sigmoid(),
        )

    def forward(self, x):
        return x * self.body(x)


class RCAB(nn.Module):
    def __init__(self, channels, reduction=8):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 1, 1),
            ChannelAttention(channels, reduction),
        )

    def forward(self, x):
        return x + self.body(x)


class ResidualGroup(nn.Module):
    def __init__(self, channels, n_blocks, reduction=8):
        super().__init__()
        self.body = nn.Sequential(*[RCAB(channels, reduction) for _ in range(n_blocks)],
                                  nn.Conv2d(channels, channels, 3, 1, 1))

    def forward(self, x):
        return x + self.body(x)


@dataclass
class SRConfig:
    n_feats: int = 32
    n_groups: int = 2
    n_blocks: int = 2
    reduction: int = 8
    scale: int = 4
    detail_scale: float = 0.05

    def to_dict(self):
        return asdict(self)


class SRNet(nn.Module):
    """Residual channel-attention upsampler on top of a bicubic skip.

    The tail convolution starts at zero, so an untrained network is exactly
    bicubic interpolation.
    """

    def __init__(self, config: SRConfig | None = None):
        super().__init__()
        self.config = cfg = config or SRConfig()
        if cfg.scale != 4:
            raise ParameterError("only x4 super-resolution is supported")
        n = cfg.n_feats
        self.head = nn.Conv2d(1, n, 3, 1, 1)
        self.body = nn.Sequential(*[ResidualGroup(n, cfg.n_blocks, cfg.reduction) for _ in range(cfg.n_groups)],
                                  nn.Conv2d(n, n, 3, 1, 1))
        self.upsample = nn.Sequential(
            nn.Conv2d(n, 4 * n, 3, 1, 1), nn.PixelShuffle(2),
            nn.Conv2d(n, 4 * n, 3, 1, 1), nn.PixelShuffle(2),
        )
        self.tail = nn.Conv2d(n, 1, 3, 1, 1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, x):
        base = bicubic_upsample(x)
        s = self.config.detail_scale
        h = self.head(x / s)
        h = h + self.body(h)
        return base + self.tail(self.upsample(h)) * s


def bicubic_upsample(x, factor=4):
    return F.interpolate(x, scale_factor=factor, mode="bicubic", align_corners=False)


def sr_forward(model: SRNet, details: DetailMap) -> DetailMap:
    with torch.no_grad():
        out = model(torch.as_tensor(details.data)[None, None])[0, 0].numpy()
    return DetailMap.clipped(out, resolution="full", cap=details.cap)


def sr_double(model: SRNet, details: DetailMap) -> DetailMap:
    return sr_forward(model, sr_forward(model, details))
