"""Neural texture encoder, two-branch image renderer and the detailed-shading probe."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import AU_DIM, ALBEDO_DIM, NTEX_CHANNELS, SH_DIM
from .detailnet import AdaIN, _check
from .facegeom import (BlendshapeModel, Camera, DetailMap, ParameterError, UVRasterBuffer,
                       apply_detail_displacement, build_face_mesh, gather_texels, rasterize_uv,
                       sampling_weights)
from .shading import LightCoeffs, ShadingMap, shading_map

COND_DIM = AU_DIM + ALBEDO_DIM + SH_DIM


@dataclass
class NeuralTextureMap:
    data: torch.Tensor  # (F, Ht, Wt) or (B, F, Ht, Wt)

    def __post_init__(self):
        if not torch.isfinite(torch.as_tensor(self.data)).all():
            raise FloatingPointError("neural texture contains non-finite values")


@dataclass
class RenderInputs:
    texture_map: np.ndarray      # (3, Ht, Wt) in [0, 1]
    detail_map: DetailMap
    shape_params: np.ndarray
    expr_params: np.ndarray
    au: np.ndarray
    camera: Camera
    light: LightCoeffs
    albedo_params: np.ndarray

    def __post_init__(self):
        for name in ("texture_map", "shape_params", "expr_params", "au", "albedo_params"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"{name} must be finite")
            setattr(self, name, arr)
        if self.texture_map.ndim != 3 or self.texture_map.shape[0] != 3:
            raise ParameterError(f"texture_map must be (3, H, W), got {self.texture_map.shape}")


@dataclass
class RenderOutput:
    image_lr: torch.Tensor
    image_detail: torch.Tensor
    image_raw: torch.Tensor  # image_lr + image_detail, unclipped; used by the losses
    image: torch.Tensor      # clipped to [0, 1]


@dataclass
class RenderConfig:
    ntm_channels: int = NTEX_CHANNELS
    ntex_width: int = 32
    unet_width: int = 32
    depth: int = 3

    def to_dict(self):
        return asdict(self)


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.2))


class NTex(nn.Module):
    """Encoder-decoder mapping a UV texture to an F-channel neural texture of the same size.

    The texture is added onto the first three output channels, so the neural
    texture starts out carrying the plain colours.
    """

    def __init__(self, out_channels=NTEX_CHANNELS, width=32):
        super().__init__()
        self.enc0 = _conv(3, width)
        self.enc1 = _conv(width, 2 * width, stride=2)
        self.mid = _conv(2 * width, 2 * width)
        self.dec = _conv(2 * width + width, width)
        self.out = nn.Conv2d(width + 3, out_channels, 3, 1, 1)

    def forward(self, texture):
        x = (texture - 0.5) * 2.0
        h0 = self.enc0(x)
        h = self.mid(self.enc1(h0))
        h = F.interpolate(h, size=h0.shape[-2:], mode="nearest")
        h = self.dec(torch.cat([h, h0], 1))
        out = self.out(torch.cat([h, x], 1))
        skip = F.pad(texture, (0, 0, 0, 0, 0, out.shape[1] - texture.shape[1]))
        return _check(out + skip, "ntex")


class Tex2Im(nn.Module):
    """U-Net from screen-space features to RGB, decoder stages modulated by AdaIN on the condition.

    ``residual``: add the first three input channels to the output (the colour
    part of the sampled neural texture). ``zero_init``: start with an all-zero output.
    """

    def __init__(self, in_channels, cond_dim=COND_DIM, width=32, depth=3, residual=False, zero_init=False):
        super().__init__()
        self.residual = residual
        widths = [width * min(2**i, 4) for i in range(depth + 1)]
        self.inc = _conv(in_channels, widths[0])
        self.down = nn.ModuleList([_conv(widths[i], widths[i + 1], stride=2) for i in range(depth)])
        self.up = nn.ModuleList()
        self.norms = nn.ModuleList()
        for i in reversed(range(depth)):
            self.up.append(_conv(widths[i + 1] + widths[i], widths[i]))
            self.norms.append(AdaIN(widths[i], cond_dim))
        self.out = nn.Conv2d(widths[0] + in_channels, 3, 3, 1, 1)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x, cond):
        skips = [self.inc(x)]
        for layer in self.down:
            skips.append(layer(skips[-1]))
        h = skips.pop()
        for up, norm in zip(self.up, self.norms):
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = F.leaky_relu(norm(up(torch.cat([h, skip], 1)), cond), 0.2)
        out = self.out(torch.cat([h, x], 1))
        return out + x[:, :3] if self.residual else out


class ShadingProbe(nn.Module):
    """Deliberately weak: two convolutions, 3 -> 8 -> 1, softplus output."""

    def __init__(self, hidden=8):
        super().__init__()
        self.conv1 = nn.Conv2d(3, hidden, 3, 1, 1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, 1, 1)

    def forward(self, image):
        return F.softplus(self.conv2(F.relu(self.conv1(image))))


@dataclass
class RasterBatch:
    """Torch-side view of B screen rasters: texel gather tables, shaded albedo and coverage."""

    index: torch.Tensor          # (B, 4, P) int64
    weight: torch.Tensor         # (B, 4, P)
    shaded_albedo: torch.Tensor  # (B, 3, H, W)
    mask: torch.Tensor           # (B, 1, H, W)

    @property
    def size(self):
        return self.mask.shape[-2:]

    @classmethod
    def stack(cls, items):
        return cls(*(torch.stack([getattr(it, f) for it in items]) for f in ("index", "weight", "shaded_albedo", "mask")))

    def __getitem__(self, sel):
        return RasterBatch(self.index[sel], self.weight[sel], self.shaded_albedo[sel], self.mask[sel])


@dataclass
class RasterItem:
    index: torch.Tensor
    weight: torch.Tensor
    shaded_albedo: torch.Tensor
    mask: torch.Tensor


def raster_item(raster: UVRasterBuffer, shaded_albedo, tex_size, dtype=torch.float32):
    idx, w = sampling_weights(raster, tex_size[0], tex_size[1])
    return RasterItem(torch.as_tensor(idx), torch.as_tensor(w, dtype=dtype),
                      torch.as_tensor(np.asarray(shaded_albedo), dtype=dtype),
                      torch.as_tensor(raster.mask[None], dtype=dtype))


class Renderer(nn.Module):
    """Additive two-branch renderer: image = g_theta(proxy view) + g_omega(detailed view)."""

    def __init__(self, config: RenderConfig | None = None):
        super().__init__()
        self.config = config or RenderConfig()
        c = self.config
        in_ch = c.ntm_channels + 3 + 1
        self.ntex = NTex(c.ntm_channels, c.ntex_width)
        self.g_theta = Tex2Im(in_ch, COND_DIM, c.unet_width, c.depth, residual=True)
        self.g_omega = Tex2Im(in_ch, COND_DIM, c.unet_width, c.depth, zero_init=True)

    def branch_input(self, ntm, raster: RasterBatch):
        h, w = raster.size
        sampled = gather_texels(ntm, raster.index, raster.weight, h, w)
        return torch.cat([sampled, raster.shaded_albedo, raster.mask], 1)

    def forward(self, texture, proxy: RasterBatch, detailed: RasterBatch, cond, ntm=None,
                image_lr=None) -> RenderOutput:
        """``ntm``/``image_lr`` may be passed in to reuse work shared with another render."""
        if ntm is None:
            ntm = self.ntex(texture)
        if image_lr is None:
            image_lr = self.g_theta(self.branch_input(ntm, proxy), cond) * proxy.mask
        image_detail = self.g_omega(self.branch_input(ntm, detailed), cond) * detailed.mask
        raw = image_lr + image_detail
        _check(raw, "render")
        return RenderOutput(image_lr, image_detail, raw, raw.clamp(0.0, 1.0))

    def zero_detail_branch(self):
        """Test hook: make g_omega output exactly zero."""
        with torch.no_grad():
            for p in self.g_omega.parameters():
                p.zero_()


def condition_vector(au, albedo_params, light: LightCoeffs | np.ndarray):
    coeffs = light.coeffs if isinstance(light, LightCoeffs) else np.asarray(light)
    return np.concatenate([np.asarray(au, np.float64), np.asarray(albedo_params, np.float64), coeffs]).astype(np.float32)


def ntex_forward(model: Renderer | NTex, texture_map) -> NeuralTextureMap:
    net = model.ntex if isinstance(model, Renderer) else model
    tex = torch.as_tensor(np.asarray(texture_map, dtype=np.float32))
    if tex.min() < 0 or tex.max() > 1:
        raise ParameterError("texture values must lie in [0, 1]")
    return NeuralTextureMap(net(tex[None])[0])


def shading_probe_forward(probe: ShadingProbe, image) -> ShadingMap:
    img = torch.as_tensor(np.asarray(image, dtype=np.float32))
    with torch.no_grad():
        out = probe(img[None])[0, 0].numpy()
    return ShadingMap(out.astype(np.float64), np.ones_like(out, dtype=np.float64))


def scene_rasters(inputs: RenderInputs, face_model: BlendshapeModel, albedo_fn):
    """Proxy and detailed rasters plus their shaded albedos.

    ``albedo_fn(albedo_params, uv) -> (3, ...)`` is the smooth albedo generator.
    Returns ((proxy_raster, proxy_shading, proxy_albedo), (detailed_...)).
    """
    mesh = build_face_mesh(inputs.shape_params, inputs.expr_params, face_model)
    out = []
    for geom in (mesh, apply_detail_displacement(mesh, inputs.detail_map)):
        raster = rasterize_uv(geom, inputs.camera)
        shade = shading_map(raster, inputs.light)
        shaded = albedo_fn(inputs.albedo_params, raster.uv) * shade.data[None] * raster.mask[None]
        out.append((raster, shade, np.clip(shaded, 0.0, 1.0)))
    return out


def render(model: Renderer, inputs: RenderInputs, face_model: BlendshapeModel | None = None,
           albedo_fn=None) -> RenderOutput:
    """Single-scene inference; defaults take the face model and albedo from the synthetic universe."""
    if face_model is None or albedo_fn is None:
        from .synthdata import get_universe, smooth_albedo
        face_model = face_model or get_universe().model
        albedo_fn = albedo_fn or smooth_albedo
    (rp, _, ap), (rd, _, ad) = scene_rasters(inputs, face_model, albedo_fn)
    tex_size = inputs.texture_map.shape[-2:]
    proxy = RasterBatch.stack([raster_item(rp, ap, tex_size)])
    detailed = RasterBatch.stack([raster_item(rd, ad, tex_size)])
    cond = torch.as_tensor(condition_vector(inputs.au, inputs.albedo_params, inputs.light))[None]
    tex = torch.as_tensor(inputs.texture_map)[None]
    with torch.no_grad():
        out = model(tex, proxy, detailed, cond)
    return RenderOutput(out.image_lr[0], out.image_detail[0], out.image_raw[0], out.image[0])
