"""Second-order spherical-harmonic lighting and the shading-ratio wrinkle transplant."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import SHADING_FLOOR
from .facegeom import UVRasterBuffer

logger = logging.getLogger(__name__)

_C0 = 0.5 / np.sqrt(np.pi)
_C1 = np.sqrt(3.0 / (4.0 * np.pi))
_C2 = 0.5 * np.sqrt(15.0 / np.pi)
_C20 = 0.25 * np.sqrt(5.0 / np.pi)
_C22 = 0.25 * np.sqrt(15.0 / np.pi)

# Lambertian convolution weights per band (A_l / pi).
_LAMBERT_BAND = np.array([1.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 0.25, 0.25, 0.25, 0.25, 0.25])


def sh_basis(normal):
    """Real SH basis up to l=2, ordered Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22.

    Accepts (3,) or (..., 3). Non-unit input is renormalised.
    """
    n = np.asarray(normal, dtype=np.float64)
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    if np.any(np.abs(length - 1.0) > 1e-2):
        logger.warning("sh_basis received non-unit normals (max deviation %.3g)",
                       float(np.abs(length - 1.0).max()))
    n = n / np.where(length > 0, length, 1.0)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, _C0),
        _C1 * y,
        _C1 * z,
        _C1 * x,
        _C2 * x * y,
        _C2 * y * z,
        _C20 * (3.0 * z * z - 1.0),
        _C2 * x * z,
        _C22 * (x * x - y * y),
    ], axis=-1)


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=-1)


@dataclass
class LightCoeffs:
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (9,) or not np.all(np.isfinite(self.coeffs)):
            raise ValueError("light needs 9 finite SH coefficients")

    @classmethod
    def directional(cls, direction, intensity=1.0, ambient=0.0):
        """Irradiance coefficients of a distant light plus a constant ambient term."""
        d = np.asarray(direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        c = intensity * _LAMBERT_BAND * sh_basis(d)
        c[0] += ambient / _C0
        return cls(c)

    def min_over_sphere(self, n=2048):
        return float((sh_basis(fibonacci_sphere(n)) @ self.coeffs).min())

    def with_min_shading(self, floor=SHADING_FLOOR):
        """Raise the DC term so the unclamped shading over the sphere stays >= floor."""
        deficit = floor - self.min_over_sphere()
        c = self.coeffs.copy()
        if deficit > 0:
            c[0] += deficit / _C0
        return LightCoeffs(c)

    def to_list(self):
        return self.coeffs.tolist()


@dataclass
class ShadingMap:
    data: np.ndarray
    mask: np.ndarray


def shade_normals(normals, light: LightCoeffs, floor=SHADING_FLOOR):
    """Clamped SH irradiance for an array of unit normals (..., 3)."""
    return np.maximum(sh_basis(normals) @ light.coeffs, floor)


def shading_map(raster: UVRasterBuffer, light: LightCoeffs, floor=SHADING_FLOOR) -> ShadingMap:
    mask = raster.mask.astype(np.float64)
    covered = mask > 0
    data = np.zeros(mask.shape)
    data[covered] = shade_normals(raster.normal[covered].astype(np.float64), light, floor)
    return ShadingMap(data, mask)


def augment_wrinkles(image, shading: ShadingMap, shading_star: ShadingMap, clip=True):
    """Transplant wrinkles by re-shading: ``I* = S* . I / S`` on covered pixels, clipped to [0, 1].

    Pixels not covered by both shadings are copied through unchanged.
    """
    img = np.asarray(image, dtype=np.float64)
    covered = (shading.mask > 0) & (shading_star.mask > 0)
    ratio = np.ones_like(shading.data)
    ratio[covered] = shading_star.data[covered] / shading.data[covered]
    out = np.where(covered[None], img * ratio[None], img)
    return np.clip(out, 0.0, 1.0) if clip else out


def shade_albedo(albedo, shading: ShadingMap):
    return np.clip(np.asarray(albedo, dtype=np.float64) * shading.data[None], 0.0, 1.0)
