"""Image grid for offline review: input, reconstruction, expression edits and shaded geometry."""

from __future__ import annotations

import numpy as np

from .detailnet import SubjectFeatures, detp_forward
from .rendernet import RenderInputs, render, scene_rasters
from .synthdata import (SynthConfig, expression_from_au, get_universe, sample_expression, smooth_albedo,
                        surrogate_age_embed, surrogate_face_embed)

GAP = 2


def _tile(img):
    arr = np.asarray(img, dtype=np.float64)
    return np.repeat(arr[None], 3, 0) if arr.ndim == 2 else arr


def _grid(rows):
    """Lay out rows of (3, H, W) tiles (None = blank) on a white canvas."""
    h, w = next(t for row in rows for t in row if t is not None).shape[1:]
    n_cols = max(len(r) for r in rows)
    canvas = np.ones((3, len(rows) * (h + GAP) - GAP, n_cols * (w + GAP) - GAP))
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            if tile is not None:
                y, x = i * (h + GAP), j * (w + GAP)
                canvas[:, y:y + h, x:x + w] = tile
    return canvas


def _shading_tile(shade):
    peak = float(shade.data.max()) if shade.mask.any() else 1.0
    return _tile(shade.data / max(peak, 1e-12))


def report_grid(samples, index, detp, renderer, synth: SynthConfig = SynthConfig(), n_targets=3, seed=0):
    """Top row: input | reconstruction | renders for ``n_targets`` random expressions.

    Bottom row: shading of the detailed geometry under each column's detail map.
    """
    s = samples[index]
    model = get_universe(synth).model
    subj = SubjectFeatures(surrogate_face_embed(s.identity, synth), surrogate_age_embed(s.identity, synth))
    rng = np.random.default_rng(seed)

    def view(expr, details):
        inputs = RenderInputs(s.texture, details, s.identity.shape_params, expr.expr_params, expr.au,
                              s.camera, s.light, s.identity.albedo_params)
        out = render(renderer, inputs, model, lambda g, uv: smooth_albedo(g, uv, synth))
        (_, _, _), (_, shade, _) = scene_rasters(inputs, model, lambda g, uv: smooth_albedo(g, uv, synth))
        return out.image.numpy(), shade

    recon, shade = view(s.tgt, s.detail_tgt)
    top = [_tile(s.image), recon]
    bottom = [None, _shading_tile(shade)]
    for _ in range(n_targets):
        tgt = expression_from_au(sample_expression(rng, synth).au, synth)
        pred = detp_forward(detp, s.detail_tgt, s.tgt, tgt, subj).detail_map()
        img, shade = view(tgt, pred)
        top.append(img)
        bottom.append(_shading_tile(shade))
    return _grid([top, bottom])
