"""Expression-conditioned facial detail prediction and detail-aware neural rendering."""

import os

import torch

__version__ = "0.1.0"

AU_DIM = 17
EXPR_DIM = 8
SHAPE_DIM = 8
ID_DIM = 128
AGE_DIM = 32
ALBEDO_DIM = 8
NTEX_CHANNELS = 16
SH_DIM = 9

DETAIL_RES = 64
IMAGE_RES = 64
TEXTURE_RES = 64
DISPLACEMENT_CAP = 0.1
SHADING_FLOOR = 1e-3


def configure_threads():
    """Honour FACEDET3D_THREADS as a cap on torch worker threads."""
    value = os.environ.get("FACEDET3D_THREADS")
    if value:
        torch.set_num_threads(max(1, int(value)))
