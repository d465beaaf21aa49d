"""File formats: PFM float maps, PNG images, Wavefront OBJ meshes and weight checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- PFM

def write_pfm(path, data):
    """Write a little-endian PFM. ``data`` is (H, W) or (H, W, 3)."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise FormatError(f"PFM needs (H, W) or (H, W, 3) data, got {arr.shape}")
    h, w = arr.shape[:2]
    # PFM stores rows bottom-to-top.
    body = np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + body)


def read_pfm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"Pf", b"PF"):
        raise FormatError(f"{path}: not a PFM file")
    channels = 1 if parts[0] == b"Pf" else 3
    try:
        w, h = (int(t) for t in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    arr = np.frombuffer(parts[3], dtype=dtype, count=count)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return arr.reshape(shape)[::-1].astype(np.float32)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------- PNG

def write_png(path, image):
    """``image`` is float (3, H, W) or (H, W) in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG", optimize=False)


def read_png(path):
    """Return float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


# ---------------------------------------------------------------- OBJ

def write_obj(path, vertices, faces, uv=None):
    lines = []
    for v in np.asarray(vertices, dtype=np.float64):
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    if uv is not None:
        for t in np.asarray(uv, dtype=np.float64):
            lines.append(f"vt {t[0]:.9g} {t[1]:.9g}")
    for f in np.asarray(faces, dtype=np.int64) + 1:
        if uv is not None:
            lines.append(f"f {f[0]}/{f[0]} {f[1]}/{f[1]} {f[2]}/{f[2]}")
        else:
            lines.append(f"f {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path):
    """Read v/vt/f records. Returns (vertices, faces, uv or None).

    Only meshes whose vt indices coincide with v indices are supported, which
    is what ``write_obj`` produces.
    """
    verts, uvs, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "vt":
            uvs.append([float(x) for x in tok[1:3]])
        elif tok[0] == "f":
            if len(tok) != 4:
                raise FormatError("only triangular faces are supported")
            idx = []
            for corner in tok[1:]:
                fields = corner.split("/")
                vi = int(fields[0]) - 1
                if len(fields) > 1 and fields[1] and int(fields[1]) - 1 != vi:
                    raise FormatError("vt index must equal v index")
                idx.append(vi)
            faces.append(idx)
    uv = np.asarray(uvs, dtype=np.float64) if uvs else None
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64), uv


# ---------------------------------------------------------------- checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, arrays, config, extra=None):
    """Single zip archive: ``manifest.json`` plus one float32 ``.npy`` per named array.

    Entries carry a fixed timestamp so identical weights give identical bytes.
    """
    names = sorted(arrays)
    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "arrays": [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names],
    }
    if extra:
        manifest["extra"] = extra
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for n in names:
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[n], dtype=np.float32).reshape(-1))
            zf.writestr(zipfile.ZipInfo(f"weights/{n}.npy", date_time=_ZIP_DATE), buf.getvalue())


def load_checkpoint(path):
    """Return (arrays, manifest). Raises FormatError on a corrupt manifest."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if config_hash(manifest["config"]) != manifest["config_hash"]:
            raise FormatError(f"{path}: config hash does not match stored config")
        arrays = {}
        for entry in manifest["arrays"]:
            flat = np.load(io.BytesIO(zf.read(f"weights/{entry['name']}.npy")))
            arrays[entry["name"]] = flat.reshape(entry["shape"])
    return arrays, manifest
