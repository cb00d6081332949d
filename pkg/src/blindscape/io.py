"""Raster file I/O.

The native format is IGRID: a single JSON header line
``{"channels": c, "height": h, "width": w, "dtype": "f32"}`` followed by the
raw little-endian float32 samples in row-major (channel, row, column) order.
8-bit PNG/PGM files are also accepted for convenience, with values mapped to
[0, 1].
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .grids import ImageGrid, Kernel

IGRID_DTYPE = "<f4"


def save_igrid(path, grid: ImageGrid) -> None:
    c, h, w = grid.shape
    header = json.dumps({"channels": c, "height": h, "width": w, "dtype": "f32"})
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(grid.data, dtype=IGRID_DTYPE).tobytes())


def load_igrid(path) -> ImageGrid:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("dtype") != "f32":
            raise ValueError(f"unsupported IGRID dtype {header.get('dtype')!r}")
        shape = (header["channels"], header["height"], header["width"])
        count = shape[0] * shape[1] * shape[2]
        raw = fh.read(count * 4)
    if len(raw) != count * 4:
        raise ValueError(f"IGRID payload truncated: expected {count * 4} bytes, got {len(raw)}")
    return ImageGrid(np.frombuffer(raw, dtype=IGRID_DTYPE).reshape(shape))


def load_image(path) -> ImageGrid:
    """Load an IGRID, PNG, or PGM file as an ImageGrid."""
    path = Path(path)
    if path.suffix.lower() == ".igrid":
        return load_igrid(path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return ImageGrid(arr)


def save_image(path, grid: ImageGrid) -> None:
    """Save as IGRID, or as 8-bit PNG/PGM with values clipped to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".igrid":
        save_igrid(path, grid)
        return
    from PIL import Image

    arr = np.clip(grid.data, 0.0, 1.0)
    quant = np.round(arr * 255.0).astype(np.uint8)
    if quant.shape[0] == 1:
        im = Image.fromarray(quant[0], mode="L")
    elif quant.shape[0] == 3:
        im = Image.fromarray(np.moveaxis(quant, 0, -1), mode="RGB")
    else:
        raise ValueError(f"cannot export {quant.shape[0]}-channel image to {path.suffix}")
    im.save(path)


def save_kernel(path, kernel: Kernel) -> None:
    save_igrid(path, ImageGrid(kernel.weights[np.newaxis]))


def load_kernel(path) -> Kernel:
    grid = load_igrid(path)
    if grid.shape[0] != 1:
        raise ValueError("kernel files must have a single channel")
    return Kernel(grid.data[0])
