"""Grayscale text-line images: loading and height normalization.

An image is a 2-D float64 array, shape (height, width), intensities in
[0, 1]. Ink is kept as written (dark ink on light ground, no inversion,
no binarization); downstream gradient features do not care about
polarity. Binary PGM (P5, maxval <= 255) is parsed natively and
byte-exactly; other raster formats go through Pillow when installed.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError

DEFAULT_HEIGHT = 55


def _require_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    return img


def load_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) file into a [0,1] float image."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) == 0:
        raise FormatError(f"{path}: empty file")
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (missing P5 magic)")

    # Header tokens may be separated by whitespace and '#' comments.
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval

    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header fields") from None
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad PGM dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise FormatError(f"{path}: unsupported PGM maxval {maxval}")

    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise FormatError(f"{path}: PGM raster shorter than header promises")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return img.astype(np.float64) / maxval


def save_pgm(img: np.ndarray, path) -> None:
    """Write a [0,1] float image as binary PGM, maxval 255."""
    img = _require_image(img)
    h, w = img.shape
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(raster.tobytes())


def load_image(path) -> np.ndarray:
    """Load a raster file as a grayscale [0,1] image.

    PGM is handled natively; anything else is delegated to Pillow and
    color inputs are reduced by averaging the channels.
    """
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        return load_pgm(path)
    try:
        from PIL import Image
    except ImportError:
        raise FormatError(
            f"{path}: not a binary PGM and Pillow is not installed"
        ) from None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
    except Exception as exc:
        raise FormatError(f"{path}: unreadable raster file ({exc})") from None
    if arr.ndim == 3:
        arr = arr[:, :, :3].mean(axis=2)
    if arr.max(initial=0.0) > 1.0:
        arr = arr / 255.0
    return np.clip(arr, 0.0, 1.0)


def normalize_height(img: np.ndarray, target_height: int = DEFAULT_HEIGHT) -> np.ndarray:
    """Rescale to a fixed height, keeping the aspect ratio, bilinearly.

    Output width is round(width * target_height / height), at least 1.
    Resampling uses pixel-center alignment, so an image already at the
    target height comes back unchanged.
    """
    img = _require_image(img)
    if target_height < 1:
        raise ValueError("target_height must be >= 1")
    in_h, in_w = img.shape
    out_h = int(target_height)
    out_w = max(1, int(np.floor(in_w * target_height / in_h + 0.5)))

    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = ys.astype(np.intp)
    x0 = xs.astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]

    top = (1.0 - wx) * img[np.ix_(y0, x0)] + wx * img[np.ix_(y0, x1)]
    bot = (1.0 - wx) * img[np.ix_(y1, x0)] + wx * img[np.ix_(y1, x1)]
    return (1.0 - wy) * top + wy * bot
