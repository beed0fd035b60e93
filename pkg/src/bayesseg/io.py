"""File formats: BTSR tensors, binary PGM/PPM images, dataset directories.

BTSR layout (all little-endian)::

    b"BTSR" | version u8 (=1) | dtype u8 (1=f32, 2=f64) | rank u8 | dims u32 * rank | payload
"""

import os
import struct

import numpy as np

BTSR_MAGIC = b"BTSR"
BTSR_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """A file does not match the format it claims to be."""


# ---------------------------------------------------------------------------
# BTSR


def encode_btsr(array):
    array = np.asarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise FormatError(f"BTSR stores float32/float64 only, got dtype {array.dtype}")
    if array.ndim > 255:
        raise FormatError(f"BTSR rank is a single byte, got rank {array.ndim}")
    code = _DTYPE_CODES[array.dtype]
    header = BTSR_MAGIC + struct.pack("<BBB", BTSR_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_CODE_DTYPES[code]).tobytes()
    return header + payload


def decode_btsr(buf, offset=0):
    """Decode one BTSR record from ``buf`` at ``offset``.

    Returns ``(array, next_offset)`` so records can be concatenated.
    """
    if len(buf) - offset < 7:
        raise FormatError(f"BTSR header truncated: need 7 bytes, have {len(buf) - offset}")
    magic = bytes(buf[offset:offset + 4])
    if magic != BTSR_MAGIC:
        raise FormatError(f"BTSR magic: expected {BTSR_MAGIC!r}, found {magic!r}")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != BTSR_VERSION:
        raise FormatError(f"BTSR version: expected {BTSR_VERSION}, found {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"BTSR dtype code: expected 1 or 2, found {code}")
    pos = offset + 7
    if len(buf) - pos < 4 * rank:
        raise FormatError(f"BTSR dims truncated: rank {rank} needs {4 * rank} bytes, have {len(buf) - pos}")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(buf) - pos
    if actual < expected:
        raise FormatError(f"BTSR payload length: expected {expected} bytes, found {actual}")
    arr = np.frombuffer(buf, dtype=dtype, count=expected // dtype.itemsize, offset=pos)
    native = dtype.newbyteorder("=")
    return arr.reshape(dims).astype(native), pos + expected


def write_btsr(array, path):
    with open(path, "wb") as fh:
        fh.write(encode_btsr(array))


def read_btsr(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_btsr(buf)
    if end != len(buf):
        raise FormatError(f"BTSR payload length: expected {end} bytes in file, found {len(buf)}")
    return arr


# ---------------------------------------------------------------------------
# PGM / PPM


def encode_pnm(pixels):
    """Binary PGM (2-D) or PPM (H, W, 3) with maxval 255 from uint8 data."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"PNM needs (H, W) or (H, W, 3) data, got shape {pixels.shape}")
    if pixels.dtype != np.uint8:
        raise FormatError(f"PNM payload must be uint8, got {pixels.dtype}")
    h, w = pixels.shape[:2]
    return magic + f" {w} {h} 255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def _pnm_tokens(buf, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PNM header truncated")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def decode_pnm(buf):
    tokens, pos = _pnm_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"PNM magic: expected P5 or P6, found {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"PNM header fields are not integers: {tokens[1:]}") from exc
    if maxval != 255:
        raise FormatError(f"PNM maxval: expected 255, found {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = w * h * channels
    actual = len(buf) - pos
    if actual != expected:
        raise FormatError(f"PNM payload length: expected {expected} bytes, found {actual}")
    data = np.frombuffer(buf, dtype=np.uint8, offset=pos).copy()
    return data.reshape((h, w, 3) if channels == 3 else (h, w))


def write_mask(mask, path):
    """Write a label mask as PGM with class indices as gray levels."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise FormatError(f"mask labels must lie in [0, 255], found range [{mask.min()}, {mask.max()}]")
    with open(path, "wb") as fh:
        fh.write(encode_pnm(mask.astype(np.uint8)))


def read_mask(path):
    with open(path, "rb") as fh:
        data = decode_pnm(fh.read())
    if data.ndim != 2:
        raise FormatError(f"{path}: mask must be a PGM, found 3-channel data")
    return data.astype(np.int64)


def quantize(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(image, path):
    """Write a float image in [0, 1] as PPM (3 channels) or PGM (1 channel)."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    with open(path, "wb") as fh:
        fh.write(encode_pnm(quantize(image)))


def read_image(path):
    """Read a PPM/PGM into float32 ``(H, W, C)`` in [0, 1]."""
    with open(path, "rb") as fh:
        data = decode_pnm(fh.read())
    if data.ndim == 2:
        data = data[..., None]
    return data.astype(np.float32) / np.float32(255.0)


def write_heatmap(values, path):
    """Min-max normalize a 2-D map into a PGM; record the range in ``<path>.txt``."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    scaled = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    with open(path, "wb") as fh:
        fh.write(encode_pnm(quantize(scaled)))
    with open(path + ".txt", "w") as fh:
        fh.write(f"min = {lo!r}\nmax = {hi!r}\n")


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(out_dir, images, masks, header_lines=(), split=None):
    """Write ``images/NNNN.ppm``, ``masks/NNNN.pgm``, ``manifest.txt`` and ``split.txt``."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    lines = [f"# {line}" for line in header_lines]
    for i, (img, mask) in enumerate(zip(images, masks)):
        ext = "ppm" if img.shape[-1] == 3 else "pgm"
        img_rel, mask_rel = f"images/{i:04d}.{ext}", f"masks/{i:04d}.pgm"
        write_image(img, os.path.join(out_dir, img_rel))
        write_mask(mask, os.path.join(out_dir, mask_rel))
        lines.append(f"{img_rel} {mask_rel}")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if split is not None:
        write_split(split, os.path.join(out_dir, "split.txt"))


def read_manifest(data_dir):
    path = os.path.join(data_dir, "manifest.txt")
    pairs, header = [], {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "=" in line:
                    key, value = line[1:].split("=", 1)
                    header[key.strip()] = value.strip()
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{path}: manifest line must hold 'image mask', got {line!r}")
            pairs.append(tuple(parts))
    return pairs, header


def read_dataset(data_dir):
    pairs, header = read_manifest(data_dir)
    images = [read_image(os.path.join(data_dir, a)) for a, _ in pairs]
    masks = [read_mask(os.path.join(data_dir, b)) for _, b in pairs]
    return images, masks, header


def write_split(split, path):
    with open(path, "w") as fh:
        for name in ("train", "val", "test"):
            fh.write(f"{name} = {' '.join(str(i) for i in getattr(split, name))}\n")


def read_split(path):
    from .training import SplitSpec

    parts = {}
    with open(path) as fh:
        for raw in fh:
            if not raw.strip():
                continue
            if "=" not in raw:
                raise FormatError(f"{path}: expected 'name = indices', got {raw.strip()!r}")
            key, value = raw.split("=", 1)
            parts[key.strip()] = [int(v) for v in value.split()]
    missing = {"train", "val", "test"} - parts.keys()
    if missing:
        raise FormatError(f"{path}: missing split lists {sorted(missing)}")
    return SplitSpec(parts["train"], parts["val"], parts["test"])
