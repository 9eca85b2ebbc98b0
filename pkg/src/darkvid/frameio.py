"""Frame file formats.

PFB ("planar float block") is the lossless intermediate: magic "PFB1",
little-endian u32 C, H, W, then C*H*W little-endian float32 values in
planar order. PNG (8- or 16-bit, via Pillow) is the human-viewable
interchange format, mapped to [0, 1] floats on read.

Frames are numpy arrays shaped (C, H, W), float32.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

PFB_MAGIC = b"PFB1"
_HEADER = struct.Struct("<4sIII")


class FrameFormatError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def write_pfb(path, frame):
    frame = np.asarray(frame)
    if frame.ndim != 3:
        raise FrameFormatError(f"frame must be (C, H, W), got shape {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise FrameFormatError("frame contains non-finite values")
    c, h, w = frame.shape
    payload = np.ascontiguousarray(frame, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(PFB_MAGIC, c, h, w))
        f.write(payload.tobytes())


def read_pfb(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FrameFormatError(
            f"truncated header: {len(raw)} bytes, need {_HEADER.size}", offset=len(raw))
    magic, c, h, w = _HEADER.unpack_from(raw)
    if magic != PFB_MAGIC:
        raise FrameFormatError(f"bad magic {magic!r}, expected {PFB_MAGIC!r}", offset=0)
    expected = c * h * w * 4
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise FrameFormatError(
            f"payload length mismatch: expected {expected} bytes for shape "
            f"({c},{h},{w}), got {actual}", offset=_HEADER.size)
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if not np.all(np.isfinite(data)):
        raise FrameFormatError("payload contains non-finite values", offset=_HEADER.size)
    return data.reshape(c, h, w).astype(np.float32)


def read_png(path):
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if mode in ("L", "RGB"):
        scale = 255.0
    elif mode in ("I;16", "I"):
        scale = 65535.0
    else:
        raise FrameFormatError(f"unsupported PNG mode {mode!r} in {path}")
    arr = arr.astype(np.float32) / scale
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path, frame):
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise FrameFormatError(f"PNG frame must be (1|3, H, W), got {frame.shape}")
    q = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path)
    else:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)


def read_frame(path):
    p = str(path)
    if p.endswith(".pfb"):
        return read_pfb(p)
    if p.endswith(".png"):
        return read_png(p)
    raise FrameFormatError(f"unknown frame extension: {p}")


def write_frame(path, frame):
    p = str(path)
    if p.endswith(".pfb"):
        write_pfb(p, frame)
    elif p.endswith(".png"):
        write_png(p, frame)
    else:
        raise FrameFormatError(f"unknown frame extension: {p}")
