"""Minimal OpenEXR I/O: uncompressed single-part float scanline images.

Covers exactly what the synthetic ground-truth depth maps need (32-bit float
channels, no compression); not a general EXR reader.
"""

from __future__ import annotations

import struct

import numpy as np

_MAGIC = 20000630
_PIXEL_FLOAT = 2


def _attr(name: str, type_name: str, payload: bytes) -> bytes:
    return (name.encode() + b"\0" + type_name.encode() + b"\0"
            + struct.pack("<i", len(payload)) + payload)


def write_exr(path, channels: dict[str, np.ndarray]):
    """Write named float32 channels (all HxW) to an EXR file."""
    names = sorted(channels)
    arrays = [np.asarray(channels[n], dtype="<f4") for n in names]
    h, w = arrays[0].shape
    if any(a.shape != (h, w) for a in arrays):
        raise ValueError("all channels must share one resolution")

    chlist = b""
    for n in names:
        chlist += n.encode() + b"\0" + struct.pack("<iBBBBii", _PIXEL_FLOAT,
                                                   0, 0, 0, 0, 1, 1)
    chlist += b"\0"
    box = struct.pack("<4i", 0, 0, w - 1, h - 1)
    header = (
        _attr("channels", "chlist", chlist)
        + _attr("compression", "compression", b"\0")
        + _attr("dataWindow", "box2i", box)
        + _attr("displayWindow", "box2i", box)
        + _attr("lineOrder", "lineOrder", b"\0")
        + _attr("pixelAspectRatio", "float", struct.pack("<f", 1.0))
        + _attr("screenWindowCenter", "v2f", struct.pack("<2f", 0.0, 0.0))
        + _attr("screenWindowWidth", "float", struct.pack("<f", 1.0))
        + b"\0"
    )
    head = struct.pack("<ii", _MAGIC, 2) + header
    table_pos = len(head)
    data_pos = table_pos + 8 * h
    line_bytes = 4 * w * len(names)
    with open(path, "wb") as f:
        f.write(head)
        for y in range(h):
            f.write(struct.pack("<Q", data_pos + y * (8 + line_bytes)))
        for y in range(h):
            f.write(struct.pack("<ii", y, line_bytes))
            for a in arrays:
                f.write(a[y].tobytes())


def _read_cstring(f) -> str:
    out = b""
    while True:
        c = f.read(1)
        if c in (b"", b"\0"):
            return out.decode()
        out += c


def read_exr(path) -> dict[str, np.ndarray]:
    """Read an EXR written by write_exr. Returns {name: float array}."""
    with open(path, "rb") as f:
        magic, version = struct.unpack("<ii", f.read(8))
        if magic != _MAGIC:
            raise ValueError(f"not an EXR file: {path}")
        if version & 0x200:
            raise ValueError("multi-part EXR not supported")
        names = []
        window = None
        compression = None
        while True:
            attr_name = _read_cstring(f)
            if attr_name == "":
                break
            type_name = _read_cstring(f)
            (size,) = struct.unpack("<i", f.read(4))
            payload = f.read(size)
            if attr_name == "channels":
                pos = 0
                while payload[pos] != 0:
                    end = payload.index(b"\0", pos)
                    names.append(payload[pos:end].decode())
                    (ptype,) = struct.unpack_from("<i", payload, end + 1)
                    if ptype != _PIXEL_FLOAT:
                        raise ValueError("only FLOAT channels supported")
                    pos = end + 1 + 16
            elif attr_name == "dataWindow":
                window = struct.unpack("<4i", payload)
            elif attr_name == "compression":
                compression = payload[0]
        if compression != 0:
            raise ValueError("only uncompressed EXR supported")
        x0, y0, x1, y1 = window
        w, h = x1 - x0 + 1, y1 - y0 + 1
        f.read(8 * h)                     # scanline offset table
        out = {n: np.empty((h, w), dtype=np.float32) for n in names}
        for _ in range(h):
            y, nbytes = struct.unpack("<ii", f.read(8))
            if nbytes != 4 * w * len(names):
                raise ValueError("unexpected scanline size")
            for n in names:
                out[n][y - y0] = np.frombuffer(f.read(4 * w), dtype="<f4")
    return out
