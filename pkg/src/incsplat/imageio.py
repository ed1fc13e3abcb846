"""Binary image and point-cloud file I/O: PPM (P6), PFM, and PLY.

All formats round-trip bit-exactly; PFM is written little-endian with
scale -1.0, color PPM is 8-bit.
"""

from __future__ import annotations

import numpy as np

from .errors import BadFormat


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H,W,3) float image in [0,1] as binary P6."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read binary P6 into an (H,W,3) float64 image in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise BadFormat(f"{path}: not a P6 PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise BadFormat(f"{path}: only 8-bit PPM supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pix.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pfm(path, image: np.ndarray) -> None:
    """Write an (H,W) float map as grayscale PFM (little-endian, scale -1)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise BadFormat("PFM writer expects a single-channel image")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        # PFM stores rows bottom-to-top
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise BadFormat(f"{path}: not a grayscale PFM")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        raw = f.read(w * h * 4)
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return np.ascontiguousarray(img[::-1]).astype(np.float32)


_PLY_DTYPES = {
    b"float": ("<f4", 4), b"float32": ("<f4", 4),
    b"double": ("<f8", 8), b"float64": ("<f8", 8),
    b"uchar": ("<u1", 1), b"uint8": ("<u1", 1),
    b"char": ("<i1", 1), b"int8": ("<i1", 1),
    b"short": ("<i2", 2), b"ushort": ("<u2", 2),
    b"int": ("<i4", 4), b"int32": ("<i4", 4),
    b"uint": ("<u4", 4), b"uint32": ("<u4", 4),
}


def read_ply_points(path) -> np.ndarray:
    """Read x,y,z from a binary little-endian PLY vertex element: (N,3) f64."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise BadFormat(f"{path}: missing ply magic")
        fmt = None
        count = 0
        fields = []  # (name, numpy dtype, size) in declaration order
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise BadFormat(f"{path}: truncated header")
            parts = line.split()
            if not parts:
                continue
            if parts[0] == b"format":
                fmt = parts[1]
            elif parts[0] == b"element":
                in_vertex = parts[1] == b"vertex"
                if in_vertex:
                    count = int(parts[2])
            elif parts[0] == b"property" and in_vertex:
                if parts[1] == b"list":
                    raise BadFormat(f"{path}: list property in vertex element")
                dt, size = _PLY_DTYPES[parts[1]]
                fields.append((parts[2].decode(), dt, size))
            elif parts[0] == b"end_header":
                break
        if fmt != b"binary_little_endian":
            raise BadFormat(f"{path}: only binary little-endian PLY supported")
        dtype = np.dtype([(name, dt) for name, dt, _ in fields])
        rec = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype, count=count)
    try:
        return np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    except KeyError as e:
        raise BadFormat(f"{path}: vertex element lacks x/y/z") from e


def write_ply_points(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\n")
        f.write(f"element vertex {len(pts)}\n".encode())
        f.write(b"property float x\nproperty float y\nproperty float z\n")
        f.write(b"end_header\n")
        f.write(np.ascontiguousarray(pts).tobytes())
