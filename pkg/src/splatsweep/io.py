"""File formats: PFM depth maps, binary PLY point clouds, camera text files,
flat key=value configs and metrics.

PFM: header "Pf\\n<w> <h>\\n<scale>\\n" followed by row-major float32 samples,
bottom row first; a negative scale marks little-endian data.

Camera text: token "extrinsic" then the 4x4 row-major world-to-camera
matrix, token "intrinsic" then the 3x3 row-major matrix, and a final line
"depth_min depth_interval [num_depth depth_max]".

PLY: "format binary_little_endian 1.0", element vertex with float x, y, z
and optional uchar red, green, blue.

Malformed input raises ParseError carrying the byte offset of the problem.
"""

from __future__ import annotations

import re

import numpy as np

from .camera import CameraParams


class ParseError(ValueError):
    """Malformed file content; offset is the byte position of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------


def write_pfm(path, data: np.ndarray, scale: float = -1.0):
    """Write a (H, W) or (H, W, 3) float32 grid; negative scale = little-endian."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        header = b"Pf\n"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM supports 1 or 3 channels, got shape {a.shape}")
    if scale == 0:
        raise ValueError("PFM scale must be non-zero")
    h, w = a.shape[:2]
    body = np.flipud(a)  # bottom row first
    if scale < 0:
        body = body.astype("<f4")
    else:
        body = body.astype(">f4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(f"{scale}\n".encode("ascii"))
        f.write(body.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file back into a float32 array ((H, W) or (H, W, 3))."""
    with open(path, "rb") as f:
        raw = f.read()
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise ParseError("unexpected end of PFM header", pos)
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        return raw[start:pos], start

    magic, off = next_token()
    if magic not in (b"Pf", b"PF"):
        raise ParseError(f"bad PFM magic {magic!r}", off)
    channels = 3 if magic == b"PF" else 1
    dims = []
    for _ in range(2):
        tok, off = next_token()
        try:
            dims.append(int(tok))
        except ValueError:
            raise ParseError(f"bad PFM dimension {tok!r}", off) from None
    w, h = dims
    if w <= 0 or h <= 0:
        raise ParseError(f"bad PFM size {w}x{h}", off)
    tok, off = next_token()
    try:
        scale = float(tok)
    except ValueError:
        raise ParseError(f"bad PFM scale {tok!r}", off) from None
    pos += 1  # single whitespace byte after the scale line
    expected = w * h * channels * 4
    if len(raw) - pos < expected:
        raise ParseError(
            f"truncated PFM payload: need {expected} bytes, have {len(raw) - pos}", pos
        )
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype, count=w * h * channels, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def write_ply(path, points: np.ndarray, colors=None):
    """Write a binary little-endian PLY of float32 vertices (+ uchar RGB)."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float32))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    n = pts.shape[0]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += ["property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.ascontiguousarray(np.asarray(colors, dtype=np.uint8))
        if colors.shape != (n, 3):
            raise ValueError("colors must be (N, 3) uint8")
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
        rec["xyz"] = pts
        rec["rgb"] = colors
    else:
        rec = np.zeros(n, dtype=[("xyz", "<f4", 3)])
        rec["xyz"] = pts
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path):
    """Read a binary little-endian PLY; returns (points (N,3) f32, colors or None)."""
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ParseError("missing end_header", 0)
    body_off = end + len(b"end_header\n")
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()
    if not header_lines or header_lines[0].strip() != "ply":
        raise ParseError("missing ply magic", 0)
    fmt = next((l for l in header_lines if l.startswith("format")), "")
    if fmt.strip() != "format binary_little_endian 1.0":
        raise ParseError(f"unsupported PLY format {fmt!r}", raw.find(b"format"))
    n = None
    props = []
    for line in header_lines:
        m = re.match(r"element vertex (\d+)", line.strip())
        if m:
            n = int(m.group(1))
        m = re.match(r"property (float|uchar) (\w+)", line.strip())
        if m:
            props.append((m.group(1), m.group(2)))
    if n is None:
        raise ParseError("missing vertex element", 0)
    names = [p[1] for p in props]
    if names[:3] != ["x", "y", "z"]:
        raise ParseError(f"expected x, y, z leading properties, got {names}", 0)
    has_rgb = names[3:6] == ["red", "green", "blue"]
    dtype = [("xyz", "<f4", 3)] + ([("rgb", "u1", 3)] if has_rgb else [])
    rec_size = 12 + (3 if has_rgb else 0)
    if len(raw) - body_off < n * rec_size:
        raise ParseError(
            f"truncated PLY payload: need {n * rec_size} bytes, have {len(raw) - body_off}",
            body_off,
        )
    rec = np.frombuffer(raw, dtype=dtype, count=n, offset=body_off)
    pts = rec["xyz"].copy()
    colors = rec["rgb"].copy() if has_rgb else None
    return pts, colors


# ---------------------------------------------------------------------------
# camera text files
# ---------------------------------------------------------------------------


def write_cam_txt(path, cam: CameraParams, num_depth: int = 192):
    """Write the camera in the extrinsic/intrinsic/depth-line text layout."""
    interval = (cam.depth_max - cam.depth_min) / max(num_depth - 1, 1)
    lines = ["extrinsic"]
    for row in cam.extrinsics:
        lines.append(" ".join(repr(v) for v in row))
    lines.append("")
    lines.append("intrinsic")
    for row in cam.intrinsics:
        lines.append(" ".join(repr(v) for v in row))
    lines.append("")
    lines.append(f"{cam.depth_min!r} {interval!r} {num_depth} {cam.depth_max!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_cam_txt(
    path, image_width: int, image_height: int, default_num_depth: int = 192
) -> CameraParams:
    """Parse a camera text file; image size is not stored in the format.

    When the trailing line carries only depth_min and depth_interval, the
    depth range is completed as depth_min + interval * (default_num_depth-1).
    """
    with open(path, "rb") as f:
        raw = f.read()
    tokens = [(m.group(0), m.start()) for m in re.finditer(rb"\S+", raw)]
    idx = 0

    def expect_word(word: bytes):
        nonlocal idx
        if idx >= len(tokens):
            raise ParseError(f"missing token {word.decode()!r}", len(raw))
        tok, off = tokens[idx]
        if tok != word:
            raise ParseError(f"expected {word.decode()!r}, found {tok.decode()!r}", off)
        idx += 1

    def take_floats(count: int):
        nonlocal idx
        vals = []
        for _ in range(count):
            if idx >= len(tokens):
                raise ParseError("unexpected end of camera file", len(raw))
            tok, off = tokens[idx]
            try:
                vals.append(float(tok))
            except ValueError:
                raise ParseError(f"bad number {tok.decode()!r}", off) from None
            idx += 1
        return vals

    expect_word(b"extrinsic")
    extr = np.array(take_floats(16)).reshape(4, 4)
    expect_word(b"intrinsic")
    intr = np.array(take_floats(9)).reshape(3, 3)
    remaining = len(tokens) - idx
    if remaining < 2:
        raise ParseError("missing depth range line", len(raw))
    rest = take_floats(min(remaining, 4))
    depth_min, interval = rest[0], rest[1]
    if len(rest) >= 4:
        depth_max = rest[3]
    else:
        depth_max = depth_min + interval * (default_num_depth - 1)
    return CameraParams(intr, extr, depth_min, depth_max, image_width, image_height)


# ---------------------------------------------------------------------------
# flat config and metrics files
# ---------------------------------------------------------------------------


def read_config(path) -> dict:
    """Parse a flat key=value file; '#' starts a comment, sections are dotted keys."""
    out = {}
    with open(path, "rb") as f:
        raw = f.read()
    offset = 0
    for line in raw.split(b"\n"):
        stripped = line.split(b"#", 1)[0].strip()
        if stripped:
            if b"=" not in stripped:
                raise ParseError(f"expected key=value, got {stripped.decode()!r}", offset)
            key, value = stripped.split(b"=", 1)
            out[key.strip().decode()] = value.strip().decode()
        offset += len(line) + 1
    return out


def write_config(path, values: dict):
    with open(path, "w") as f:
        for key, value in values.items():
            f.write(f"{key}={value}\n")


def write_metrics(path, metrics: dict):
    """One "key value" pair per line; floats printed with 9 significant digits."""
    with open(path, "w") as f:
        for key, value in metrics.items():
            if isinstance(value, float):
                f.write(f"{key} {value:.9g}\n")
            else:
                f.write(f"{key} {value}\n")


def read_metrics(path) -> dict:
    out = {}
    with open(path, "rb") as f:
        raw = f.read()
    offset = 0
    for line in raw.split(b"\n"):
        stripped = line.strip()
        if stripped:
            parts = stripped.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'key value', got {stripped.decode()!r}", offset)
            key, value = parts
            try:
                out[key.decode()] = float(value)
            except ValueError:
                out[key.decode()] = value.decode()
        offset += len(line) + 1
    return out
