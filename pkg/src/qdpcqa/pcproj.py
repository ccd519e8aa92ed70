"""Point cloud ingestion and six-view cube projection.

A cloud is normalized into [-1, 1]^3, rendered orthographically onto each
face of the bounding cube with a nearest-point depth buffer, and the six
faces are stitched into one 2 x 3 raster so point clouds and natural images
share one input format.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

FACES = ("+X", "-X", "+Y", "-Y", "+Z", "-Z")
# grid (row, col) of each face in the stitched image
LAYOUT = {"+X": (0, 0), "-X": (0, 1), "+Y": (0, 2), "-Y": (1, 0), "+Z": (1, 1), "-Z": (1, 2)}
GRID_ROWS, GRID_COLS = 2, 3


class PlyError(ValueError):
    """Malformed PLY content."""


class UnsupportedPlyFormat(PlyError):
    pass


class EmptyCloudError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        colors = np.asarray(self.colors)
        if colors.size and (colors.min() < 0 or colors.max() > 255):
            raise ValueError("colors must lie in [0, 255]")
        self.colors = colors.astype(np.uint8).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptyCloudError("point cloud has no points")
        if len(self.colors) != len(self.points):
            raise ValueError("one color per point required")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ProjectionConfig:
    face_resolution: int = 256
    background_color: tuple = (128, 128, 128)
    point_splat_radius: int = 1

    def __post_init__(self):
        if self.face_resolution < 8:
            raise ValueError("face_resolution must be at least 8")
        if self.point_splat_radius < 0:
            raise ValueError("point_splat_radius must be non-negative")


@dataclass
class MultiViewImage:
    pixels: np.ndarray  # H x W x 3 in [0, 1]
    source_id: str = ""
    face_boxes: dict = field(default_factory=dict)  # face -> (top, left, height, width)

    def face(self, name: str) -> np.ndarray:
        top, left, h, w = self.face_boxes[name]
        return self.pixels[top:top + h, left:left + w]


# -- PLY ------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_COLOR_NAMES = {"red": "r", "green": "g", "blue": "b", "r": "r", "g": "g", "b": "b"}


def _parse_header(fh):
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise PlyError("line 1: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyError(f"line {lineno}: header ended without end_header")
        line = raw.decode("ascii", errors="replace").strip()
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "end_header":
            break
        if key == "format":
            if len(parts) != 3:
                raise PlyError(f"line {lineno}: bad format line {line!r}")
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise UnsupportedPlyFormat(f"line {lineno}: unsupported format {fmt!r}")
        elif key == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyError(f"line {lineno}: bad element line {line!r}")
            elements.append((parts[1], int(parts[2]), []))
        elif key == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if len(parts) >= 2 and parts[1] == "list":
                if elements[-1][0] == "vertex":
                    raise UnsupportedPlyFormat(f"line {lineno}: list property in vertex element")
                elements[-1][2].append((parts[-1], "list"))
                continue
            if len(parts) != 3:
                raise PlyError(f"line {lineno}: bad property line {line!r}")
            if parts[1] not in _PLY_TYPES:
                raise UnsupportedPlyFormat(f"line {lineno}: unsupported property type {parts[1]!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise PlyError(f"line {lineno}: unexpected header keyword {key!r}")
    if fmt is None:
        raise PlyError("header has no format line")
    if not elements or elements[0][0] != "vertex":
        raise PlyError("first element must be 'vertex'")
    return fmt, elements[0], lineno


def load_ply(path) -> PointCloud:
    """Read vertex x/y/z (float or double) and optional uchar colors.

    Missing colors default to white.  Elements after ``vertex`` are ignored.
    """
    with open(path, "rb") as fh:
        fmt, (_, count, props), header_lines = _parse_header(fh)
        names = [p for p, _ in props]
        for axis in "xyz":
            if axis not in names:
                raise PlyError(f"vertex element lacks property {axis!r}")
        for p, t in props:
            if p in "xyz" and t not in ("f4", "f8"):
                raise UnsupportedPlyFormat(f"coordinate {p!r} must be float or double, got {t}")
        if count == 0:
            raise EmptyCloudError(f"{path}: zero vertices")
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        if fmt == "ascii":
            rows = []
            for k in range(count):
                raw = fh.readline()
                lineno = header_lines + k + 1
                if not raw.strip():
                    raise PlyError(f"line {lineno}: expected vertex {k + 1} of {count}, found end of data")
                vals = raw.split()
                if len(vals) != len(props):
                    raise PlyError(f"line {lineno}: expected {len(props)} values, got {len(vals)}")
                try:
                    rows.append(tuple(float(v) if t.startswith("f") else int(v) for v, (_, t) in zip(vals, props)))
                except ValueError:
                    raise PlyError(f"line {lineno}: non-numeric vertex value") from None
            data = np.array(rows, dtype=dtype)
        else:
            buf = fh.read(dtype.itemsize * count)
            if len(buf) < dtype.itemsize * count:
                got = len(buf) // dtype.itemsize
                raise PlyError(f"binary body holds {got} vertices, header declares {count}")
            data = np.frombuffer(buf, dtype=dtype, count=count)

    pts = np.stack([data[a].astype(np.float64) for a in "xyz"], axis=1)
    channels = {_COLOR_NAMES[p]: p for p in names if p in _COLOR_NAMES}
    if set(channels) == {"r", "g", "b"}:
        cols = np.stack([data[channels[c]] for c in "rgb"], axis=1)
    else:
        cols = np.full((count, 3), 255)
    return PointCloud(pts, cols)


def save_ply(path, pc: PointCloud, binary: bool = False) -> None:
    header = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {len(pc)}",
        "property double x", "property double y", "property double z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(len(pc), dtype=[("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                                           ("r", "u1"), ("g", "u1"), ("b", "u1")])
            for i, a in enumerate("xyz"):
                rec[a] = pc.points[:, i]
            for i, a in enumerate("rgb"):
                rec[a] = pc.colors[:, i]
            fh.write(rec.tobytes())
        else:
            for p, c in zip(pc.points, pc.colors):
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {c[0]} {c[1]} {c[2]}\n".encode("ascii"))


# -- geometry ---------------------------------------------------------------

def normalize_cloud(pc: PointCloud) -> PointCloud:
    """Center the bounding box at the origin and scale the largest extent to 2."""
    lo, hi = pc.points.min(axis=0), pc.points.max(axis=0)
    center = (lo + hi) / 2
    extent = float((hi - lo).max())
    scale = 2.0 / extent if extent > 0 else 1.0
    return PointCloud((pc.points - center) * scale, pc.colors.copy())


def face_coordinates(points: np.ndarray, face: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(u, v, depth) of each point seen from ``face``.

    ``u`` points right and ``v`` up for a viewer outside the cube looking at
    its center; side faces keep +Z up, the +Z/-Z faces keep +Y up.  Depth is
    the distance to the face plane.
    """
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    if face == "+X":
        return y, z, 1.0 - x
    if face == "-X":
        return -y, z, 1.0 + x
    if face == "+Y":
        return -x, z, 1.0 - y
    if face == "-Y":
        return x, z, 1.0 + y
    if face == "+Z":
        return x, y, 1.0 - z
    if face == "-Z":
        return -x, y, 1.0 + z
    raise ValueError(f"unknown face {face!r}")


def pixel_index(u: np.ndarray, v: np.ndarray, res: int) -> tuple[np.ndarray, np.ndarray]:
    """Map [-1, 1] face coordinates to (row, col); +v is the top row."""
    col = np.clip(np.floor((u + 1.0) / 2.0 * res), 0, res - 1).astype(np.int64)
    row = np.clip(np.floor((1.0 - v) / 2.0 * res), 0, res - 1).astype(np.int64)
    return row, col


def render_face(pc: PointCloud, face: str, cfg: ProjectionConfig) -> np.ndarray:
    res, r = cfg.face_resolution, cfg.point_splat_radius
    u, v, depth = face_coordinates(pc.points, face)
    row, col = pixel_index(u, v, res)
    img = np.empty((res, res, 3), dtype=np.float64)
    img[:] = np.asarray(cfg.background_color, dtype=np.float64) / 255.0

    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    rr = np.concatenate([row + dy for dy, _ in offsets])
    cc = np.concatenate([col + dx for _, dx in offsets])
    dd = np.tile(depth, len(offsets))
    pid = np.tile(np.arange(len(pc)), len(offsets))
    keep = (rr >= 0) & (rr < res) & (cc >= 0) & (cc < res)
    rr, cc, dd, pid = rr[keep], cc[keep], dd[keep], pid[keep]
    flat = rr * res + cc
    order = np.lexsort((dd, flat))  # stable: ties keep point order
    flat, pid = flat[order], pid[order]
    first = np.unique(flat, return_index=True)[1]
    img.reshape(-1, 3)[flat[first]] = pc.colors[pid[first]] / 255.0
    return img


def project_six_views(pc: PointCloud, cfg: ProjectionConfig = ProjectionConfig()) -> dict[str, np.ndarray]:
    """Orthographic depth-buffered renders on the six cube faces.

    Expects a normalized cloud (see ``normalize_cloud``).
    """
    return {face: render_face(pc, face, cfg) for face in FACES}


def stitch(views: dict[str, np.ndarray] | Sequence[np.ndarray], cfg: Optional[ProjectionConfig] = None,
           source_id: str = "") -> MultiViewImage:
    """Place faces on a 2 x 3 grid: +X -X +Y on top, -Y +Z -Z below."""
    if not isinstance(views, dict):
        views = dict(zip(FACES, views))
    if set(views) != set(FACES):
        raise ValueError(f"need exactly the six faces {FACES}")
    shapes = {v.shape for v in views.values()}
    if len(shapes) != 1:
        raise ValueError(f"face resolutions differ: {sorted(shapes)}")
    h, w = next(iter(shapes))[:2]
    if cfg is not None and (h, w) != (cfg.face_resolution, cfg.face_resolution):
        raise ValueError(f"faces are {h}x{w}, config expects {cfg.face_resolution}")
    canvas = np.empty((GRID_ROWS * h, GRID_COLS * w, 3), dtype=np.float64)
    boxes = {}
    for face in FACES:
        gr, gc = LAYOUT[face]
        top, left = gr * h, gc * w
        canvas[top:top + h, left:left + w] = views[face]
        boxes[face] = (top, left, h, w)
    return MultiViewImage(canvas, source_id, boxes)


def render_multiview(pc: PointCloud, cfg: ProjectionConfig = ProjectionConfig(), source_id: str = "") -> MultiViewImage:
    return stitch(project_six_views(normalize_cloud(pc), cfg), cfg, source_id)


# -- crops --------------------------------------------------------------------

def resize_short_side(pixels: np.ndarray, short: int = 256) -> np.ndarray:
    """Bilinear resize keeping aspect ratio so the shorter side equals ``short``."""
    h, w = pixels.shape[:2]
    scale = short / min(h, w)
    size = (max(short, round(h * scale)), max(short, round(w * scale)))
    t = torch.as_tensor(np.ascontiguousarray(pixels), dtype=torch.float64).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).clamp(0, 1).numpy()


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    side: int
    flipped: bool


def crop_box(shape, mode: str, side: int, rng: Optional[np.random.Generator] = None) -> CropBox:
    h, w = shape[:2]
    if side > min(h, w):
        raise ValueError(f"crop side {side} exceeds image {h}x{w}")
    if mode == "test":
        return CropBox((h - side) // 2, (w - side) // 2, side, False)
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode crops need an explicit rng")
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        return CropBox(top, left, side, bool(rng.random() < 0.5))
    raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")


def crop_pipeline(img: MultiViewImage | np.ndarray, mode: str, side: int = 224,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Random crop + horizontal flip (train) or center crop (test).

    Returns a C x H x W float32 array ready for the backbone.
    """
    pixels = img.pixels if isinstance(img, MultiViewImage) else np.asarray(img)
    box = crop_box(pixels.shape, mode, side, rng)
    out = pixels[box.top:box.top + side, box.left:box.left + side]
    if box.flipped:
        out = out[:, ::-1]
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


def prepare_input(img: MultiViewImage | np.ndarray, mode: str, rng=None, short: int = 256, side: int = 224) -> np.ndarray:
    """Resize the shorter side to ``short`` then crop to ``side``."""
    pixels = img.pixels if isinstance(img, MultiViewImage) else np.asarray(img)
    return crop_pipeline(resize_short_side(pixels, short), mode, side, rng)


def save_image(path, pixels: np.ndarray) -> None:
    """Lossless raster; format from the suffix (.ppm, .png)."""
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(Path(path))


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
