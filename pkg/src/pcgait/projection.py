"""Sphere-to-raster and orthographic depth projections of point frames.

Range view: a point (x, y, z) lands in the cell
    r = floor(azimuth / d_theta),  c = floor(elevation / d_phi)
with azimuth = atan2(y, x) and elevation = asin(z / ||p||), both in
degrees. Indices are translated by their per-frame minima so they start
at zero, rows are flipped so larger elevation sits nearer the top, and
when several points collide in a cell only the one nearest the observer
(smallest planar distance d = sqrt(x^2 + y^2)) is kept. Empty cells are 0.

Orthographic views project the same frame onto the x-z plane seen from +y
(right-side view) or the x-y plane seen from +z (bird's-eye view) on a
fixed metric grid, keeping the point closest to that observer per cell.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PointFrame

VIEWS = ("rv", "rsv", "bev")

# Occupied cells whose depth would be exactly 0 store this instead, so
# occupancy stays distinguishable from the empty-cell fill value.
ZERO_DEPTH_EPS = 0.001


@dataclass
class ProjectionConfig:
    d_theta_deg: float = 0.192  # horizontal angular resolution
    d_phi_deg: float = 0.2     # vertical angular resolution
    ortho_cell: float = 0.02   # orthographic grid pitch, meters
    align_size: int = 64


@dataclass
class DepthImage:
    pixels: np.ndarray  # (H, W) float32, 0 = empty
    view: str

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be 2-D")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _points_of(frame) -> np.ndarray:
    pts = frame.points if isinstance(frame, PointFrame) else np.asarray(frame)
    return np.asarray(pts, dtype=np.float64)


def range_view_indices(
    points: np.ndarray, cfg: ProjectionConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw (r, c, d) for each point, before translation and flipping."""
    p = np.asarray(points, dtype=np.float64)
    norm = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2 + p[:, 2] ** 2)
    if np.any(norm == 0.0):
        raise ValueError("points at the sensor origin cannot be projected")
    az = np.degrees(np.arctan2(p[:, 1], p[:, 0]))
    el = np.degrees(np.arcsin(p[:, 2] / norm))
    r = np.floor(az / cfg.d_theta_deg).astype(np.int64)
    c = np.floor(el / cfg.d_phi_deg).astype(np.int64)
    d = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2)
    return r, c, d


def project_range_view(frame, cfg: ProjectionConfig | None = None) -> DepthImage:
    """Rasterize a frame into a range-view depth image (nearest point wins)."""
    cfg = cfg or ProjectionConfig()
    pts = _points_of(frame)
    if pts.shape[0] == 0:
        return DepthImage(np.zeros((1, 1), dtype=np.float32), "rv")
    r, c, d = range_view_indices(pts, cfg)
    r -= r.min()
    c -= c.min()
    width = int(r.max()) + 1
    height = int(c.max()) + 1
    rows = (height - 1) - c  # flip: larger elevation nearer the top
    grid = np.full((height, width), np.inf, dtype=np.float64)
    np.minimum.at(grid, (rows, r), d)
    grid[np.isinf(grid)] = 0.0
    return DepthImage(grid.astype(np.float32), "rv")


def project_orthographic(
    frame, plane: str, cfg: ProjectionConfig | None = None
) -> DepthImage:
    """Project onto "rsv" (x-z seen from +y) or "bev" (x-y seen from +z)."""
    cfg = cfg or ProjectionConfig()
    if plane not in ("rsv", "bev"):
        raise ValueError(f"plane must be 'rsv' or 'bev', got {plane!r}")
    pts = _points_of(frame)
    if pts.shape[0] == 0:
        return DepthImage(np.zeros((1, 1), dtype=np.float32), plane)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    cell = cfg.ortho_cell
    if plane == "rsv":
        row_axis, depth_axis = z, y
    else:
        row_axis, depth_axis = y, z
    rows = np.floor((row_axis.max() - row_axis) / cell).astype(np.int64)
    cols = np.floor((x - x.min()) / cell).astype(np.int64)
    height = int(rows.max()) + 1
    width = int(cols.max()) + 1
    # Observer sits on the + side of the depth axis: keep max coordinate.
    grid = np.full((height, width), -np.inf, dtype=np.float64)
    np.maximum.at(grid, (rows, cols), depth_axis)
    empty = np.isinf(grid)
    depth = depth_axis.max() - grid
    depth[empty] = 0.0
    depth[~empty & (depth == 0.0)] = ZERO_DEPTH_EPS
    return DepthImage(depth.astype(np.float32), plane)


def normalize_depth(image: DepthImage | np.ndarray) -> np.ndarray:
    """Map nonzero depths to 1..255 with nearer = brighter; 0 stays 0."""
    d = image.pixels if isinstance(image, DepthImage) else np.asarray(image)
    d = d.astype(np.float64)
    out = np.zeros(d.shape, dtype=np.uint8)
    mask = d != 0.0
    if not mask.any():
        return out
    lo = d[mask].min()
    hi = d[mask].max()
    if hi == lo:
        out[mask] = 255
        return out
    out[mask] = (1.0 + np.rint(254.0 * (hi - d[mask]) / (hi - lo))).astype(np.uint8)
    return out


def _nn_grid(n_in: int, n_out: int) -> np.ndarray:
    """Center-aligned nearest-neighbour source indices (mirror-symmetric).

    Output pixel j samples input position (j + 0.5) * n_in / n_out. When
    that position falls exactly on a cell boundary the tie resolves
    toward the image center, in exact integer arithmetic, so that the
    grid of a mirrored image is the mirrored grid.
    """
    j = np.arange(n_out, dtype=np.int64)
    num = (2 * j + 1) * n_in
    den = 2 * n_out
    src = num // den
    tie = num % den == 0
    src[tie & (2 * src > n_in)] -= 1
    return np.clip(src, 0, n_in - 1)


def align_and_resize(image: np.ndarray, size: int = 64) -> np.ndarray:
    """Crop, scale to a fixed height, and center an 8-bit depth image.

    Crops the tight bounding box of nonzero pixels, scales it so the crop
    height becomes `size` (nearest neighbour, aspect preserved), then
    places it on a size x size canvas so the intensity centroid column
    lands on column size // 2, truncating or zero-padding the width.
    Cropping both axes first is what makes the result invariant to pure
    translations of the content, and the center-aligned sample grid keeps
    it equivariant under horizontal mirroring.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    rows = np.flatnonzero(img.any(axis=1))
    cols = np.flatnonzero(img.any(axis=0))
    if rows.size == 0:
        return np.zeros((size, size), dtype=img.dtype)
    crop = img[rows[0]: rows[-1] + 1, cols[0]: cols[-1] + 1]
    h, w = crop.shape
    out_w = max(1, int(round(w * size / h)))
    scaled = crop[np.ix_(_nn_grid(h, size), _nn_grid(w, out_w))]

    colsum = scaled.astype(np.float64).sum(axis=0)
    centroid = float((np.arange(out_w) * colsum).sum() / colsum.sum())
    # Center on the canvas midline (continuous column size/2): the only
    # placement that commutes with horizontal mirroring.
    offset = int(math.floor(size / 2.0 - centroid))
    canvas = np.zeros((size, size), dtype=img.dtype)
    dst = np.arange(out_w) + offset
    ok = (dst >= 0) & (dst < size)
    canvas[:, dst[ok]] = scaled[:, ok]
    return canvas


def silhouette_from_depth(image: np.ndarray) -> np.ndarray:
    """Binary ablation input: every nonzero pixel becomes 255."""
    img = np.asarray(image)
    return np.where(img != 0, 255, 0).astype(np.uint8)


def aligned_frame_image(
    frame,
    view: str,
    cfg: ProjectionConfig | None = None,
    silhouette: bool = False,
) -> np.ndarray:
    """Full per-frame pipeline: project -> normalize -> align (-> threshold)."""
    cfg = cfg or ProjectionConfig()
    if view == "rv":
        depth = project_range_view(frame, cfg)
    else:
        depth = project_orthographic(frame, view, cfg)
    img = align_and_resize(normalize_depth(depth), cfg.align_size)
    if silhouette:
        img = silhouette_from_depth(img)
    return img


DPF_MAGIC = b"DPF1"


def write_dpf(path: str | Path, image: DepthImage | np.ndarray) -> None:
    """DPF1: magic, u32 width, u32 height, row-major float32 LE."""
    d = image.pixels if isinstance(image, DepthImage) else np.asarray(image)
    d = np.ascontiguousarray(d, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("image must be 2-D")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(DPF_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(d.tobytes())


def read_dpf(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DPF_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    w, h = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * w * h:
        raise ValueError(f"{path}: expected {4 * w * h} payload bytes")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).copy()


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary PGM (P5), maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    img = img.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos] in b" \t\r\n":
            pos += 1
        if raw[pos: pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and raw[end] not in b" \t\r\n":
            end += 1
        fields.append(int(raw[pos:end]))
        pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    body = raw[pos: pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
