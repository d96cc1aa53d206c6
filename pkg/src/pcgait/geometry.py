"""Point-cloud data model and frame-level cleaning ops.

Coordinates are meters in the sensor frame: x forward, y left, z up,
sensor at the origin. A PointFrame is one LiDAR sweep; a GaitSequence is
the ordered list of frames for one walk of one subject under one
attribute, observed from one view angle.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FRAME_RATE_HZ = 10.0

# Canonical attribute vocabulary; order fixed (report columns follow it).
ATTRIBUTES = (
    "normal",
    "bag",
    "clothing",
    "carrying",
    "umbrella",
    "uniform",
    "occlusion",
    "night",
)

PCF_MAGIC = b"PCF1"


@dataclass
class Region3:
    """Axis-aligned box with closed bounds."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for axis in "xyz":
            lo = getattr(self, f"{axis}_min")
            hi = getattr(self, f"{axis}_max")
            if not lo < hi:
                raise ValueError(f"{axis}_min must be < {axis}_max")

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return (
            (p[:, 0] >= self.x_min) & (p[:, 0] <= self.x_max)
            & (p[:, 1] >= self.y_min) & (p[:, 1] <= self.y_max)
            & (p[:, 2] >= self.z_min) & (p[:, 2] <= self.z_max)
        )


# Release-area crop box for curb-side captures (x is negative: the subject
# walks in front of the sensor's -x side in that convention).
DEFAULT_ROI = Region3(-12.0, -5.0, -3.0, 3.0, -2.0, 3.0)


@dataclass
class PointFrame:
    """One sweep: (N, 3) float array plus a timestamp in seconds."""

    points: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.size == 0:
            p = p.reshape(0, 3)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {p.shape}")
        if not np.isfinite(p).all():
            raise ValueError("point coordinates must be finite")
        self.points = p

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class GaitSequence:
    frames: list[PointFrame]
    identity: str
    view_deg: int
    attribute: str
    distance_tag: str = "near"
    seq_index: int = 0

    def __post_init__(self):
        if self.attribute not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {self.attribute!r}")
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("frame timestamps must be strictly increasing")

    @property
    def seq_id(self) -> str:
        return (
            f"{self.identity}/{self.attribute}-{self.seq_index:02d}"
            f"/{self.view_deg:03d}"
        )


def crop_roi(frame: PointFrame, region: Region3) -> PointFrame:
    """Keep points inside the closed box; order preserved."""
    mask = region.contains(frame.points)
    return PointFrame(frame.points[mask], frame.timestamp)


def remove_ground(frame: PointFrame, lift: float = 0.15) -> PointFrame:
    """Drop points below (5th percentile of z) + lift.

    Frames with fewer than 20 points are returned unchanged: the
    percentile estimate is meaningless on near-empty sweeps.
    """
    if len(frame) < 20:
        return PointFrame(frame.points.copy(), frame.timestamp)
    z0 = np.percentile(frame.points[:, 2], 5.0)
    mask = frame.points[:, 2] >= z0 + lift
    if not mask.any():
        # a single stratum thinner than lift is not a ground plane
        return PointFrame(frame.points.copy(), frame.timestamp)
    return PointFrame(frame.points[mask], frame.timestamp)


_NEIGHBOR_OFFSETS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def denoise(frame: PointFrame, voxel: float = 0.3) -> PointFrame:
    """Keep the largest 26-connected voxel cluster of points.

    Clusters are compared by point count; ties go to the cluster whose
    point centroid is nearest the sensor origin, then to discovery order,
    so the result is deterministic.
    """
    n = len(frame)
    if n == 0:
        return PointFrame(frame.points.copy(), frame.timestamp)
    keys = np.floor(frame.points / voxel).astype(np.int64)
    occupied = {}
    for i, key in enumerate(map(tuple, keys)):
        occupied.setdefault(key, []).append(i)

    labels = {}
    components = []
    for start in occupied:
        if start in labels:
            continue
        comp_id = len(components)
        stack = [start]
        labels[start] = comp_id
        members = []
        while stack:
            vox = stack.pop()
            members.append(vox)
            for off in _NEIGHBOR_OFFSETS:
                nb = (vox[0] + off[0], vox[1] + off[1], vox[2] + off[2])
                if nb in occupied and nb not in labels:
                    labels[nb] = comp_id
                    stack.append(nb)
        components.append(members)

    def score(members):
        idx = [i for vox in members for i in occupied[vox]]
        centroid = frame.points[idx].mean(axis=0)
        return (-len(idx), float(np.linalg.norm(centroid)))

    best = min(range(len(components)), key=lambda c: (score(components[c]), c))
    keep = np.zeros(n, dtype=bool)
    for vox in components[best]:
        keep[occupied[vox]] = True
    return PointFrame(frame.points[keep], frame.timestamp)


def write_pcf(path: str | Path, points: np.ndarray) -> None:
    """Write a PCF1 file: magic, u32 count, count x 3 float32 LE."""
    p = np.ascontiguousarray(np.asarray(points, dtype="<f4"))
    if p.size == 0:
        p = p.reshape(0, 3)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {p.shape}")
    with open(path, "wb") as fh:
        fh.write(PCF_MAGIC)
        fh.write(struct.pack("<I", p.shape[0]))
        fh.write(p.tobytes())


def read_pcf(path: str | Path) -> np.ndarray:
    """Read a PCF1 file back into an (N, 3) float32 array."""
    raw = Path(path).read_bytes()
    if raw[:4] != PCF_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header")
    (count,) = struct.unpack("<I", raw[4:8])
    body = raw[8:]
    if len(body) != count * 12:
        raise ValueError(
            f"{path}: expected {count * 12} payload bytes, got {len(body)}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(count, 3).copy()


def sequence_dir(
    root: str | Path, identity: str, attribute: str, seq_index: int, view_deg: int
) -> Path:
    """<root>/<identity>/<attribute>-<seq#>/<view>/ layout."""
    return Path(root) / identity / f"{attribute}-{seq_index:02d}" / f"{view_deg:03d}"


def load_sequence_frames(view_dir: str | Path) -> list[PointFrame]:
    """Load <frame#>.pcf files in frame order; timestamps from 10 Hz."""
    paths = sorted(Path(view_dir).glob("*.pcf"))
    if not paths:
        raise FileNotFoundError(f"no .pcf frames under {view_dir}")
    frames = []
    for p in paths:
        idx = int(p.stem)
        frames.append(PointFrame(read_pcf(p), idx / FRAME_RATE_HZ))
    return frames


def load_sequence(
    root: str | Path,
    identity: str,
    attribute: str,
    seq_index: int,
    view_deg: int,
    distance_tag: str = "near",
) -> GaitSequence:
    frames = load_sequence_frames(
        sequence_dir(root, identity, attribute, seq_index, view_deg)
    )
    return GaitSequence(
        frames=frames,
        identity=identity,
        view_deg=view_deg,
        attribute=attribute,
        distance_tag=distance_tag,
        seq_index=seq_index,
    )
