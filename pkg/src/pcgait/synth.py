"""Synthetic LiDAR pedestrian scans with controllable identity and attributes.

The body is ten capsules (torso, head, upper arms, forearms, thighs,
shins) posed by a sinusoidal gait: thigh pitch swings +/- the stride
amplitude in antiphase between legs, each knee flexes a quarter cycle
ahead of its thigh, arms swing in antiphase with the same-side leg, and
the torso bobs by 2% of body height. A frame is scanned by intersecting
one ray per (azimuth, elevation) cell of the sensor grid with every
capsule analytically; rays are cast at cell centers, so each scanned
point falls in its own range-view pixel.

The walk crosses the sensor boresight at the near (7 m) or far (12 m)
mark, heading (cos v, sin v) for view angle v; views of 180 degrees and
up start the gait phase half a cycle in, which makes a reversed walk the
exact mirror scene of its partner view for side-on paths. All randomness
comes from the xorshift64* stream of a caller-supplied seed, so equal
seeds give byte-identical datasets. The ground plane sits at z = -1.70 m
(the sensor rides 1.70 m above it); frames contain subject returns only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import (
    ATTRIBUTES,
    FRAME_RATE_HZ,
    GaitSequence,
    PointFrame,
    sequence_dir,
    write_pcf,
)
from .rng import Xorshift64Star, derive_seed, splitmix64

GROUND_Z = -1.70
NEAR_DISTANCE = 7.0
FAR_DISTANCE = 12.0
DEFAULT_VIEWS = tuple(range(0, 360, 30))
FRAMES_PER_SEQUENCE = 30

# Profile field ranges, sampled uniformly in this order.
PROFILE_RANGES = (
    ("height", 1.50, 1.90),
    ("leg_ratio", 0.45, 0.53),
    ("shoulder_width", 0.36, 0.50),
    ("limb_radius", 0.04, 0.07),
    ("stride_freq", 0.8, 1.2),
    ("stride_amplitude", 0.35, 0.60),
    ("arm_swing", 0.2, 0.5),
)

# Body shape constants (fractions of height unless noted).
HEAD_LEN_FRAC = 0.13
HEAD_RADIUS_FRAC = 0.38     # of head length
TORSO_RADIUS_FRAC = 0.30    # of shoulder width
HIP_OFFSET_FRAC = 0.30      # of shoulder width
UPPER_ARM_FRAC = 0.16
FOREARM_FRAC = 0.14
ELBOW_BEND_RAD = 0.25
BOUNCE_FRAC = 0.02
THIGH_RADIUS_SCALE = 1.4    # of limb_radius
SHIN_RADIUS_SCALE = 1.0
UPPER_ARM_RADIUS_SCALE = 0.9
FOREARM_RADIUS_SCALE = 0.75

# Attribute constants.
CLOTHING_RADIUS_SCALE = 1.4
UNIFORM_RADIUS_SCALE = 1.15
BAG_DROP = (0.05, 0.40)     # below the wrist: top gap, bottom gap
BAG_RADIUS = 0.13
CARRY_REACH = (0.05, 0.40)  # forward of the wrist
CARRY_RADIUS = 0.10
UMBRELLA_LIFT = 0.28        # canopy above the head-top joint
UMBRELLA_RADIUS = 0.45
OCCLUDER_FRACTION = 0.6     # of crossing distance, on the boresight
OCCLUDER_RADIUS = 0.15
OCCLUDER_HEIGHT = 2.2

# Capsule order inside BodyPose.capsules.
TORSO, HEAD = 0, 1
UPPER_ARM_L, FOREARM_L, UPPER_ARM_R, FOREARM_R = 2, 3, 4, 5
THIGH_L, SHIN_L, THIGH_R, SHIN_R = 6, 7, 8, 9


@dataclass
class IdentityProfile:
    height: float
    leg_ratio: float
    shoulder_width: float
    limb_radius: float
    stride_freq: float
    stride_amplitude: float
    arm_swing: float


def sample_identity(seed: int) -> IdentityProfile:
    """Draw a profile; every field uniform over its documented range."""
    rng = Xorshift64Star(splitmix64(seed))
    return IdentityProfile(
        **{name: rng.uniform(lo, hi) for name, lo, hi in PROFILE_RANGES}
    )


@dataclass
class Capsule:
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=np.float64)
        self.p1 = np.asarray(self.p1, dtype=np.float64)

    def transformed(self, rot: np.ndarray, offset: np.ndarray) -> "Capsule":
        return Capsule(rot @ self.p0 + offset, rot @ self.p1 + offset, self.radius)


@dataclass
class BodyPose:
    """Ten body capsules (see index constants) plus any attribute props."""

    capsules: list[Capsule]

    def transformed(self, rot: np.ndarray, offset: np.ndarray) -> "BodyPose":
        return BodyPose([c.transformed(rot, offset) for c in self.capsules])

    @property
    def right_wrist(self) -> np.ndarray:
        return self.capsules[FOREARM_R].p1

    @property
    def head_top(self) -> np.ndarray:
        return self.capsules[HEAD].p1


def _limb(p0, direction_angle, length, radius):
    d = np.array(
        [math.sin(direction_angle), 0.0, -math.cos(direction_angle)]
    )
    return Capsule(p0, p0 + length * d, radius)


def pose_at(
    profile: IdentityProfile,
    phase: float,
    right_arm_swings: bool = True,
) -> BodyPose:
    """Body-frame pose at a gait phase (x forward, y left, feet near z=0)."""
    h = profile.height
    amp = profile.stride_amplitude
    leg_len = profile.leg_ratio * h
    thigh_len = shin_len = leg_len / 2.0
    head_len = HEAD_LEN_FRAC * h
    torso_len = h - leg_len - head_len
    bounce = BOUNCE_FRAC * h * abs(math.sin(phase))
    hip_z = leg_len + bounce
    neck_z = hip_z + torso_len
    hip_off = HIP_OFFSET_FRAC * profile.shoulder_width
    shoulder_y = profile.shoulder_width / 2.0
    shoulder_z = neck_z - 0.02 * h

    capsules: list[Capsule | None] = [None] * 10
    capsules[TORSO] = Capsule(
        np.array([0.0, 0.0, hip_z]),
        np.array([0.0, 0.0, neck_z]),
        TORSO_RADIUS_FRAC * profile.shoulder_width,
    )
    capsules[HEAD] = Capsule(
        np.array([0.0, 0.0, neck_z]),
        np.array([0.0, 0.0, neck_z + head_len]),
        HEAD_RADIUS_FRAC * head_len,
    )

    for side, y_sign, leg_phase in (("l", 1.0, phase), ("r", -1.0, phase + math.pi)):
        thigh_angle = amp * math.sin(leg_phase)
        # Knee flexion leads the thigh by a quarter cycle; never negative.
        flexion = max(0.0, -0.7 * amp * math.sin(leg_phase + math.pi / 2.0))
        hip = np.array([0.0, y_sign * hip_off, hip_z])
        thigh = _limb(hip, thigh_angle, thigh_len,
                      THIGH_RADIUS_SCALE * profile.limb_radius)
        shin = _limb(thigh.p1, thigh_angle - flexion, shin_len,
                     SHIN_RADIUS_SCALE * profile.limb_radius)

        swing = profile.arm_swing
        if side == "r" and not right_arm_swings:
            swing = 0.0
        # Arms in antiphase with the same-side leg.
        arm_angle = -swing * math.sin(leg_phase)
        shoulder = np.array([0.0, y_sign * shoulder_y, shoulder_z])
        upper = _limb(shoulder, arm_angle, UPPER_ARM_FRAC * h,
                      UPPER_ARM_RADIUS_SCALE * profile.limb_radius)
        fore = _limb(upper.p1, arm_angle + ELBOW_BEND_RAD, FOREARM_FRAC * h,
                     FOREARM_RADIUS_SCALE * profile.limb_radius)
        if side == "l":
            capsules[UPPER_ARM_L], capsules[FOREARM_L] = upper, fore
            capsules[THIGH_L], capsules[SHIN_L] = thigh, shin
        else:
            capsules[UPPER_ARM_R], capsules[FOREARM_R] = upper, fore
            capsules[THIGH_R], capsules[SHIN_R] = thigh, shin

    return BodyPose(capsules)


@dataclass
class LidarModel:
    d_theta_deg: float = 0.192
    d_phi_deg: float = 0.2
    azimuth_fov_deg: float = 70.0
    elevation_min_deg: float = -20.0
    elevation_max_deg: float = 20.0
    max_range: float = 30.0

    def azimuth_cells(self) -> tuple[int, int]:
        half = self.azimuth_fov_deg / 2.0
        lo = math.ceil(-half / self.d_theta_deg - 0.5)
        hi = math.floor(half / self.d_theta_deg - 0.5)
        return lo, hi

    def elevation_cells(self) -> tuple[int, int]:
        lo = math.ceil(self.elevation_min_deg / self.d_phi_deg - 0.5)
        hi = math.floor(self.elevation_max_deg / self.d_phi_deg - 0.5)
        return lo, hi


def _angular_window(capsules: list[Capsule], lidar: LidarModel):
    """Conservative (az, el) cell window covering all capsules, or None."""
    lo = np.min([np.minimum(c.p0, c.p1) - c.radius for c in capsules], axis=0)
    hi = np.max([np.maximum(c.p0, c.p1) + c.radius for c in capsules], axis=0)
    if lo[0] <= 0.0:
        return None  # behind or straddling the sensor: no culling
    corners_xy = np.array(
        [[x, y] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])]
    )
    rho_max = np.hypot(corners_xy[:, 0], corners_xy[:, 1]).max()
    near_x = min(max(0.0, lo[0]), hi[0])
    near_y = min(max(0.0, lo[1]), hi[1])
    rho_min = math.hypot(near_x, near_y)
    az_hi = math.atan2(hi[1], lo[0] if hi[1] >= 0 else hi[0])
    az_lo = math.atan2(lo[1], lo[0] if lo[1] <= 0 else hi[0])
    el_hi = math.atan2(hi[2], rho_min if hi[2] >= 0 else rho_max)
    el_lo = math.atan2(lo[2], rho_min if lo[2] <= 0 else rho_max)

    az_cell_lo, az_cell_hi = lidar.azimuth_cells()
    el_cell_lo, el_cell_hi = lidar.elevation_cells()
    k_lo = max(az_cell_lo, math.floor(math.degrees(az_lo) / lidar.d_theta_deg) - 1)
    k_hi = min(az_cell_hi, math.ceil(math.degrees(az_hi) / lidar.d_theta_deg) + 1)
    m_lo = max(el_cell_lo, math.floor(math.degrees(el_lo) / lidar.d_phi_deg) - 1)
    m_hi = min(el_cell_hi, math.ceil(math.degrees(el_hi) / lidar.d_phi_deg) + 1)
    if k_lo > k_hi or m_lo > m_hi:
        return (0, -1, 0, -1)  # fully outside the FOV
    return (k_lo, k_hi, m_lo, m_hi)


def _ray_capsule_t(dirs: np.ndarray, capsules: list[Capsule]) -> np.ndarray:
    """First-hit distance per (ray, capsule); inf where the ray misses."""
    n = dirs.shape[0]
    a_pts = np.stack([c.p0 for c in capsules])          # (K, 3)
    b_pts = np.stack([c.p1 for c in capsules])
    radii = np.array([c.radius for c in capsules])
    axis = b_pts - a_pts
    seg_len = np.linalg.norm(axis, axis=1)
    seg_len = np.where(seg_len == 0.0, 1e-12, seg_len)
    u = axis / seg_len[:, None]                          # (K, 3)

    d_dot_u = dirs @ u.T                                 # (n, K)
    a_dot_u = np.einsum("kj,kj->k", a_pts, u)            # (K,)
    d_perp = dirs[:, None, :] - d_dot_u[:, :, None] * u[None, :, :]
    oa = -a_pts                                          # origin - A
    oa_perp = oa - (oa * u).sum(axis=1)[:, None] * u     # (K, 3)

    qa = np.einsum("nkj,nkj->nk", d_perp, d_perp)
    qb = 2.0 * np.einsum("nkj,kj->nk", d_perp, oa_perp)
    qc = np.einsum("kj,kj->k", oa_perp, oa_perp) - radii**2
    disc = qb**2 - 4.0 * qa * qc
    safe = (disc >= 0.0) & (qa > 1e-18)
    sqrt_disc = np.sqrt(np.where(safe, disc, 0.0))
    t_cyl = np.where(safe, (-qb - sqrt_disc) / np.where(qa > 1e-18, 2.0 * qa, 1.0),
                     np.inf)
    with np.errstate(invalid="ignore"):  # inf * 0 on missed rays
        s_axis = t_cyl * d_dot_u - a_dot_u[None, :]
        t_cyl = np.where(
            (t_cyl > 1e-6) & (s_axis >= 0.0) & (s_axis <= seg_len[None, :]),
            t_cyl, np.inf,
        )

    def sphere_t(centers):
        proj = dirs @ centers.T                          # (n, K)
        c2 = np.einsum("kj,kj->k", centers, centers)
        disc_s = proj**2 - (c2 - radii**2)[None, :]
        ok = disc_s >= 0.0
        t = np.where(ok, proj - np.sqrt(np.where(ok, disc_s, 0.0)), np.inf)
        return np.where(t > 1e-6, t, np.inf)

    t_hit = np.minimum(t_cyl, np.minimum(sphere_t(a_pts), sphere_t(b_pts)))
    return t_hit.reshape(n, len(capsules))


def scan_frame(
    pose: BodyPose,
    lidar: LidarModel | None = None,
    timestamp: float = 0.0,
    blockers: list[Capsule] | None = None,
) -> PointFrame:
    """Scan sensor-frame capsules on the exact (azimuth, elevation) grid.

    Rays are cast at cell centers (k + 0.5) * resolution. Blockers
    occlude but never contribute returns (scenery, not subject).
    """
    lidar = lidar or LidarModel()
    subject = pose.capsules
    scene = subject + list(blockers or [])
    if not scene:
        return PointFrame(np.zeros((0, 3)), timestamp)
    window = _angular_window(scene, lidar)
    if window is None:
        k_lo, k_hi = lidar.azimuth_cells()
        m_lo, m_hi = lidar.elevation_cells()
    else:
        k_lo, k_hi, m_lo, m_hi = window
    if k_lo > k_hi or m_lo > m_hi:
        return PointFrame(np.zeros((0, 3)), timestamp)

    az = np.radians((np.arange(k_lo, k_hi + 1) + 0.5) * lidar.d_theta_deg)
    el = np.radians((np.arange(m_lo, m_hi + 1) + 0.5) * lidar.d_phi_deg)
    az_g, el_g = np.meshgrid(az, el, indexing="ij")
    az_g = az_g.ravel()
    el_g = el_g.ravel()
    dirs = np.stack(
        [np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g), np.sin(el_g)],
        axis=1,
    )

    t_all = _ray_capsule_t(dirs, scene)
    t_best = t_all.min(axis=1)
    winner = t_all.argmin(axis=1)
    hit = (t_best <= lidar.max_range) & np.isfinite(t_best)
    hit &= winner < len(subject)  # blocked rays return nothing
    points = dirs[hit] * t_best[hit, None]
    return PointFrame(points, timestamp)


def _rotation_z(deg: float) -> np.ndarray:
    a = math.radians(deg)
    return np.array(
        [[math.cos(a), -math.sin(a), 0.0],
         [math.sin(a), math.cos(a), 0.0],
         [0.0, 0.0, 1.0]]
    )


def walking_speed(profile: IdentityProfile) -> float:
    leg_len = profile.leg_ratio * profile.height
    return 2.0 * profile.stride_freq * leg_len * math.sin(profile.stride_amplitude)


def generate_sequence(
    profile: IdentityProfile,
    view_deg: int,
    attribute: str,
    seed: int,
    lidar: LidarModel | None = None,
    distance_tag: str = "near",
    n_frames: int = FRAMES_PER_SEQUENCE,
    identity: str = "0000",
    seq_index: int = 0,
) -> GaitSequence:
    """One walk: `n_frames` scans at 10 Hz crossing the boresight mid-way."""
    if attribute not in ATTRIBUTES:
        raise ValueError(f"unknown attribute {attribute!r}")
    if distance_tag not in ("near", "far"):
        raise ValueError(f"distance_tag must be 'near' or 'far'")
    lidar = lidar or LidarModel()
    rng = Xorshift64Star(derive_seed(seed))
    phase0 = rng.uniform(0.0, 2.0 * math.pi)
    if view_deg >= 180:
        phase0 += math.pi  # reversal pairs become mirror scenes

    prof = profile
    if attribute == "clothing":
        prof = replace(prof, limb_radius=CLOTHING_RADIUS_SCALE * prof.limb_radius)
    elif attribute == "uniform":
        prof = replace(prof, limb_radius=UNIFORM_RADIUS_SCALE * prof.limb_radius)
    carries = attribute in ("bag", "carrying")

    crossing = NEAR_DISTANCE if distance_tag == "near" else FAR_DISTANCE
    speed = walking_speed(prof)
    heading = np.array(
        [math.cos(math.radians(view_deg)), math.sin(math.radians(view_deg)), 0.0]
    )
    rot = _rotation_z(view_deg)
    duration = n_frames / FRAME_RATE_HZ

    blockers = None
    if attribute == "occlusion":
        base = np.array([OCCLUDER_FRACTION * crossing, 0.0, GROUND_Z])
        blockers = [
            Capsule(base, base + np.array([0.0, 0.0, OCCLUDER_HEIGHT]),
                    OCCLUDER_RADIUS)
        ]

    frames = []
    for k in range(n_frames):
        t = k / FRAME_RATE_HZ
        phase = 2.0 * math.pi * prof.stride_freq * t + phase0
        pose = pose_at(prof, phase, right_arm_swings=not carries)
        if attribute == "bag":
            wrist = pose.right_wrist
            pose.capsules.append(Capsule(
                wrist + np.array([0.0, 0.0, -BAG_DROP[0]]),
                wrist + np.array([0.0, 0.0, -BAG_DROP[1]]),
                BAG_RADIUS,
            ))
        elif attribute == "carrying":
            wrist = pose.right_wrist
            pose.capsules.append(Capsule(
                wrist + np.array([CARRY_REACH[0], 0.0, -0.10]),
                wrist + np.array([CARRY_REACH[1], 0.0, -0.10]),
                CARRY_RADIUS,
            ))
        elif attribute == "umbrella":
            top = pose.head_top
            pose.capsules.append(Capsule(
                top + np.array([0.0, 0.0, UMBRELLA_LIFT]),
                top + np.array([0.0, 0.0, UMBRELLA_LIFT + 0.04]),
                UMBRELLA_RADIUS,
            ))
        offset = np.array([crossing, 0.0, GROUND_Z]) \
            + (t - duration / 2.0) * speed * heading
        world = pose.transformed(rot, offset)
        active_blockers = None
        if blockers is not None and n_frames // 3 <= k < 2 * (n_frames // 3):
            active_blockers = blockers
        frames.append(scan_frame(world, lidar, t, active_blockers))
    return GaitSequence(
        frames=frames,
        identity=identity,
        view_deg=view_deg,
        attribute=attribute,
        distance_tag=distance_tag,
        seq_index=seq_index,
    )


MANIFEST_FIELDS = ("identity", "attribute", "seq", "view_deg", "distance", "frames")


@dataclass
class SequenceRecord:
    identity: str
    attribute: str
    seq: int
    view_deg: int
    distance: str
    frames: int


def write_manifest(path: str | Path, records: list[SequenceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow(
                [r.identity, r.attribute, r.seq, r.view_deg, r.distance, r.frames]
            )


def read_manifest(path: str | Path) -> list[SequenceRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(MANIFEST_FIELDS):
            raise ValueError(f"{path}: unexpected manifest columns")
        for row in reader:
            records.append(SequenceRecord(
                identity=row["identity"],
                attribute=row["attribute"],
                seq=int(row["seq"]),
                view_deg=int(row["view_deg"]),
                distance=row["distance"],
                frames=int(row["frames"]),
            ))
    return records


def load_record(root: str | Path, record: SequenceRecord) -> GaitSequence:
    from .geometry import load_sequence

    return load_sequence(
        root, record.identity, record.attribute, record.seq,
        record.view_deg, record.distance,
    )


def generate_dataset(
    root: str | Path,
    n_ids: int,
    attributes: tuple[str, ...] = ("normal",),
    seed: int = 0,
    views: tuple[int, ...] = DEFAULT_VIEWS,
    lidar: LidarModel | None = None,
    distance_tag: str = "near",
    n_frames: int = FRAMES_PER_SEQUENCE,
    progress=None,
) -> list[SequenceRecord]:
    """Write PCF frames + manifest.csv for n_ids x attributes x views walks."""
    for a in attributes:
        if a not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {a!r}")
    attrs = tuple(a for a in ATTRIBUTES if a in attributes)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_ids):
        identity = f"{i:04d}"
        profile = sample_identity(derive_seed(seed, 1, i))
        for ai, attr in enumerate(attrs):
            for view in views:
                seq = generate_sequence(
                    profile, view, attr,
                    seed=derive_seed(seed, 2, i, ai, view),
                    lidar=lidar, distance_tag=distance_tag,
                    n_frames=n_frames, identity=identity, seq_index=0,
                )
                out_dir = sequence_dir(root, identity, attr, 0, view)
                out_dir.mkdir(parents=True, exist_ok=True)
                for k, frame in enumerate(seq.frames):
                    write_pcf(out_dir / f"{k:04d}.pcf", frame.points)
                records.append(SequenceRecord(
                    identity, attr, 0, view, distance_tag, n_frames
                ))
                if progress is not None:
                    progress(records[-1])
    write_manifest(root / "manifest.csv", records)
    return records
