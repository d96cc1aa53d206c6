"""Independent reference implementations the test suite checks against.

Everything here deliberately avoids the library's code paths: the
rasterizer reference walks points one by one into a dict, the gradient
oracle is plain central differences, the triplet reference is three
nested Python loops, and the PRNG reference re-derives xorshift64* from
its published constants. Angle math reuses the same numpy ufuncs as the
library (their values are pinned separately by scalar fixtures) so that
floor-boundary decisions agree bit for bit.
"""

from __future__ import annotations

import math

import numpy as np


def naive_range_view(points: np.ndarray, d_theta_deg: float, d_phi_deg: float):
    """Per-point reference rasterization: dict of cell -> nearest distance."""
    pts = np.asarray(points, dtype=np.float64)
    az = np.degrees(np.arctan2(pts[:, 1], pts[:, 0]))
    norm = np.sqrt((pts ** 2).sum(axis=1))
    el = np.degrees(np.arcsin(pts[:, 2] / norm))
    rs, cs, ds = [], [], []
    for i in range(pts.shape[0]):
        rs.append(int(np.floor(az[i] / d_theta_deg)))
        cs.append(int(np.floor(el[i] / d_phi_deg)))
        ds.append(float(np.sqrt(pts[i, 0] ** 2 + pts[i, 1] ** 2)))
    r_min, c_min = min(rs), min(cs)
    cells: dict[tuple[int, int], float] = {}
    for r, c, d in zip(rs, cs, ds):
        key = (r - r_min, c - c_min)
        if key not in cells or d < cells[key]:
            cells[key] = d
    width = max(k[0] for k in cells) + 1
    height = max(k[1] for k in cells) + 1
    img = np.zeros((height, width), dtype=np.float64)
    for (r, c), d in cells.items():
        img[(height - 1) - c, r] = d
    return img.astype(np.float32)


def finite_difference_grads(fn, tensors, indices, h=1e-3):
    """Central differences of scalar fn at the given (tensor, flat-index) pairs.

    `tensors` are mutated in place during probing and restored afterwards.
    Returns one derivative per (tensor_id, flat_index) entry.
    """
    out = []
    for t_id, flat in indices:
        arr = tensors[t_id].reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + h
        f_plus = fn()
        arr[flat] = orig - h
        f_minus = fn()
        arr[flat] = orig
        out.append((f_plus - f_minus) / (2.0 * h))
    return np.array(out)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def brute_force_triplet(embeddings: np.ndarray, labels, margin: float) -> float:
    """Batch-all triplet loss by exhaustive triple enumeration.

    embeddings: (n, parts, dim). Mean over parts of (sum of positive
    hinges / count of positive hinges), 0 for parts with no active hinge.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    n, parts, _ = emb.shape
    per_part = []
    for s in range(parts):
        total, count = 0.0, 0
        for a in range(n):
            for p in range(n):
                if p == a or labels[p] != labels[a]:
                    continue
                d_ap = math.sqrt(((emb[a, s] - emb[p, s]) ** 2).sum())
                for g in range(n):
                    if labels[g] == labels[a]:
                        continue
                    d_an = math.sqrt(((emb[a, s] - emb[g, s]) ** 2).sum())
                    hinge = d_ap - d_an + margin
                    if hinge > 0.0:
                        total += hinge
                        count += 1
        per_part.append(total / count if count else 0.0)
    return float(np.mean(per_part))


def reference_rank_k(distances: np.ndarray, probe_labels, gallery_labels, k: int):
    """CMC-style rank-k: fraction of probes with a correct id in the top k."""
    hits, used = 0, 0
    gallery_labels = list(gallery_labels)
    for i, row in enumerate(np.asarray(distances)):
        if probe_labels[i] not in gallery_labels:
            continue
        used += 1
        order = np.argsort(row, kind="stable")[:k]
        if any(gallery_labels[j] == probe_labels[i] for j in order):
            hits += 1
    return hits / used if used else float("nan")


MASK64 = (1 << 64) - 1


def xorshift64star_reference(seed: int, n: int) -> list[int]:
    """xorshift64* from its published constants (shifts 12/25/27)."""
    state = seed & MASK64
    if state == 0:
        state = 0x9E3779B97F4A7C15
    out = []
    for _ in range(n):
        state ^= state >> 12
        state = (state ^ (state << 25)) & MASK64
        state ^= state >> 27
        out.append((state * 0x2545F4914F6CDD1D) & MASK64)
    return out


def splitmix64_reference(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & MASK64
    x ^= x >> 31
    return x


def stadium_union_area(
    segments: list[tuple[np.ndarray, np.ndarray, float]],
    lo: np.ndarray,
    hi: np.ndarray,
    n_grid: int = 400,
) -> float:
    """Area of a union of 2-D stadiums (segment + radius) by grid quadrature."""
    xs = np.linspace(lo[0], hi[0], n_grid)
    ys = np.linspace(lo[1], hi[1], n_grid)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    inside = np.zeros(pts.shape[0], dtype=bool)
    for a, b, r in segments:
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            t = np.zeros(pts.shape[0])
        else:
            t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
        closest = a + t[:, None] * ab
        inside |= ((pts - closest) ** 2).sum(axis=1) <= r * r
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    return float(inside.sum() * cell)
