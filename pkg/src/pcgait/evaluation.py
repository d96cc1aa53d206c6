"""Cross-view retrieval evaluation: rank-k matrices and attribute report.

Probes and galleries are built per view pair; with the normal gallery
role, sequences of the requested attribute are probes and normal-walk
sequences form the gallery, and the roles swap for the variant-gallery
protocol. A probe never matches its own gallery copy (excluded by
sequence id). Distances are Euclidean on the concatenated 512-d
part embeddings; nearest-neighbor ties break by gallery index order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder
from .geometry import ATTRIBUTES
from .projection import aligned_frame_image, write_pgm
from .rng import Xorshift64Star, derive_seed
from .synth import SequenceRecord, load_record
from .training import record_key

GALLERY_ROLES = ("normal_gallery", "variant_gallery")


@dataclass
class EmbeddingEntry:
    embedding: np.ndarray      # (n_parts * 128,)
    identity: str
    view_deg: int
    attribute: str
    seq_id: str


@dataclass
class EmbeddingSet:
    entries: list

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.seq_id in seen:
                raise ValueError(f"duplicate sequence id {e.seq_id!r}")
            seen.add(e.seq_id)

    def views(self) -> tuple[int, ...]:
        return tuple(sorted({e.view_deg for e in self.entries}))

    def select(self, attribute: str | None, view_deg: int) -> list[int]:
        return [
            i for i, e in enumerate(self.entries)
            if e.view_deg == view_deg
            and (attribute is None or e.attribute == attribute)
        ]


_CONV_CHUNK = 64   # frames per conv GEMM block (bounds im2col memory)


def extract_embeddings(
    params: encoder.EncoderParams,
    root: str | Path,
    records: list[SequenceRecord],
    frames_limit: int | None = None,
    seed: int = 0,
    image_cache: dict | None = None,
    progress=None,
) -> EmbeddingSet:
    """Embed dataset sequences: project, encode, set-pool, part-embed.

    With frames_limit set, that many frame indices are sampled uniformly
    without replacement per sequence (all frames when shorter), from a
    per-sequence stream derived from seed. Zero-frame sequences are
    skipped with a warning.
    """
    if image_cache is None:
        image_cache = {}
    kept, frame_ids = [], []
    for ri, rec in enumerate(records):
        if rec.frames == 0:
            warnings.warn(f"skipping empty sequence {record_key(rec)}")
            continue
        if frames_limit is not None and rec.frames > frames_limit:
            rng = Xorshift64Star(derive_seed(seed, 5, ri))
            fidx = rng.sample(rec.frames, frames_limit)
        else:
            fidx = list(range(rec.frames))
        kept.append(rec)
        frame_ids.append(fidx)
    if not kept:
        raise ValueError("no sequences to embed")

    sil = params.input_mode == "silhouette"
    sizes = [len(f) for f in frame_ids]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    pooled = None
    for view in params.views:
        imgs = []
        for rec, fidx in zip(kept, frame_ids):
            key = (record_key(rec), view)
            if key not in image_cache:
                seq = load_record(root, rec)
                image_cache[key] = np.stack([
                    aligned_frame_image(f, view, silhouette=sil)
                    for f in seq.frames
                ])
            imgs.append(image_cache[key][fidx])
        flat = encoder.scale_images(np.concatenate(imgs), params.dtype)
        feats = np.concatenate([
            encoder.conv_forward(params, view, flat[i:i + _CONV_CHUNK])
            for i in range(0, len(flat), _CONV_CHUNK)
        ])
        view_pooled = np.stack([
            feats[bounds[i]:bounds[i + 1]].max(axis=0) for i in range(len(kept))
        ])
        pooled = view_pooled if pooled is None \
            else np.concatenate([pooled, view_pooled], axis=1)
        if progress is not None:
            progress(view)
    emb, _, _ = encoder._hpp_batched(params, pooled)
    entries = [
        EmbeddingEntry(
            emb[i].reshape(-1).astype(np.float64),
            rec.identity, rec.view_deg, rec.attribute, record_key(rec),
        )
        for i, rec in enumerate(kept)
    ]
    return EmbeddingSet(entries)


def distance_matrix(probes: EmbeddingSet, gallery: EmbeddingSet) -> np.ndarray:
    """Pairwise Euclidean distances on the full concatenated embeddings."""
    if not probes.entries or not gallery.entries:
        raise ValueError("probe and gallery sets must be nonempty")
    a = np.stack([e.embedding for e in probes.entries]).astype(np.float64)
    b = np.stack([e.embedding for e in gallery.entries]).astype(np.float64)
    d2 = (
        np.einsum("ij,ij->i", a, a)[:, None]
        + np.einsum("ij,ij->i", b, b)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.sqrt(np.maximum(d2, 0.0))


def rank_k_accuracy(
    distances: np.ndarray,
    probe_labels,
    gallery_labels,
    k: int,
    excluded: np.ndarray | None = None,
    return_excluded: bool = False,
):
    """Fraction of probes with a same-identity entry among the k nearest.

    Ties break by gallery index order. excluded (bool, probes x gallery)
    removes specific pairs from a probe's candidate list. Probes whose
    identity is absent from their candidate gallery are dropped from the
    denominator; their count is available via return_excluded.
    """
    d = np.asarray(distances, dtype=np.float64)
    plab = list(probe_labels)
    glab = np.asarray(list(gallery_labels))
    hits = considered = absent = 0
    for i in range(d.shape[0]):
        keep = np.ones(d.shape[1], dtype=bool)
        if excluded is not None:
            keep &= ~excluded[i]
        cand = np.flatnonzero(keep)
        if not (glab[cand] == plab[i]).any():
            absent += 1
            continue
        order = cand[np.argsort(d[i, cand], kind="stable")]
        considered += 1
        if (glab[order[:k]] == plab[i]).any():
            hits += 1
    if considered == 0:
        raise ValueError("no probe has its identity in the gallery")
    acc = hits / considered
    if return_excluded:
        return acc, absent
    return acc


@dataclass
class EvalMatrix:
    attribute: str | None
    k: int
    gallery_role: str
    views: tuple
    values: np.ndarray         # (n_views, n_views) with NaN = absent
    excluded_probes: int = 0

    def defined_mean(self) -> float:
        vals = self.values[~np.isnan(self.values)]
        if vals.size == 0:
            raise ValueError("matrix has no defined cells")
        return float(vals.mean())


def cross_view_matrix(
    emb_set: EmbeddingSet,
    probe_attribute: str | None,
    k: int,
    gallery_role: str = "normal_gallery",
) -> EvalMatrix:
    """Probe-view x gallery-view rank-k accuracies.

    normal_gallery: probes carry probe_attribute, gallery is the normal
    walks. variant_gallery swaps the roles: normal walks become probes
    and probe_attribute sequences enroll as the gallery. Cells without
    probes or gallery are NaN. Self-matches (same seq_id) are excluded.
    """
    if gallery_role not in GALLERY_ROLES:
        raise ValueError(f"unknown gallery role {gallery_role!r}")
    views = emb_set.views()
    if len(views) < 2:
        raise ValueError("need at least 2 views for the cross-view protocol")
    n = len(views)
    values = np.full((n, n), np.nan)
    excluded_total = 0
    entries = emb_set.entries
    for pi, v_p in enumerate(views):
        for gi, v_g in enumerate(views):
            if gallery_role == "normal_gallery":
                p_idx = emb_set.select(probe_attribute, v_p)
                g_idx = emb_set.select("normal", v_g)
            else:
                p_idx = emb_set.select("normal", v_p)
                g_idx = emb_set.select(probe_attribute, v_g)
            if not p_idx or not g_idx:
                continue
            probes = EmbeddingSet([entries[i] for i in p_idx])
            gallery = EmbeddingSet([entries[i] for i in g_idx])
            d = distance_matrix(probes, gallery)
            self_pair = np.array([
                [p.seq_id == g.seq_id for g in gallery.entries]
                for p in probes.entries
            ])
            try:
                acc, absent = rank_k_accuracy(
                    d,
                    [e.identity for e in probes.entries],
                    [e.identity for e in gallery.entries],
                    k,
                    excluded=self_pair if self_pair.any() else None,
                    return_excluded=True,
                )
            except ValueError:
                continue
            values[pi, gi] = acc
            excluded_total += absent
    return EvalMatrix(
        probe_attribute, k, gallery_role, views, values, excluded_total
    )


@dataclass
class AttributeReport:
    ks: tuple
    gallery_role: str
    per_attribute: dict        # (attribute, k) -> accuracy or None
    overall_pooled: dict       # k -> accuracy
    overall_mean: dict         # k -> accuracy
    matrices: dict = field(default_factory=dict)   # (attribute, k) -> EvalMatrix
    excluded_probes: int = 0


def attribute_report(
    emb_set: EmbeddingSet,
    ks: tuple = (1, 5),
    gallery_role: str = "normal_gallery",
) -> AttributeReport:
    """Per-attribute means over defined matrix cells plus two overalls.

    overall_pooled evaluates the union of every attribute's probe pool
    jointly; overall_mean averages the per-attribute means. Both are
    emitted since published overall numbers do not state the convention.
    """
    present = {e.attribute for e in emb_set.entries}
    report = AttributeReport(tuple(ks), gallery_role, {}, {}, {})
    for k in ks:
        for attr in ATTRIBUTES:
            if attr not in present:
                report.per_attribute[attr, k] = None
                continue
            m = cross_view_matrix(emb_set, attr, k, gallery_role)
            report.matrices[attr, k] = m
            report.per_attribute[attr, k] = m.defined_mean()
            report.excluded_probes += m.excluded_probes
        pooled = cross_view_matrix(emb_set, None, k, gallery_role)
        report.matrices[None, k] = pooled
        report.overall_pooled[k] = pooled.defined_mean()
        defined = [
            report.per_attribute[a, k] for a in ATTRIBUTES
            if report.per_attribute[a, k] is not None
        ]
        report.overall_mean[k] = float(np.mean(defined))
    return report


def write_matrix_csv(path: str | Path, matrix: EvalMatrix) -> None:
    """Header row/column of view angles; cells = percent, 2 decimals."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["view"] + [str(v) for v in matrix.views])
        for pi, v_p in enumerate(matrix.views):
            row = [str(v_p)]
            for gi in range(len(matrix.views)):
                val = matrix.values[pi, gi]
                row.append("" if np.isnan(val) else f"{100.0 * val:.2f}")
            writer.writerow(row)


def write_matrix_heatmap(path: str | Path, matrix: EvalMatrix) -> None:
    """PGM rendering: accuracy 0..1 mapped linearly to 0..255, NaN = 0."""
    vals = np.where(np.isnan(matrix.values), 0.0, matrix.values)
    write_pgm(path, np.rint(255.0 * vals).astype(np.uint8))


def write_report_csv(
    path: str | Path, report: AttributeReport, header: dict | None = None
) -> None:
    """`# key=value` preamble, then one percentage row per rank."""
    def fmt(v):
        return "" if v is None else f"{100.0 * v:.2f}"

    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}={value}\n")
        fh.write(f"# gallery_role={report.gallery_role}\n")
        fh.write(f"# absent_probes_excluded={report.excluded_probes}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["rank"] + list(ATTRIBUTES) + ["overall_pooled", "overall_mean"]
        )
        for k in report.ks:
            row = [str(k)]
            row += [fmt(report.per_attribute[a, k]) for a in ATTRIBUTES]
            row.append(fmt(report.overall_pooled[k]))
            row.append(fmt(report.overall_mean[k]))
            writer.writerow(row)
