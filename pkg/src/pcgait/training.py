"""Metric-learning training loop: batch-all triplet + cross-entropy, SGD.

The loss is L = alpha * L_tri + beta * L_ce. The triplet term is the
batch-all variant averaged over the active (nonzero-hinge) triples of
each part; the cross-entropy term averages the per-part classifier
losses. Batches are (p identities x k sequences x l frames), sampled
with a dedicated xorshift64* stream so runs are bitwise reproducible.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder
from .projection import aligned_frame_image
from .rng import Xorshift64Star, derive_seed
from .synth import SequenceRecord, load_record


@dataclass
class TrainingConfig:
    alpha: float = 1.0
    beta: float = 0.1
    margin: float = 0.2
    p: int = 8
    k: int = 8
    l: int = 10
    lr0: float = 0.1
    weight_decay: float = 0.0005
    momentum: float = 0.9
    milestones: tuple = (20000, 30000)
    total_iters: int = 40000
    seed: int = 0
    checkpoint_interval: int = 0   # 0 = final checkpoint only

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.p * self.k < 2:
            raise ValueError("batch needs at least 2 sequences (p*k >= 2)")
        if self.l < 1:
            raise ValueError("need at least one frame per sequence")
        if self.total_iters < 0:
            raise ValueError("total_iters must be nonnegative")
        self.milestones = tuple(sorted(int(m) for m in self.milestones))


def paper_preset(seed: int = 0) -> TrainingConfig:
    """Full-scale schedule: (8,8,10), lr 0.1 dropping at 20k/30k of 40k."""
    return TrainingConfig(seed=seed)


def desk_preset(seed: int = 0, total_iters: int = 2000) -> TrainingConfig:
    """CPU-scale schedule: small batches, lr 0.01, milestones at 60%/80%.

    The batch is cut to (8, 2, 1): 8 identities keep the triplet term
    diverse while 16 frames per iteration fit a desktop CPU budget.
    """
    return TrainingConfig(
        p=8, k=2, l=1,
        lr0=0.01,
        milestones=(int(0.6 * total_iters), int(0.8 * total_iters)),
        total_iters=total_iters,
        seed=seed,
    )


def triplet_loss_bap(embeddings, labels, margin: float = 0.2, want_grad: bool = False):
    """Batch-all triplet loss on per-part embeddings (n, parts, dim).

    Per part, every (anchor, positive, negative) triple contributes
    hinge = max(0, d(a,p) - d(a,n) + margin); the part loss is the mean
    over strictly positive hinges (0 if none fire), and the result is
    the mean over parts. Distances are Euclidean per 128-d part vector.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    lab = np.asarray(labels)
    n, parts, _ = e.shape
    same = lab[:, None] == lab[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    grad = np.zeros_like(e) if want_grad else None
    if not pos_mask.any() or not neg_mask.any():
        warnings.warn("batch has no valid triplets; triplet loss is 0")
        return (0.0, grad) if want_grad else 0.0
    valid = pos_mask[:, :, None] & neg_mask[:, None, :]
    total = 0.0
    for s in range(parts):
        x = e[:, s, :]
        sq = np.einsum("ij,ij->i", x, x)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
        d = np.sqrt(np.maximum(d2, 0.0))
        hinge = d[:, :, None] - d[:, None, :] + margin
        active = valid & (hinge > 0)
        cnt = int(active.sum())
        if cnt == 0:
            continue
        total += hinge[active].sum() / cnt
        if want_grad:
            # signed per-pair coefficient: +1/cnt when (a,b) is the positive
            # pair of an active triple, -1/cnt when it is the negative pair
            coef = (active.sum(axis=2) - active.sum(axis=1)) / cnt
            with np.errstate(divide="ignore"):
                w = np.where(d > 0, coef / np.where(d > 0, d, 1.0), 0.0)
            row = w.sum(axis=1)
            col = w.sum(axis=0)
            grad[:, s, :] = (row + col)[:, None] * x - (w @ x) - (w.T @ x)
    total = float(total) / parts
    if want_grad:
        grad /= parts
        return total, grad
    return total


def cross_entropy_loss(logits, labels, want_grad: bool = False):
    """Softmax cross-entropy on (n, parts, n_classes) logits.

    The loss is averaged over parts and samples; the gradient carries
    the same 1/(n*parts) scale.
    """
    z = np.asarray(logits, dtype=np.float64)
    n, parts, k = z.shape
    if k < 2:
        raise ValueError("need at least 2 classes")
    lab = np.asarray(labels, dtype=np.int64)
    z = z - z.max(axis=2, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=2, keepdims=True)
    picked = sm[np.arange(n)[:, None], np.arange(parts)[None, :], lab[:, None]]
    loss = float(-np.log(picked).sum() / (n * parts))
    if not want_grad:
        return loss
    grad = sm
    grad[np.arange(n)[:, None], np.arange(parts)[None, :], lab[:, None]] -= 1.0
    grad /= n * parts
    return loss, grad


def combined_loss(tri: float, ce: float, cfg: TrainingConfig) -> float:
    return cfg.alpha * tri + cfg.beta * ce


@dataclass
class Batch:
    records: list            # p*k SequenceRecords, identity-blocked
    frame_indices: list      # per record: l frame indices
    labels: list             # identity string per record

    def __post_init__(self):
        counts = {}
        for lab in self.labels:
            counts[lab] = counts.get(lab, 0) + 1
        if len(set(counts.values())) > 1:
            raise ValueError("identities are not equally represented")


def sample_batch(
    records: list[SequenceRecord], cfg: TrainingConfig, rng: Xorshift64Star
) -> Batch:
    """Draw p identities, k sequences each, l frame indices per sequence.

    Identities are drawn without replacement; sequences without
    replacement unless an identity has fewer than k, frames without
    replacement unless the sequence is shorter than l.
    """
    by_id: dict[str, list[SequenceRecord]] = {}
    for rec in records:
        by_id.setdefault(rec.identity, []).append(rec)
    ids = sorted(by_id)
    if len(ids) < cfg.p:
        raise ValueError(f"dataset has {len(ids)} identities, need {cfg.p}")
    chosen = [ids[i] for i in rng.sample(len(ids), cfg.p)]
    out_recs, out_frames, out_labels = [], [], []
    for identity in chosen:
        seqs = by_id[identity]
        if len(seqs) >= cfg.k:
            picks = rng.sample(len(seqs), cfg.k)
        else:
            picks = rng.choices(len(seqs), cfg.k)
        for si in picks:
            rec = seqs[si]
            if rec.frames >= cfg.l:
                fidx = rng.sample(rec.frames, cfg.l)
            else:
                fidx = rng.choices(rec.frames, cfg.l)
            out_recs.append(rec)
            out_frames.append(fidx)
            out_labels.append(identity)
    return Batch(out_recs, out_frames, out_labels)


def learning_rate(cfg: TrainingConfig, iteration: int) -> float:
    drops = sum(1 for m in cfg.milestones if m <= iteration)
    return cfg.lr0 * 0.1 ** drops


def init_velocity(params: encoder.EncoderParams) -> dict:
    return {name: np.zeros_like(t) for name, t in params.named_tensors()}


def sgd_step(
    params: encoder.EncoderParams, velocity: dict, grads: dict,
    iteration: int, cfg: TrainingConfig,
) -> None:
    """v <- momentum*v + g + wd*w; w <- w - lr(iteration)*v, in place."""
    lr = learning_rate(cfg, iteration)
    for name, w in params.named_tensors():
        v = velocity[name]
        v *= cfg.momentum
        v += grads[name]
        v += cfg.weight_decay * w
        w -= lr * v


def record_key(rec: SequenceRecord) -> str:
    return f"{rec.identity}/{rec.attribute}-{rec.seq:02d}/{rec.view_deg:03d}"


def build_image_cache(
    root: str | Path,
    records: list[SequenceRecord],
    views: tuple[str, ...],
    input_mode: str = "depth",
    progress=None,
) -> dict:
    """(record key, view) -> (frames, 64, 64) uint8 aligned images."""
    if input_mode not in ("depth", "silhouette"):
        raise ValueError(f"unknown input mode {input_mode!r}")
    sil = input_mode == "silhouette"
    cache = {}
    for rec in records:
        key = record_key(rec)
        if (key, views[0]) in cache:
            continue
        seq = load_record(root, rec)
        for view in views:
            cache[key, view] = np.stack([
                aligned_frame_image(f, view, silhouette=sil) for f in seq.frames
            ])
        if progress is not None:
            progress(rec)
    return cache


def silhouette_cache_from_depth(depth_cache: dict) -> dict:
    """Thresholding commutes with alignment, so reuse the depth images."""
    return {
        key: np.where(imgs > 0, np.uint8(255), np.uint8(0))
        for key, imgs in depth_cache.items()
    }


@dataclass
class TrainResult:
    params: encoder.EncoderParams
    log_rows: list = field(default_factory=list)


LOG_HEADER = ("iter", "loss_tri", "loss_ce", "loss_total", "lr")


def write_log(path: str | Path, rows: list, comments: list[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for row in rows:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])


def train(
    root: str | Path,
    records: list[SequenceRecord],
    cfg: TrainingConfig,
    views: tuple[str, ...] = ("rv",),
    input_mode: str = "depth",
    n_parts: int = encoder.DEFAULT_PARTS,
    dtype=np.float32,
    image_cache: dict | None = None,
    checkpoint_dir: str | Path | None = None,
    progress=None,
) -> TrainResult:
    """Run the full optimization loop over a dataset split.

    records defines both the sampling pool and the classifier label
    space (sorted identities -> class indices). Projection images are
    cached up front as uint8 and scaled to [0,1] per batch.
    """
    if not records:
        raise ValueError("no training records")
    identities = sorted({r.identity for r in records})
    class_of = {identity: i for i, identity in enumerate(identities)}
    params = encoder.init_params(
        cfg.seed, views=tuple(views), n_classes=len(identities),
        n_parts=n_parts, dtype=dtype,
    )
    params.input_mode = input_mode
    result = TrainResult(params)
    if cfg.total_iters == 0:
        return result
    if image_cache is None:
        image_cache = build_image_cache(root, records, tuple(views), input_mode)
    rng = Xorshift64Star(derive_seed(cfg.seed, 4))
    velocity = init_velocity(params)
    for it in range(cfg.total_iters):
        batch = sample_batch(records, cfg, rng)
        labels = np.array([class_of[lab] for lab in batch.labels])
        x = {}
        for view in views:
            stack = np.stack([
                image_cache[record_key(rec), view][fidx]
                for rec, fidx in zip(batch.records, batch.frame_indices)
            ])
            x[view] = encoder.scale_images(stack, dtype)
        emb, logits, cache = encoder.forward_batch(params, x, want_cache=True)
        tri, d_emb = triplet_loss_bap(emb, labels, cfg.margin, want_grad=True)
        ce, d_log = cross_entropy_loss(logits, labels, want_grad=True)
        total = combined_loss(tri, ce, cfg)
        if not math.isfinite(total):
            raise RuntimeError(f"non-finite loss at iteration {it}")
        grads = encoder.compute_gradients(
            params, cache,
            (cfg.alpha * d_emb).astype(dtype),
            (cfg.beta * d_log).astype(dtype),
        )
        sgd_step(params, velocity, grads, it, cfg)
        result.log_rows.append((it, tri, ce, total, learning_rate(cfg, it)))
        if checkpoint_dir is not None and cfg.checkpoint_interval > 0 \
                and (it + 1) % cfg.checkpoint_interval == 0:
            encoder.save_params(
                Path(checkpoint_dir) / f"ckpt_{it + 1:06d}.enc", params
            )
        if progress is not None:
            progress(it, total)
    return result
