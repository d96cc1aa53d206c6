"""Hand-rolled convolutional gait encoder with exact analytic gradients.

Per view: six 3x3 convolutions (1 -> 32 -> 32, pool /2, -> 64 -> 64,
pool /2, -> 128 -> 128) produce a 128 x 16 x 16 feature map per frame.
Views are fused by channel concatenation per frame, frames are merged by
an elementwise max (set pooling), and the pooled map is split into
horizontal strips that each yield a 128-d part embedding plus class
logits. Everything is plain numpy; the backward pass is written out by
hand so the whole model stays dependency-free and gradient-checkable.

Tie-breaking everywhere (max pooling, set pooling, strip max) routes the
gradient to the lowest flat index, which is what np.argmax returns, so
forward and backward are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Xorshift64Star, derive_seed

CONV_CHANNELS = (32, 32, 64, 64, 128, 128)
POOL_AFTER = (1, 3)        # 2x2 max pool follows these conv layers
FEATURE_CHANNELS = CONV_CHANNELS[-1]
PART_DIM = 128
DEFAULT_PARTS = 4
ENC_MAGIC = b"ENC1"


@dataclass
class EncoderParams:
    """All learnable tensors, one conv stack per view plus shared heads."""

    views: tuple[str, ...]
    n_classes: int
    n_parts: int = DEFAULT_PARTS
    input_mode: str = "depth"                  # depth | silhouette
    conv: dict = field(default_factory=dict)   # view -> [[w, b] x 6]
    part_w: list = field(default_factory=list)  # n_parts x (PART_DIM, C)
    part_b: list = field(default_factory=list)
    cls_w: list = field(default_factory=list)   # n_parts x (n_classes, PART_DIM)
    cls_b: list = field(default_factory=list)

    @property
    def feature_channels(self) -> int:
        return FEATURE_CHANNELS * len(self.views)

    @property
    def dtype(self):
        return self.conv[self.views[0]][0][0].dtype

    def named_tensors(self):
        """(name, array) pairs in the declared (checkpoint) order."""
        for view in self.views:
            for i, (w, b) in enumerate(self.conv[view]):
                yield f"{view}.conv{i}.w", w
                yield f"{view}.conv{i}.b", b
        for s in range(self.n_parts):
            yield f"part{s}.w", self.part_w[s]
            yield f"part{s}.b", self.part_b[s]
        for s in range(self.n_parts):
            yield f"cls{s}.w", self.cls_w[s]
            yield f"cls{s}.b", self.cls_b[s]

    def zero_grads(self) -> dict:
        return {name: np.zeros_like(t) for name, t in self.named_tensors()}


def init_params(
    seed: int,
    views: tuple[str, ...] = ("rv",),
    n_classes: int = 2,
    n_parts: int = DEFAULT_PARTS,
    dtype=np.float32,
) -> EncoderParams:
    """Fan-in-scaled uniform init (+-sqrt(6/fan_in)), zero biases.

    Draws come from one xorshift64* stream in checkpoint order, so the
    same seed gives bitwise-identical parameters on every platform.
    """
    rng = Xorshift64Star(derive_seed(seed, 3))
    params = EncoderParams(tuple(views), n_classes, n_parts)

    def weight(shape, fan_in):
        bound = math.sqrt(6.0 / fan_in)
        vals = rng.uniform_array(int(np.prod(shape)), -bound, bound)
        return vals.reshape(shape).astype(dtype)

    for view in params.views:
        layers = []
        c_in = 1
        for c_out in CONV_CHANNELS:
            w = weight((c_out, c_in, 3, 3), c_in * 9)
            b = np.zeros(c_out, dtype=dtype)
            layers.append([w, b])
            c_in = c_out
        params.conv[view] = layers
    c_total = params.feature_channels
    for _ in range(n_parts):
        params.part_w.append(weight((PART_DIM, c_total), c_total))
        params.part_b.append(np.zeros(PART_DIM, dtype=dtype))
    for _ in range(n_parts):
        params.cls_w.append(weight((n_classes, PART_DIM), PART_DIM))
        params.cls_b.append(np.zeros(n_classes, dtype=dtype))
    return params


def scale_images(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 image stack -> [0,1] float stack (single shared code path)."""
    dt = np.dtype(dtype)
    return np.asarray(images).astype(dt) * dt.type(1.0 / 255.0)


def _im2col_cf(x_cf: np.ndarray) -> np.ndarray:
    """Channel-first (c,n,h,w) activations -> (c*9, n*h*w) 3x3 tap matrix.

    Channel-first keeps every copy a simple stride-1 row copy and lets each
    conv layer run as one large GEMM over all frames at once.
    """
    c, n, h, w = x_cf.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x_cf.dtype)
    xp[:, :, 1:-1, 1:-1] = x_cf
    cols = np.empty((c, 9, n * h * w), dtype=x_cf.dtype)
    k = 0
    for ky in range(3):
        for kx in range(3):
            cols[:, k, :] = xp[:, :, ky:ky + h, kx:kx + w].reshape(c, n * h * w)
            k += 1
    return cols.reshape(c * 9, n * h * w)


def _col2im_cf(dcols: np.ndarray, c, n, h, w) -> np.ndarray:
    """Adjoint of _im2col_cf: scatter-add taps back into (c,n,h,w)."""
    dxp = np.zeros((c, n, h + 2, w + 2), dtype=dcols.dtype)
    dc = dcols.reshape(c, 9, n, h, w)
    k = 0
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky:ky + h, kx:kx + w] += dc[:, k]
            k += 1
    return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1])


def _maxpool_cf(x_cf: np.ndarray):
    """2x2 max pool on (c,n,h,w); ties go to the lowest flat index."""
    c, n, h, w = x_cf.shape
    xr = x_cf.reshape(c, n, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = np.ascontiguousarray(xr).reshape(c, n, h // 2, w // 2, 4)
    am = xr.argmax(axis=4)
    y = np.take_along_axis(xr, am[..., None], axis=4)[..., 0]
    return y, am


def _maxpool_back_cf(dy: np.ndarray, am: np.ndarray, in_shape) -> np.ndarray:
    c, n, h, w = in_shape
    dxr = np.zeros((c, n, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dxr, am[..., None], dy[..., None], axis=4)
    dxr = dxr.reshape(c, n, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dxr).reshape(c, n, h, w)


def _relu2(y2: np.ndarray) -> np.ndarray:
    # np.where maps -0.0 to +0.0, which the set-pool tie rule relies on
    return np.where(y2 > 0, y2, y2.dtype.type(0))


@dataclass
class ConvCache:
    cols: list         # per layer: (c_in*9, n*h*w) tap matrix
    relu2: list        # per layer: post-ReLU GEMM output (c_out, n*h*w)
    shapes: list       # per layer: (c_out, n, h, w) of the conv output
    pool_am: dict      # layer index -> pooling argmax (channel-first)
    out: np.ndarray    # final feature map, standard (n, c, h, w) layout


def conv_forward(
    params: EncoderParams, view: str, images: np.ndarray, want_cache: bool = False
):
    """Run one view's conv stack on (n, H, W) or (n, 1, H, W) inputs."""
    x = np.asarray(images, dtype=params.dtype)
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.shape[1] != params.conv[view][0][0].shape[1]:
        raise ValueError(
            f"expected {params.conv[view][0][0].shape[1]} input channels, "
            f"got {x.shape[1]}"
        )
    n = x.shape[0]
    x_cf = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    cache = ConvCache([], [], [], {}, None)
    for i, (w, b) in enumerate(params.conv[view]):
        c_out = w.shape[0]
        h, wd = x_cf.shape[2], x_cf.shape[3]
        cols = _im2col_cf(x_cf)
        y2 = _relu2(w.reshape(c_out, -1) @ cols + b[:, None])
        cache.cols.append(cols)
        cache.relu2.append(y2)
        cache.shapes.append((c_out, n, h, wd))
        x_cf = y2.reshape(c_out, n, h, wd)
        if i in POOL_AFTER:
            x_cf, am = _maxpool_cf(x_cf)
            cache.pool_am[i] = am
    out = np.ascontiguousarray(x_cf.transpose(1, 0, 2, 3))
    if not want_cache:
        return out
    cache.out = out
    return out, cache


def conv_backward(
    params: EncoderParams, view: str, cache: ConvCache, dout: np.ndarray,
    grads: dict, need_dx: bool = False,
):
    """Backprop dout (standard layout) through one view's conv stack."""
    dx_cf = np.ascontiguousarray(dout.transpose(1, 0, 2, 3))
    for i in range(len(params.conv[view]) - 1, -1, -1):
        w, _ = params.conv[view][i]
        c_out, n, h, wd = cache.shapes[i]
        if i in POOL_AFTER:
            dx_cf = _maxpool_back_cf(dx_cf, cache.pool_am[i], cache.shapes[i])
        dy2 = np.where(cache.relu2[i] > 0, dx_cf.reshape(c_out, -1),
                       dx_cf.dtype.type(0))
        grads[f"{view}.conv{i}.w"] += (dy2 @ cache.cols[i].T).reshape(w.shape)
        grads[f"{view}.conv{i}.b"] += dy2.sum(axis=1)
        if i > 0 or need_dx:
            dcols = w.reshape(c_out, -1).T @ dy2
            c_in = w.shape[1]
            dx_cf = _col2im_cf(dcols, c_in, n, h, wd)
    if need_dx:
        return np.ascontiguousarray(dx_cf.transpose(1, 0, 2, 3))
    return None


def set_pool(frame_features):
    """Elementwise max over frames; bitwise permutation-invariant."""
    x = np.stack(list(frame_features), axis=0)
    if x.shape[0] == 0:
        raise ValueError("set_pool needs at least one frame")
    am = x.argmax(axis=0)
    pooled = np.take_along_axis(x, am[None, ...], axis=0)[0]
    return pooled, am


def set_pool_back(dpooled: np.ndarray, am: np.ndarray, n_frames: int) -> np.ndarray:
    dframes = np.zeros((n_frames,) + dpooled.shape, dtype=dpooled.dtype)
    np.put_along_axis(dframes, am[None, ...], dpooled[None, ...], axis=0)
    return dframes


def fuse_views(per_view_frame_features: dict) -> list:
    """Concatenate the views' per-frame feature maps along channels."""
    views = list(per_view_frame_features)
    counts = {v: len(per_view_frame_features[v]) for v in views}
    if len(set(counts.values())) != 1:
        raise ValueError(f"views disagree on frame count: {counts}")
    n = counts[views[0]]
    return [
        np.concatenate([per_view_frame_features[v][i] for v in views], axis=0)
        for i in range(n)
    ]


@dataclass
class HppCache:
    pooled: np.ndarray
    strip_am: list     # per part: argmax into the strip's flat positions
    strip_vec: list    # per part: max + mean vector
    embed: np.ndarray


def hpp_embed(params: EncoderParams, pooled: np.ndarray, want_cache: bool = False):
    """Horizontal part pooling on one pooled map (C, h, w)."""
    emb, logits, cache = _hpp_batched(params, pooled[None, ...])
    if want_cache:
        return (emb[0], logits[0]), cache
    return emb[0], logits[0]


def _hpp_batched(params: EncoderParams, pooled: np.ndarray):
    """pooled: (S, C, h, w) -> embeddings (S, P, 128), logits (S, P, K)."""
    s_n, c, h, w = pooled.shape
    parts = params.n_parts
    if h % parts:
        raise ValueError(f"{h} feature rows do not split into {parts} strips")
    rh = h // parts
    emb = np.empty((s_n, parts, PART_DIM), dtype=pooled.dtype)
    logits = np.empty((s_n, parts, params.n_classes), dtype=pooled.dtype)
    cache = HppCache(pooled, [], [], None)
    for s in range(parts):
        flat = pooled[:, :, s * rh:(s + 1) * rh, :].reshape(s_n, c, rh * w)
        am = flat.argmax(axis=2)
        mx = np.take_along_axis(flat, am[..., None], axis=2)[..., 0]
        vec = mx + flat.mean(axis=2)
        emb[:, s, :] = vec @ params.part_w[s].T + params.part_b[s]
        logits[:, s, :] = emb[:, s, :] @ params.cls_w[s].T + params.cls_b[s]
        cache.strip_am.append(am)
        cache.strip_vec.append(vec)
    cache.embed = emb
    return emb, logits, cache


def _hpp_backward(
    params: EncoderParams, cache: HppCache,
    d_emb: np.ndarray, d_logits: np.ndarray, grads: dict,
) -> np.ndarray:
    s_n, c, h, w = cache.pooled.shape
    parts = params.n_parts
    rh = h // parts
    dpooled = np.zeros_like(cache.pooled)
    for s in range(parts):
        de = d_emb[:, s, :].copy()
        dl = d_logits[:, s, :]
        grads[f"cls{s}.w"] += dl.T @ cache.embed[:, s, :]
        grads[f"cls{s}.b"] += dl.sum(axis=0)
        de += dl @ params.cls_w[s]
        grads[f"part{s}.w"] += de.T @ cache.strip_vec[s]
        grads[f"part{s}.b"] += de.sum(axis=0)
        dvec = de @ params.part_w[s]                      # (S, C)
        dflat = np.broadcast_to(
            (dvec / (rh * w))[:, :, None], (s_n, c, rh * w)
        ).copy()
        idx_s = np.arange(s_n)[:, None]
        idx_c = np.arange(c)[None, :]
        dflat[idx_s, idx_c, cache.strip_am[s]] += dvec
        dpooled[:, :, s * rh:(s + 1) * rh, :] += dflat.reshape(s_n, c, rh, w)
    return dpooled


@dataclass
class BatchCache:
    conv_caches: dict   # view -> ConvCache over (S*L) frames
    pool_am: np.ndarray
    hpp: HppCache
    shape: tuple        # (S, L)
    embeddings: np.ndarray
    logits: np.ndarray


def forward_batch(params: EncoderParams, batch: dict, want_cache: bool = False):
    """Embed S sequences of L frames each.

    batch[view]: (S, L, H, W) float array scaled to [0, 1]. Returns
    embeddings (S, n_parts, 128) and logits (S, n_parts, n_classes).
    """
    views = params.views
    if set(views) != set(batch):
        raise ValueError(f"batch views {sorted(batch)} != params views {views}")
    s_n, l_n = next(iter(batch.values())).shape[:2]
    feats = []
    conv_caches = {}
    for view in views:
        x = batch[view]
        if x.shape[:2] != (s_n, l_n):
            raise ValueError("views disagree on batch shape")
        out, cc = conv_forward(
            params, view, x.reshape((s_n * l_n,) + x.shape[2:]), want_cache=True
        )
        conv_caches[view] = cc
        feats.append(out.reshape((s_n, l_n) + out.shape[1:]))
    fused = feats[0] if len(feats) == 1 else np.concatenate(feats, axis=2)
    pool_am = fused.argmax(axis=1)
    pooled = np.take_along_axis(fused, pool_am[:, None], axis=1)[:, 0]
    emb, logits, hpp_cache = _hpp_batched(params, pooled)
    if not want_cache:
        return emb, logits
    return emb, logits, BatchCache(
        conv_caches, pool_am, hpp_cache, (s_n, l_n), emb, logits
    )


def compute_gradients(
    params: EncoderParams, cache: BatchCache,
    d_embeddings: np.ndarray, d_logits: np.ndarray,
) -> dict:
    """Exact analytic gradients for every parameter tensor."""
    grads = params.zero_grads()
    s_n, l_n = cache.shape
    dpooled = _hpp_backward(params, cache.hpp, d_embeddings, d_logits, grads)
    dfused = np.zeros(
        (s_n, l_n) + dpooled.shape[1:], dtype=dpooled.dtype
    )
    np.put_along_axis(dfused, cache.pool_am[:, None], dpooled[:, None], axis=1)
    for vi, view in enumerate(params.views):
        dv = dfused[:, :, vi * FEATURE_CHANNELS:(vi + 1) * FEATURE_CHANNELS]
        dv = dv.reshape((s_n * l_n,) + dv.shape[2:])
        conv_backward(params, view, cache.conv_caches[view], dv, grads)
    return grads


def embed_sequence(params: EncoderParams, frames_by_view: dict) -> np.ndarray:
    """Inference: frames (T, H, W) in [0,1] per view -> (n_parts, 128)."""
    batch = {
        v: np.asarray(x, dtype=params.dtype)[None, ...]
        for v, x in frames_by_view.items()
    }
    emb, _ = forward_batch(params, batch)
    return emb[0]


def save_params(path: str | Path, params: EncoderParams) -> None:
    """ENC1: magic, one ASCII descriptor line, then float32 blobs."""
    desc = (
        f"views={','.join(params.views)} parts={params.n_parts}"
        f" classes={params.n_classes}"
        f" channels={','.join(str(c) for c in CONV_CHANNELS)}"
        f" part_dim={PART_DIM} input={params.input_mode}\n"
    )
    with open(path, "wb") as fh:
        fh.write(ENC_MAGIC)
        fh.write(desc.encode("ascii"))
        for _, tensor in params.named_tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_params(path: str | Path) -> EncoderParams:
    with open(path, "rb") as fh:
        if fh.read(len(ENC_MAGIC)) != ENC_MAGIC:
            raise ValueError(f"{path}: not an ENC1 checkpoint")
        desc = b""
        while not desc.endswith(b"\n"):
            ch = fh.read(1)
            if not ch:
                raise ValueError(f"{path}: truncated descriptor")
            desc += ch
        fields = dict(kv.split("=", 1) for kv in desc.decode("ascii").split())
        views = tuple(fields["views"].split(","))
        channels = tuple(int(c) for c in fields["channels"].split(","))
        if channels != CONV_CHANNELS:
            raise ValueError(f"{path}: unsupported conv channels {channels}")
        params = EncoderParams(
            views, int(fields["classes"]), int(fields["parts"]),
            input_mode=fields.get("input", "depth"),
        )
        blob = fh.read()

    def take(shape, offset):
        size = int(np.prod(shape))
        arr = np.frombuffer(
            blob, dtype="<f4", count=size, offset=offset
        ).reshape(shape).copy()
        return arr, offset + size * 4

    off = 0
    for view in views:
        layers = []
        c_in = 1
        for c_out in CONV_CHANNELS:
            w, off = take((c_out, c_in, 3, 3), off)
            b, off = take((c_out,), off)
            layers.append([w, b])
            c_in = c_out
        params.conv[view] = layers
    c_total = params.feature_channels
    for _ in range(params.n_parts):
        w, off = take((PART_DIM, c_total), off)
        b, off = take((PART_DIM,), off)
        params.part_w.append(w)
        params.part_b.append(b)
    for _ in range(params.n_parts):
        w, off = take((params.n_classes, PART_DIM), off)
        b, off = take((params.n_classes,), off)
        params.cls_w.append(w)
        params.cls_b.append(b)
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params
