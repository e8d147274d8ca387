"""Siamese encoder / correlation block / decoder co-segmentation network.

Both images run through the same encoder (shared parameter objects). The
bottleneck features of each image are scored against every position of the
other image's features, summarized per position, fused with the image's own
features by a 1x1 conv, and decoded back to input resolution with skip
connections. The same summaries computed on the pooled input pixels are
appended to one mid-resolution skip. The last decoder conv is the D-channel embedding head; a 1x1
conv on the embedding gives the two-channel logits.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import avg_pool2x, conv2d, upsample2x
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"PXTM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    embed_dim: int = 64
    upsample: str = "bilinear"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be a non-empty list of positive ints")
        if self.embed_dim < 1 or self.in_channels < 1:
            raise ValueError("embed_dim and in_channels must be positive")
        if self.upsample not in ("nearest", "bilinear"):
            raise ValueError(f"upsample must be 'nearest' or 'bilinear', got {self.upsample!r}")

    @property
    def depth(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


# per-position summaries of the correlation against all partner positions
# (max and mean cosine, nearest-feature distance ratio), appended to the
# bottleneck features; the same summaries of the pooled input pixels join
# one mid-resolution skip
N_CORR_STATS = 3
STAT_EPS = 0.01


def corr_skip_level(cfg: "ModelConfig") -> int:
    """Index of the skip connection that also receives pixel correlation stats."""
    return min(1, cfg.depth - 1)


def _layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    prev = cfg.in_channels
    for i, c in enumerate(cfg.channels):
        shapes += [(f"enc{i}.w", (c, prev, 3, 3)), (f"enc{i}.b", (c,))]
        prev = c
    top = cfg.channels[-1]
    shapes += [("fuse.w", (top, top + N_CORR_STATS, 1, 1)), ("fuse.b", (top,))]
    skip_ch = list(cfg.channels)
    skip_ch[corr_skip_level(cfg)] += N_CORR_STATS
    up = top
    for i in reversed(range(1, cfg.depth)):
        c = cfg.channels[i - 1]
        shapes += [(f"dec{i}.w", (c, up + skip_ch[i], 3, 3)), (f"dec{i}.b", (c,))]
        up = c
    shapes += [("embed.w", (cfg.embed_dim, up + skip_ch[0], 3, 3)), ("embed.b", (cfg.embed_dim,))]
    shapes += [("logit.w", (2, cfg.embed_dim, 1, 1)), ("logit.b", (2,))]
    return shapes


@dataclass
class CoSegModel:
    config: ModelConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def forward(self, images_a, images_b):
        """Run a stack of pairs ``[N,C,H,W]`` (or a single pair ``[C,H,W]``)."""
        return forward_pair(images_a, images_b, self)


def init_params(config: ModelConfig, rng_seed: int) -> CoSegModel:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(rng_seed)
    params = OrderedDict()
    for name, shape in _layer_shapes(config):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            receptive = shape[2] * shape[3]
            limit = np.sqrt(6.0 / ((shape[1] + shape[0]) * receptive))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return CoSegModel(config, params)


def _flat(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return T.reshape(x, (n, c, h * w))


def _pair_scores(fa: Tensor, fb: Tensor) -> Tensor:
    """``[N, hw_a, hw_b]`` inner products of flattened ``[N, C, hw]`` features."""
    return T.matmul(T.transpose(fa, (0, 2, 1)), fb)


def correlation_block(feat_a, feat_b) -> Tensor:
    """All-pairs channel-normalized inner products.

    ``out[q, i, j] = <feat_a[:, i, j], feat_b[:, q]> / C`` where ``q`` runs over
    the flattened ``h*w`` positions of ``feat_b``. Stacks ``[N,C,h,w]`` give
    ``[N, h*w, h, w]``.
    """
    a, b = T.as_tensor(feat_a), T.as_tensor(feat_b)
    if a.shape != b.shape or a.ndim not in (3, 4):
        raise ShapeError(f"correlation_block: need equal [C,h,w] shapes, got {a.shape} and {b.shape}")
    squeeze = a.ndim == 3
    if squeeze:
        a, b = a.reshape(1, *a.shape), b.reshape(1, *b.shape)
    n, c, h, w = a.shape
    corr = T.scale(_pair_scores(_flat(b), _flat(a)), 1.0 / c)
    out = corr.reshape(n, h * w, h, w)
    return out.reshape(h * w, h, w) if squeeze else out


def _unit_features(feat: Tensor) -> Tensor:
    # per-position L2 normalization: inner products become cosines
    c = feat.shape[1]
    norm = T.sqrt(T.reduce("sum", T.square(feat), axis=1) + 1e-6)
    norm = T.reshape(norm, (feat.shape[0], 1) + feat.shape[2:])
    return feat / T.concat([norm] * c, axis=1)


def _correlation_stats(feat: Tensor, partner: Tensor) -> Tensor:
    """Per-position correlation summaries ``[N, 3, h, w]`` against every partner position.

    The statistics are reductions of the correlation block over the partner
    axis. They are computed from ``[N, hw, hw_partner]`` score matrices
    (partner axis last) and, for the means, through linearity, so the only
    quadratic-size tensors are two score matrices.
    """
    n, c, h, w = feat.shape
    hw = h * w
    as_map = lambda t: T.reshape(t, (n, 1, h, w))

    ua, ub = _flat(_unit_features(feat)), _flat(_unit_features(partner))
    max_cos = T.amax(_pair_scores(ua, ub), axis=2)
    mean_cos = _pair_scores(ua, T.reshape(T.reduce("mean", ub, axis=2), (n, c, 1)))

    # |a - b|^2 / C = sq_a + sq_b - 2 <a, b> / C, with sq_b and -2b/C folded into one matmul
    fa, fb = _flat(feat), _flat(partner)
    sq_a = T.reduce("mean", T.square(fa), axis=1)
    sq_b = T.reshape(T.reduce("mean", T.square(fb), axis=1), (n, 1, hw))
    aug_a = T.concat([fa, Tensor(np.ones((n, 1, hw)))], axis=1)
    aug_b = T.concat([T.scale(fb, -2.0 / c), sq_b], axis=1)
    nearest = sq_a + T.amin(_pair_scores(aug_a, aug_b), axis=2)
    mean_dist = sq_a + T.reshape(_pair_scores(aug_a, T.reshape(T.reduce("mean", aug_b, axis=2), (n, c + 1, 1))), (n, hw))
    ratio = nearest / (mean_dist + 1e-6)

    # raw summaries crowd near 1 (max cosine) or 0 (ratio); logs spread them to O(1)
    stats = [
        T.scale(T.log(1.0 - max_cos + STAT_EPS, floor=STAT_EPS), -1.0),
        mean_cos,
        T.scale(T.log(ratio + STAT_EPS, floor=STAT_EPS), -1.0),
    ]
    return T.concat([as_map(t) for t in stats], axis=1)


def _pair_stats(x: Tensor, n: int) -> Tensor:
    a, b = x[:n], x[n:]
    return T.concat([_correlation_stats(a, b), _correlation_stats(b, a)], axis=0)


def _check_inputs(a: Tensor, b: Tensor, cfg: ModelConfig) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image pair shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 4 or a.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected images [N,{cfg.in_channels},H,W], got {a.shape}")
    div = 2**cfg.depth
    h, w = a.shape[2:]
    if h % div or w % div:
        raise ShapeError(f"image size {h}x{w} must be divisible by {div} (2**encoder depth)")


def forward_pair(img_a, img_b, model: CoSegModel):
    """Return ``(emb_a, logits_a, emb_b, logits_b)``.

    Single images ``[C,H,W]`` give ``[D,H,W]`` and ``[2,H,W]``; stacks keep
    their leading axis.
    """
    a, b = T.as_tensor(img_a), T.as_tensor(img_b)
    single = a.ndim == 3
    if single:
        a, b = a.reshape(1, *a.shape), b.reshape(1, *b.shape)
    cfg, p = model.config, model.params
    _check_inputs(a, b, cfg)
    n = a.shape[0]

    # both branches in one stack: rows [0, n) are A, [n, 2n) are B.
    # Images in [0, 1] are centred to [-1, 1]; with all-positive inputs and zero
    # biases, first-layer units whose kernel sums negative would start dead.
    x = T.concat([a, b], axis=0)
    x = T.scale(x, 2.0) - 1.0
    # pixel-level matching: colour identity survives pooling but not learned
    # features trained for objectness, so these stats see the raw (centred) input
    lvl = corr_skip_level(cfg)
    pixels = x
    for _ in range(lvl):
        pixels = avg_pool2x(pixels)
    pixel_stats = _pair_stats(pixels, n)
    skips = []
    for i in range(cfg.depth):
        x = T.relu(conv2d(x, p[f"enc{i}.w"], p[f"enc{i}.b"], padding=1))
        skips.append(x)
        x = avg_pool2x(x)

    skips[lvl] = T.concat([skips[lvl], pixel_stats], axis=1)
    fused = T.concat([x, _pair_stats(x, n)], axis=1)
    x = T.relu(conv2d(fused, p["fuse.w"], p["fuse.b"]))

    for i in reversed(range(1, cfg.depth)):
        x = T.concat([upsample2x(x, cfg.upsample), skips[i]], axis=1)
        x = T.relu(conv2d(x, p[f"dec{i}.w"], p[f"dec{i}.b"], padding=1))
    x = T.concat([upsample2x(x, cfg.upsample), skips[0]], axis=1)
    emb = conv2d(x, p["embed.w"], p["embed.b"], padding=1)
    logits = conv2d(emb, p["logit.w"], p["logit.b"])

    outs = (emb[:n], logits[:n], emb[n:], logits[n:])
    if single:
        outs = tuple(o[0] for o in outs)
    return outs


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic "PXTM" | u32 version | u32 len | config JSON (utf-8)
#   u32 count | per parameter: u16 len | name (utf-8) | u32 ndim | u32 dims... | f64 LE data
# all integers little-endian


def save_checkpoint(model: CoSegModel, path, extra: dict | None = None) -> None:
    header = {"model": model.config.to_dict()}
    if extra:
        header["extra"] = extra
    cfg = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    chunks.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def _parse_body(buf: bytes, n_cfg: int):
    pos = 12
    header = json.loads(buf[pos : pos + n_cfg].decode("utf-8"))
    pos += n_cfg
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = OrderedDict()
    for _ in range(count):
        (n_name,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n_name].decode("utf-8")
        pos += n_name
        (ndim,) = struct.unpack_from("<I", buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
        pos += 4 + 4 * ndim
        n = int(np.prod(shape))
        data = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        params[name] = Tensor(data.astype(np.float64), requires_grad=True)
    return header, params, pos


def load_checkpoint(path) -> tuple[CoSegModel, dict]:
    """Inverse of :func:`save_checkpoint`; returns the model and the ``extra`` dict."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a PXTM checkpoint")
    version, n_cfg = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    try:
        header, params, pos = _parse_body(buf, n_cfg)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after parameter blobs")
    model = CoSegModel(ModelConfig(**header["model"]), params)
    expected = [name for name, _ in _layer_shapes(model.config)]
    if list(params) != expected:
        raise ValueError(f"{path}: parameter names do not match the stored model config")
    return model, header.get("extra", {})
