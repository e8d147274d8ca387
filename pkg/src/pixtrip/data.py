"""Synthetic co-segmentation corpora and their on-disk formats.

Images are binary PPM (P6, maxval 255), masks binary PGM (P5, 0 = background,
255 = foreground). A manifest is a UTF-8 text file with one tab-separated
entry per line: ``image_a mask_a image_b mask_b class_id``; lines starting
with ``#`` are comments. Relative paths resolve against the manifest's folder.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SHAPE_CLASSES = ("disc", "square", "triangle")
FG_FRACTION_RANGE = (0.05, 0.30)


class FormatError(ValueError):
    """Malformed image, mask or manifest file."""


@dataclass
class ImagePair:
    image_a: np.ndarray  # [C,H,W] in [0,1]
    image_b: np.ndarray
    mask_a: np.ndarray  # [H,W] uint8 in {0,1}
    mask_b: np.ndarray
    class_id: str


@dataclass
class ManifestEntry:
    image_a: Path
    mask_a: Path
    image_b: Path
    mask_b: Path
    class_id: str


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    split: str = "train"
    seed: int | None = None
    path: Path | None = None
    # per entry: distractor classes drawn into each image (generation only)
    metadata: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# netpbm


def _read_netpbm(path: Path, magic: bytes) -> tuple[np.ndarray, int]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    buf = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before raster
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, found {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric header field") from None
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise FormatError(f"{path}: bad header values {width}x{height} maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    raster = np.frombuffer(buf, dtype=np.uint8, count=min(n, len(buf) - pos), offset=pos)
    if raster.size != n:
        raise FormatError(f"{path}: raster has {raster.size} bytes, header promises {n}")
    return raster.reshape(height, width, channels), maxval


def _write_netpbm(path: Path, raster: np.ndarray, magic: bytes) -> None:
    h, w = raster.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(raster, np.uint8).tobytes())


def save_image(image: np.ndarray, path) -> None:
    """Write a ``[3,H,W]`` image in [0,1] as P6."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must be [3,H,W], got {image.shape}")
    raster = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    _write_netpbm(path, raster, b"P6")


def load_image(path) -> np.ndarray:
    raster, maxval = _read_netpbm(path, b"P6")
    return raster.transpose(2, 0, 1).astype(np.float64) / maxval


def save_mask(mask: np.ndarray, path) -> None:
    """Write a binary ``[H,W]`` mask as P5 with values 0/255."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be [H,W], got {mask.shape}")
    _write_netpbm(path, np.where(mask > 0, 255, 0).astype(np.uint8), b"P5")


def load_mask(path) -> np.ndarray:
    """Read a P5 mask; pixels above half of maxval are foreground."""
    raster, maxval = _read_netpbm(path, b"P5")
    return (raster[:, :, 0].astype(np.float64) > 0.5 * maxval).astype(np.uint8)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(manifest: CorpusManifest, path) -> None:
    path = Path(path)
    base = path.parent
    lines = [f"# split={manifest.split}", f"# seed={manifest.seed}"]
    for e in manifest.entries:
        cols = [e.image_a, e.mask_a, e.image_b, e.mask_b]
        lines.append("\t".join([Path(c).relative_to(base).as_posix() for c in cols] + [e.class_id]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest.path = path


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    split, seed, entries = "train", None, []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key == "split":
                split = value
            elif key == "seed" and value not in ("", "None"):
                seed = int(value)
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(cols)}")
        files = [path.parent / c for c in cols[:4]]
        entries.append(ManifestEntry(*files, class_id=cols[4]))
    return CorpusManifest(entries, split=split, seed=seed, path=path)


def load_pair(entry: ManifestEntry) -> ImagePair:
    image_a, image_b = load_image(entry.image_a), load_image(entry.image_b)
    mask_a, mask_b = load_mask(entry.mask_a), load_mask(entry.mask_b)
    for img, msk, ip, mp in ((image_a, mask_a, entry.image_a, entry.mask_a), (image_b, mask_b, entry.image_b, entry.mask_b)):
        if img.shape[1:] != msk.shape:
            raise FormatError(
                f"image {ip} is {img.shape[2]}x{img.shape[1]} but mask {mp} is {msk.shape[1]}x{msk.shape[0]}"
            )
    if image_a.shape != image_b.shape:
        raise FormatError(f"pair images differ in size: {entry.image_a} {image_a.shape} vs {entry.image_b} {image_b.shape}")
    return ImagePair(image_a, image_b, mask_a, mask_b, entry.class_id)


def load_pairs(manifest: CorpusManifest) -> list[ImagePair]:
    return [load_pair(e) for e in manifest.entries]


# ---------------------------------------------------------------------------
# synthetic generation


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "triangle":
        # upright isosceles: apex at cy - r, base at cy + r, half-width r at the base
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    raise ValueError(f"unknown shape class {kind!r}")


def _area_factor(kind: str) -> float:
    # area / r**2 for the shapes above
    return {"disc": np.pi, "square": 4.0, "triangle": 2.0}[kind]


BACKGROUND_MIN_DISTANCE = 0.25


def _background(rng: np.random.Generator, size: int, avoid: np.ndarray | None = None) -> np.ndarray:
    """Textured background; its base colour stays ``BACKGROUND_MIN_DISTANCE`` from ``avoid``."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    while True:
        base = rng.uniform(0.25, 0.55, size=(3, 1, 1))
        if avoid is None or np.linalg.norm(base - avoid) >= BACKGROUND_MIN_DISTANCE:
            break
    wave = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 4.0, size=2)
        wave += rng.uniform(0.01, 0.03) * np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    noise = rng.normal(0.0, 0.04, size=(3, size, size))
    return base + wave[None] + noise


def _place(rng, kind, size, frac_range, occupied, tries=200) -> np.ndarray | None:
    lo, hi = frac_range
    for _ in range(tries):
        frac = rng.uniform(lo, hi)
        r = np.sqrt(frac * size * size / _area_factor(kind))
        if 2 * r + 2 > size:
            continue
        cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
        m = _shape_mask(kind, size, cy, cx, r)
        if not (m & occupied).any():
            return m
    return None


def _contrasting_color(rng, backgrounds, avoid=(), min_contrast=0.25, min_distance=0.4) -> np.ndarray:
    """Random RGB colour readable against every background and far from each colour in ``avoid``."""
    levels = [bg.mean() for bg in backgrounds]
    while True:
        c = rng.uniform(0.0, 1.0, size=3)
        if any(abs(c.mean() - lv) < min_contrast for lv in levels):
            continue
        if any(np.linalg.norm(c - a) < min_distance for a in avoid):
            continue
        return c


def render_image(
    rng: np.random.Generator,
    background: np.ndarray,
    common: str,
    color: np.ndarray,
    distractors: Sequence[str],
    contrast_with: Sequence[np.ndarray] = (),
    used_colors: list | None = None,
):
    """Draw the ``common`` shape (returned mask) and distractor shapes onto ``background``.

    Distractor colours contrast with ``background`` and every array in
    ``contrast_with``, and stay away from ``color`` and from ``used_colors``;
    each new distractor colour is appended to ``used_colors``.
    """
    size = background.shape[-1]
    lo, hi = FG_FRACTION_RANGE
    used = [color] if used_colors is None else used_colors
    img = background.copy()
    while True:
        mask = _place(rng, common, size, (lo + 0.02, hi - 0.08), np.zeros((size, size), bool))
        if mask is not None and lo <= mask.mean() <= hi:
            break
    occupied = mask.copy()
    # one pixel of clearance around every shape
    grown = np.zeros_like(occupied)
    for kind in distractors:
        grown[:] = occupied
        grown[1:] |= occupied[:-1]
        grown[:-1] |= occupied[1:]
        grown[:, 1:] |= occupied[:, :-1]
        grown[:, :-1] |= occupied[:, 1:]
        d = _place(rng, kind, size, (0.03, 0.12), grown)
        if d is None:
            continue
        c = _contrasting_color(rng, [background, *contrast_with], avoid=used)
        used.append(c)
        img[:, d] = c[:, None]
        occupied |= d
    jitter = rng.uniform(-0.03, 0.03, size=3)
    img[:, mask] = np.clip(color + jitter, 0.0, 1.0)[:, None]
    return np.clip(img, 0.0, 1.0), mask.astype(np.uint8)


def generate_pairs(n_pairs: int, image_size: int, seed: int, classes: Sequence[str] = SHAPE_CLASSES):
    """In-memory generation; yields ``(ImagePair, metadata)`` per pair.

    The common class is the only class present in both images: distractors
    of image A and image B come from disjoint subsets of the other classes.
    The common object also shares its colour (up to a small jitter) across
    the pair. Distractor colours stand out from both backgrounds and stay
    well away from the common colour and from each other.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    classes = list(classes)
    for c in classes:
        if c not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape class {c!r}; choose from {SHAPE_CLASSES}")
    root = np.random.SeedSequence(int(seed))
    for i, ss in enumerate(root.spawn(n_pairs)):
        rng = np.random.default_rng(ss)
        common = classes[int(rng.integers(len(classes)))]
        others = [c for c in classes if c != common]
        rng.shuffle(others)
        pools = (others[: (len(others) + 1) // 2], others[(len(others) + 1) // 2 :])
        # distinct backgrounds: the common object is the only thing the two images share
        first = _background(rng, image_size)
        backgrounds = [first, _background(rng, image_size, avoid=first.mean(axis=(1, 2), keepdims=True))]
        color = _contrasting_color(rng, backgrounds)
        rendered = []
        meta = {"common": common, "distractors": []}
        # every colour in the pair, so no distractor can match anything in the partner image
        used = [color]
        for pool, bg in zip(pools, backgrounds):
            count = int(rng.integers(0, 3)) if pool else 0
            dis = [pool[int(rng.integers(len(pool)))] for _ in range(count)]
            meta["distractors"].append(dis)
            rendered.append(render_image(rng, bg, common, color, dis, contrast_with=backgrounds, used_colors=used))
        (img_a, m_a), (img_b, m_b) = rendered
        yield ImagePair(img_a, img_b, m_a, m_b, common), meta


def generate_corpus(
    n_pairs: int,
    classes: Sequence[str] = SHAPE_CLASSES,
    image_size: int = 64,
    seed: int = 0,
    out_dir=".",
    split: str = "train",
) -> CorpusManifest:
    """Render ``n_pairs`` pairs into ``out_dir`` and write ``<split>.tsv``."""
    out_dir = Path(out_dir)
    try:
        (out_dir / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    entries, metadata = [], []
    for i, (pair, meta) in enumerate(generate_pairs(n_pairs, image_size, seed, classes)):
        stem = out_dir / split / f"pair{i:05d}"
        files = [Path(f"{stem}_a.ppm"), Path(f"{stem}_a_mask.pgm"), Path(f"{stem}_b.ppm"), Path(f"{stem}_b_mask.pgm")]
        save_image(pair.image_a, files[0])
        save_mask(pair.mask_a, files[1])
        save_image(pair.image_b, files[2])
        save_mask(pair.mask_b, files[3])
        entries.append(ManifestEntry(*files, class_id=pair.class_id))
        metadata.append(meta)
    manifest = CorpusManifest(entries, split=split, seed=seed, metadata=metadata)
    write_manifest(manifest, out_dir / f"{split}.tsv")
    log.info("wrote %d %s pairs to %s", n_pairs, split, out_dir)
    return manifest


def file_digest(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()
