"""Training loop, optimizer, run logs and split evaluation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import ImagePair
from .losses import LossConfig, combined_loss, is_triplet_loss, segmentation_loss
from .metrics import EvalRecord, binarize, evaluate, mean_record
from .model import CoSegModel, ModelConfig, forward_pair, init_params, load_checkpoint, save_checkpoint
from .sampler import pixel_seed, sample_pixel_sets
from .tensor import Tensor

log = logging.getLogger(__name__)

LR_WITHOUT_IST = 0.001
LR_WITH_IST = 0.0001


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float | None = None  # None: 0.001 without IS-Triplet, 0.0001 with
    lr_decay: float = 0.85
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 3
    seed: int = 0
    image_size: int = 64
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    # wall-clock seconds make logs irreproducible; off by default (the verbose log still shows them)
    log_wall_time: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr0 is not None and self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")

    @property
    def initial_lr(self) -> float:
        if self.lr0 is not None:
            return self.lr0
        return LR_WITH_IST if self.loss.use_is_triplet else LR_WITHOUT_IST

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr * self.lr_decay**epoch

    def lambda_at(self, epoch: int) -> float:
        return self.loss.lambda_at(epoch) if self.loss.use_is_triplet else 0.0


RUNLOG_FIELDS = (
    "epoch",
    "train_loss",
    "train_seg_loss",
    "train_ist_loss",
    "lr",
    "lambda",
    "val_precision",
    "val_pixel_accuracy",
    "val_jaccard",
    "wall_seconds",
)


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        if set(row) != set(RUNLOG_FIELDS):
            raise ValueError(f"RunLog row needs exactly {RUNLOG_FIELDS}")
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("RunLog epochs must be strictly increasing")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RUNLOG_FIELDS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in RUNLOG_FIELDS[1:]])

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != RUNLOG_FIELDS:
                raise ValueError(f"{path}: unexpected RunLog header {header}")
            out = cls()
            for rec in reader:
                out.append(epoch=int(rec[0]), **{k: float(v) for k, v in zip(RUNLOG_FIELDS[1:], rec[1:])})
        return out


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None] | None,
    state: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """``v <- momentum*v + grad + weight_decay*param; param <- param - lr*v``.

    ``grads=None`` reads each parameter's ``.grad``; a missing gradient counts
    as zero. ``state`` holds the velocities and is updated in place.
    """
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient in parameter {name!r} ({bad} of {g.size} entries)")
        v = state.get(name)
        v = g + weight_decay * p.data if v is None else momentum * v + g + weight_decay * p.data
        state[name] = v
        p.data = p.data - lr * v


# ---------------------------------------------------------------------------
# batches


def _stack(pairs: Sequence[ImagePair]):
    a = np.stack([p.image_a for p in pairs])
    b = np.stack([p.image_b for p in pairs])
    ma = np.stack([p.mask_a for p in pairs]).astype(np.float64)
    mb = np.stack([p.mask_b for p in pairs]).astype(np.float64)
    return a, b, ma, mb


def batch_losses(
    model: CoSegModel,
    pairs: Sequence[ImagePair],
    config: TrainConfig,
    epoch: int,
    image_indices: Sequence[int],
) -> tuple[Tensor, Tensor, Tensor | None, float]:
    """Forward one batch of pairs; returns ``(total, seg, ist, lambda)``.

    Segmentation loss is averaged over both images of every pair. The
    IS-Triplet term is computed per image and averaged over the images whose
    mask has both classes; it is skipped entirely when lambda is 0.
    """
    a, b, ma, mb = _stack(pairs)
    emb_a, logits_a, emb_b, logits_b = forward_pair(a, b, model)
    logits = T.concat([logits_a, logits_b], axis=0)
    masks = np.concatenate([ma, mb], axis=0)
    seg = segmentation_loss(logits, masks, config.loss)

    lam = config.lambda_at(epoch)
    ist = None
    if lam > 0:
        n = len(pairs)
        terms = []
        for j in range(2 * n):
            emb = emb_a[j] if j < n else emb_b[j - n]
            idx = image_indices[j % n] * 2 + (j >= n)
            sets = sample_pixel_sets(emb, masks[j], config.loss.K, pixel_seed(config.seed, epoch, idx))
            if sets is not None:
                terms.append(is_triplet_loss(sets, config.loss.margin_m))
        if terms:
            ist = T.scale(T.reduce("sum", T.stack(terms)), 1.0 / len(terms))
    total = seg if ist is None else combined_loss(seg, ist, lam)
    return total, seg, ist, lam


def predict_logits(model, images_a: np.ndarray, images_b: np.ndarray, batch_size: int = 8):
    """Logit stacks for both sides, computed without building a graph."""
    outs_a, outs_b = [], []
    with T.no_grad():
        for s in range(0, len(images_a), batch_size):
            _, la, _, lb = model.forward(images_a[s : s + batch_size], images_b[s : s + batch_size])
            outs_a.append(la.data)
            outs_b.append(lb.data)
    return np.concatenate(outs_a), np.concatenate(outs_b)


@dataclass
class SplitResult:
    precision: float
    pixel_accuracy: float
    jaccard: float
    records: list[EvalRecord]


def evaluate_split(model, pairs: Sequence[ImagePair], batch_size: int = 8) -> SplitResult:
    """Mean precision / pixel accuracy / Jaccard over both images of every pair.

    ``model`` is a :class:`CoSegModel`, a checkpoint path, or anything with a
    compatible ``forward(images_a, images_b)``.
    """
    if isinstance(model, (str, Path)):
        model, _ = load_checkpoint(model)
    if not pairs:
        raise ValueError("evaluate_split needs at least one pair")
    a, b, ma, mb = _stack(pairs)
    la, lb = predict_logits(model, a, b, batch_size)
    pred_a, pred_b = binarize(la), binarize(lb)
    records = []
    for i in range(len(pairs)):
        records.append(evaluate(pred_a[i], ma[i]))
        records.append(evaluate(pred_b[i], mb[i]))
    means = mean_record(records)
    return SplitResult(records=records, **means)


# ---------------------------------------------------------------------------
# training


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)], spawn_key=(1,)))


def train(
    config: TrainConfig,
    train_pairs: Sequence[ImagePair],
    val_pairs: Sequence[ImagePair] | None = None,
    out_dir=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[RunLog, CoSegModel]:
    """Train a fresh model; optionally write runlog.csv, model.pxtm and config.txt."""
    if not train_pairs:
        raise ValueError("training corpus is empty")
    size = train_pairs[0].image_a.shape[1:]
    for p in list(train_pairs) + list(val_pairs or []):
        if p.image_a.shape[1:] != size or p.image_b.shape[1:] != size:
            raise ValueError(f"all images must be {size[0]}x{size[1]}; got {p.image_a.shape[1:]}")

    model = init_params(config.model, config.seed)
    velocity: dict[str, np.ndarray] = {}
    runlog = RunLog()
    started = time.perf_counter()

    for epoch in range(config.epochs):
        lr, lam = config.lr_at(epoch), config.lambda_at(epoch)
        order = _epoch_rng(config.seed, epoch).permutation(len(train_pairs))
        sums = np.zeros(3)
        n_batches = 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            total, seg, ist, _ = batch_losses(model, [train_pairs[i] for i in idx], config, epoch, idx)
            value = total.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"training loss became {value} at epoch {epoch}, batch {n_batches}")
            model.zero_grad()
            total.backward()
            sgd_step(model.params, None, velocity, lr, config.momentum, config.weight_decay)
            sums += (value, seg.item(), 0.0 if ist is None else ist.item())
            n_batches += 1
        means = sums / n_batches

        if val_pairs:
            val = evaluate_split(model, val_pairs)
            v = (val.precision, val.pixel_accuracy, val.jaccard)
        else:
            v = (math.nan,) * 3
        wall = time.perf_counter() - started
        row = dict(
            epoch=epoch,
            train_loss=float(means[0]),
            train_seg_loss=float(means[1]),
            train_ist_loss=float(means[2]),
            lr=lr,
            **{"lambda": lam},
            val_precision=v[0],
            val_pixel_accuracy=v[1],
            val_jaccard=v[2],
            wall_seconds=wall if config.log_wall_time else 0.0,
        )
        runlog.append(**row)
        log.info(
            "epoch %d loss %.4f seg %.4f ist %.4f val_jaccard %.4f (%.1fs)",
            epoch, means[0], means[1], means[2], v[2], wall,
        )
        if on_epoch is not None:
            on_epoch(row)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        runlog.to_csv(out / "runlog.csv")
        save_checkpoint(model, out / "model.pxtm", extra={"train": config_to_flat(config)})
        (out / "config.txt").write_text(dump_config(config), encoding="utf-8")
    return runlog, model


# ---------------------------------------------------------------------------
# flat key=value configs


_LOSS_KEYS = {f.name for f in fields(LossConfig)}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"loss", "model"}


def config_to_flat(config: TrainConfig) -> dict:
    flat = {k: getattr(config, k) for k in sorted(_TRAIN_KEYS)}
    flat.update(asdict(config.loss))
    flat.update(config.model.to_dict())
    return flat


def _format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(config: TrainConfig) -> str:
    flat = config_to_flat(config)
    return "".join(f"{k}={_format_value(flat[k])}\n" for k in sorted(flat))


def _parse_value(template, raw: str, key: str):
    raw = raw.strip()
    try:
        if key == "lr0":
            return None if raw.lower() in ("auto", "none", "") else float(raw)
        if isinstance(template, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse value {raw!r}") from None


def config_keys() -> set[str]:
    return _TRAIN_KEYS | _LOSS_KEYS | _MODEL_KEYS


def parse_config_text(text: str, extra_keys: Sequence[str] = ()) -> tuple[dict, dict]:
    """Parse ``key=value`` lines into (config overrides, extra keys)."""
    known, extras = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        if key in extra_keys:
            extras[key] = value.strip()
        elif key in config_keys():
            known[key] = value
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    return known, extras


def build_config(base: TrainConfig | None = None, **overrides) -> TrainConfig:
    """Apply flat overrides (strings are parsed) to ``base``."""
    base = base or TrainConfig()
    groups = {"train": {}, "loss": {}, "model": {}}
    for key, value in overrides.items():
        if key in _LOSS_KEYS:
            group, template = "loss", getattr(base.loss, key)
        elif key in _MODEL_KEYS:
            group, template = "model", getattr(base.model, key)
        elif key in _TRAIN_KEYS:
            group, template = "train", getattr(base, key)
        else:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse_value(template if key != "lr0" else 0.0, value, key)
        groups[group][key] = value
    loss = replace(base.loss, **groups["loss"])
    model = replace(base.model, **groups["model"])
    return replace(base, loss=loss, model=model, **groups["train"])


def load_config(path, base: TrainConfig | None = None, extra_keys: Sequence[str] = ()) -> tuple[TrainConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    known, extras = parse_config_text(path.read_text(encoding="utf-8"), extra_keys)
    return build_config(base, **known), extras
