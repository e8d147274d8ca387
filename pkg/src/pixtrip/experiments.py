"""Desk-scale presets, loss ablations and the finite-difference suite."""
from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import generate_pairs
from .gradcheck import grad_check, grad_check_params
from .losses import LossConfig, cross_entropy_loss, dice_loss, focal_loss, is_triplet_loss
from .model import ModelConfig, init_params
from .nn import softmax_channel
from .plot import plot_runlogs
from .sampler import SampleSets
from .train import RunLog, TrainConfig, batch_losses, train

log = logging.getLogger(__name__)

# desk-scale preset: 64x64 images, 200 train / 50 val pairs, 15 epochs, batch 3, D=16
PRESET_IMAGE_SIZE = 64
PRESET_TRAIN_PAIRS = 200
PRESET_VAL_PAIRS = 50
PRESET_CORPUS_SEED = 42
PRESET_EPOCHS = 15
PRESET_EQUAL_LR = 0.01

PROTOCOLS = ("equal-lr", "split-lr")


def preset_config(seed: int = 42, **overrides) -> TrainConfig:
    base = TrainConfig(
        lr0=PRESET_EQUAL_LR,
        epochs=PRESET_EPOCHS,
        batch_size=3,
        seed=seed,
        image_size=PRESET_IMAGE_SIZE,
        loss=LossConfig(),
        model=ModelConfig(channels=(16, 32, 64), embed_dim=16),
    )
    return replace(base, **overrides)


def preset_corpus(
    n_train: int = PRESET_TRAIN_PAIRS,
    n_val: int = PRESET_VAL_PAIRS,
    image_size: int = PRESET_IMAGE_SIZE,
    seed: int = PRESET_CORPUS_SEED,
):
    """In-memory train/val pairs; val uses a disjoint seed stream."""
    train_pairs = [p for p, _ in generate_pairs(n_train, image_size, seed)]
    val_pairs = [p for p, _ in generate_pairs(n_val, image_size, seed + 1_000_003)]
    return train_pairs, val_pairs


def parse_loss_spec(spec: str) -> tuple[str, bool]:
    """``"dice"`` -> ("dice", False); ``"focal+ist"`` -> ("focal", True)."""
    parts = [p.strip().lower() for p in spec.split("+") if p.strip()]
    use_ist = "ist" in parts
    kinds = [p for p in parts if p != "ist"]
    if len(kinds) != 1 or kinds[0] not in ("ce", "dice", "focal") or len(parts) != len(kinds) + use_ist:
        raise ValueError(f"bad loss spec {spec!r}; use ce|dice|focal optionally followed by +ist")
    return kinds[0], use_ist


def config_for(base: TrainConfig, loss_spec: str, seed: int, protocol: str) -> TrainConfig:
    kind, use_ist = parse_loss_spec(loss_spec)
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    # split-lr protocol: lr0 chosen by whether IS-Triplet is on
    lr0 = None if protocol == "split-lr" else (base.lr0 if base.lr0 is not None else PRESET_EQUAL_LR)
    loss = replace(base.loss, seg_loss_kind=kind, use_is_triplet=use_ist)
    return replace(base, lr0=lr0, seed=seed, loss=loss)


def epochs_to_threshold(runlog: RunLog, threshold: float) -> int | None:
    for row in runlog.rows:
        if row["val_jaccard"] >= threshold:
            return row["epoch"]
    return None


@dataclass
class RunResult:
    protocol: str
    loss: str
    seed: int
    runlog: RunLog
    out_dir: Path | None

    @property
    def final_jaccard(self) -> float:
        return self.runlog.rows[-1]["val_jaccard"]


def run_grid(
    losses: Sequence[str],
    seeds: Sequence[int],
    protocols: Sequence[str],
    train_pairs,
    val_pairs,
    base: TrainConfig,
    out_dir=None,
) -> list[RunResult]:
    results = []
    for protocol in protocols:
        for loss in losses:
            for seed in seeds:
                cfg = config_for(base, loss, seed, protocol)
                run_dir = None if out_dir is None else Path(out_dir) / protocol / f"{loss}_seed{seed}"
                log.info("run %s %s seed %d", protocol, loss, seed)
                runlog, _ = train(cfg, train_pairs, val_pairs, out_dir=run_dir)
                results.append(RunResult(protocol, loss, seed, runlog, run_dir))
    return results


def _median_epoch(values: list[int | None], never: float) -> float:
    return statistics.median([never if v is None else v for v in values])


def summarize(results: Sequence[RunResult], threshold: float) -> list[dict]:
    """One row per (protocol, loss): epochs-to-threshold and final Jaccard across seeds."""
    rows = []
    keys = []
    for r in results:
        if (r.protocol, r.loss) not in keys:
            keys.append((r.protocol, r.loss))
    for protocol, loss in keys:
        group = [r for r in results if r.protocol == protocol and r.loss == loss]
        reach = [epochs_to_threshold(r.runlog, threshold) for r in group]
        n_epochs = len(group[0].runlog)
        finals = [r.final_jaccard for r in group]
        rows.append(
            {
                "protocol": protocol,
                "loss": loss,
                "seeds": " ".join(str(r.seed) for r in group),
                "epochs_to_threshold": " ".join("never" if e is None else str(e) for e in reach),
                # runs that never reach the threshold count as one epoch past the end
                "median_epochs_to_threshold": _median_epoch(reach, n_epochs),
                "final_jaccard": " ".join(f"{f:.4f}" for f in finals),
                "mean_final_jaccard": float(np.mean(finals)),
            }
        )
    return rows


def jaccard_spread(results: Sequence[RunResult], protocol: str, losses: Sequence[str]) -> float:
    """Max minus min of the seed-averaged final Jaccard across ``losses``."""
    means = [np.mean([r.final_jaccard for r in results if r.protocol == protocol and r.loss == l]) for l in losses]
    return float(max(means) - min(means))


def write_summary(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def format_table(rows: Sequence[dict], threshold: float) -> str:
    head = f"{'protocol':<9} {'loss':<11} {'median epochs to J>=' + format(threshold, 'g'):<26} {'per seed':<16} final J (mean)"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['protocol']:<9} {r['loss']:<11} {r['median_epochs_to_threshold']:<26g} "
            f"{r['epochs_to_threshold']:<16} {r['mean_final_jaccard']:.4f}"
        )
    return "\n".join(lines)


def compare(
    losses: Sequence[str],
    seeds: Sequence[int],
    protocols: Sequence[str],
    train_pairs,
    val_pairs,
    base: TrainConfig,
    out_dir,
    threshold: float = 0.80,
) -> tuple[list[RunResult], list[dict]]:
    """Run the ablation grid, write per-run CSVs, summary.csv and plots."""
    out_dir = Path(out_dir)
    results = run_grid(losses, seeds, protocols, train_pairs, val_pairs, base, out_dir)
    rows = summarize(results, threshold)
    write_summary(rows, out_dir / "summary.csv")
    for protocol in protocols:
        logs = {f"{r.loss} s{r.seed}": r.runlog for r in results if r.protocol == protocol}
        plot_runlogs(logs, ["train_loss", "val_jaccard", "val_precision"], out_dir / protocol / "plots")
    return results, rows


# ---------------------------------------------------------------------------
# finite-difference suite

LOSS_TOL = 1e-4
MODEL_TOL = 1e-3


def _split_sets(x: T.Tensor, k: int) -> SampleSets:
    return SampleSets(F1=x[0:k], F2=x[k : 2 * k], B1=x[2 * k : 3 * k], B2=x[3 * k : 4 * k])


def _hinge_args(x: np.ndarray, k: int, m: float) -> np.ndarray:
    f1, f2, b1, b2 = x[:k], x[k : 2 * k], x[2 * k : 3 * k], x[3 * k :]
    d = lambda a, b: ((a - b) ** 2).sum(axis=1)
    return np.concatenate([d(f1, f2) - d(f1, b1) + m, d(b1, b2) - d(b1, f2) + m])


def gradcheck_suite(seed: int = 0, n_points: int = 20, n_params: int = 50, eps: float = 1e-6) -> dict[str, float]:
    """Max relative error per loss over random interior points, plus the tiny model."""
    rng = np.random.default_rng(seed)
    worst = {"ce": 0.0, "dice": 0.0, "focal": 0.0, "is_triplet": 0.0}
    for _ in range(n_points):
        h, w = rng.integers(2, 6, size=2)
        mask = (rng.random((h, w)) < 0.4).astype(float)
        mask.flat[0], mask.flat[-1] = 1.0, 0.0
        z = rng.normal(size=(2, h, w))
        worst["ce"] = max(worst["ce"], grad_check(lambda x: cross_entropy_loss(x, mask), z, eps))
        worst["dice"] = max(worst["dice"], grad_check(lambda x: dice_loss(softmax_channel(x), mask), z, eps))
        worst["focal"] = max(worst["focal"], grad_check(lambda x: focal_loss(softmax_channel(x), mask, 2.0), z, eps))

        k, d = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        while True:
            pts = rng.normal(size=(4 * k, d))
            # stay clear of the hinge kink
            if np.all(np.abs(_hinge_args(pts, k, 3.0)) > 1e-2):
                break
        worst["is_triplet"] = max(worst["is_triplet"], grad_check(lambda x: is_triplet_loss(_split_sets(x, k), 3.0), pts, eps))

    worst["model"] = tiny_model_gradcheck(seed, n_params, eps)
    return worst


def tiny_model_gradcheck(seed: int = 0, n_params: int = 50, eps: float = 1e-6) -> float:
    """End-to-end check: 8x8 images, encoder depth 1, D=4, Dice + IS-Triplet."""
    rng = np.random.default_rng(seed + 1)
    cfg = TrainConfig(
        lr0=0.01,
        epochs=1,
        batch_size=2,
        seed=seed,
        image_size=8,
        loss=LossConfig(seg_loss_kind="dice", use_is_triplet=True, K=6),
        model=ModelConfig(channels=(4,), embed_dim=4),
    )
    model = init_params(cfg.model, seed)
    for p in model.parameters():
        # nonzero biases so every parameter carries signal
        if p.ndim == 1:
            p.data = rng.normal(scale=0.1, size=p.shape)
    pairs = [pair for pair, _ in generate_pairs(2, 16, seed)]
    for p in pairs:
        p.image_a, p.image_b = p.image_a[:, ::2, ::2].copy(), p.image_b[:, ::2, ::2].copy()
        p.mask_a, p.mask_b = p.mask_a[::2, ::2].copy(), p.mask_b[::2, ::2].copy()
        for m in (p.mask_a, p.mask_b):
            m.flat[0], m.flat[-1] = 1, 0

    def loss_fn():
        return batch_losses(model, pairs, cfg, 0, [0, 1])[0]

    return grad_check_params(loss_fn, model.parameters(), n_params, rng, eps)
