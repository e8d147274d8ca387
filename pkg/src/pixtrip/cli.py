"""Command line interface: ``pixtrip {gen,train,eval,gradcheck,compare,plot}``.

Exit status: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as X
from .data import SHAPE_CLASSES, generate_corpus, load_pairs, read_manifest
from .plot import plot_runlogs
from .train import RunLog, TrainConfig, build_config, evaluate_split, load_config, train

log = logging.getLogger("pixtrip")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv_list(text: str, cast=str) -> list:
    try:
        return [cast(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad comma-separated list {text!r}") from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--k", type=int, help="pixel samples per set (K)")
    p.add_argument("--margin", type=float, help="triplet margin m")
    p.add_argument("--lambda", dest="lambda0", type=float, help="initial IS-Triplet weight")
    p.add_argument("--lr", type=float, help="initial learning rate (default: 0.001, or 0.0001 with IS-Triplet)")
    p.add_argument("--corpus", type=Path, help="training manifest (.tsv)")
    p.add_argument("--val", type=Path, help="validation manifest (.tsv)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pixtrip", description="Desk-scale co-segmentation with the IS-Triplet pixel loss.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic co-segmentation corpus")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--n-train", type=int, default=X.PRESET_TRAIN_PAIRS)
    g.add_argument("--n-val", type=int, default=X.PRESET_VAL_PAIRS)
    g.add_argument("--size", type=int, default=X.PRESET_IMAGE_SIZE)
    g.add_argument("--seed", type=int, default=X.PRESET_CORPUS_SEED)
    g.add_argument("--classes", type=_csv_list, default=list(SHAPE_CLASSES))

    t = sub.add_parser("train", help="train one model")
    _add_train_flags(t)
    t.add_argument("--losses", help="loss spec, e.g. dice or dice+ist")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--corpus", type=Path, required=True)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss and a tiny model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--points", type=int, default=20)
    c.add_argument("--params", type=int, default=50)

    m = sub.add_parser("compare", help="loss ablation grid with epochs-to-threshold summary")
    _add_train_flags(m)
    m.add_argument("--losses", type=_csv_list, default=["dice", "dice+ist"])
    m.add_argument("--seeds", type=lambda s: _csv_list(s, int), default=[1, 2, 3])
    m.add_argument("--protocol", choices=["equal-lr", "split-lr", "both"], default="both")
    m.add_argument("--threshold", type=float, default=0.80)

    pl = sub.add_parser("plot", help="RunLog CSVs to SVG line plots")
    pl.add_argument("csvs", nargs="+", type=Path)
    pl.add_argument("--out", type=Path, required=True)
    pl.add_argument("--columns", type=_csv_list, default=["train_loss", "val_jaccard", "val_precision"])
    return parser


def _resolve_config(args, base: TrainConfig) -> tuple[TrainConfig, dict]:
    extras = {}
    if args.config is not None:
        base, extras = load_config(args.config, base, extra_keys=("corpus", "val_corpus"))
    overrides = {}
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("k", "K"), ("margin", "margin_m"), ("lambda0", "lambda0"), ("lr", "lr0")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return build_config(base, **overrides), extras


def _corpus_paths(args, extras: dict) -> tuple[Path | None, Path | None]:
    corpus = args.corpus or (Path(extras["corpus"]) if "corpus" in extras else None)
    val = args.val or (Path(extras["val_corpus"]) if "val_corpus" in extras else None)
    return corpus, val


def _load_split(path: Path):
    return load_pairs(read_manifest(path))


def cmd_gen(args) -> int:
    tr = generate_corpus(args.n_train, args.classes, args.size, args.seed, args.out, split="train")
    va = generate_corpus(args.n_val, args.classes, args.size, args.seed + 1_000_003, args.out, split="val")
    print(f"wrote {len(tr)} train and {len(va)} val pairs; manifests {tr.path} {va.path}")
    return 0


def cmd_train(args) -> int:
    config, extras = _resolve_config(args, TrainConfig())
    if args.losses:
        kind, use_ist = X.parse_loss_spec(args.losses)
        config = replace(config, loss=replace(config.loss, seg_loss_kind=kind, use_is_triplet=use_ist))
    corpus, val = _corpus_paths(args, extras)
    if corpus is None:
        raise UsageError("train: no corpus given (use --corpus or a 'corpus' config key)")
    train_pairs = _load_split(corpus)
    val_pairs = _load_split(val) if val else None
    out = args.out or Path("run")
    runlog, _ = train(config, train_pairs, val_pairs, out_dir=out)
    last = runlog.rows[-1]
    print(f"trained {len(runlog)} epochs; final train_loss {last['train_loss']:.4f} val_jaccard {last['val_jaccard']:.4f}")
    print(f"wrote {out / 'runlog.csv'} and {out / 'model.pxtm'}")
    return 0


def cmd_eval(args) -> int:
    res = evaluate_split(args.checkpoint, _load_split(args.corpus))
    undefined = sum(r.precision_undefined for r in res.records)
    print(f"images {len(res.records)}")
    print(f"precision {res.precision:.6f}")
    print(f"pixel_accuracy {res.pixel_accuracy:.6f}")
    print(f"jaccard {res.jaccard:.6f}")
    if undefined:
        print(f"precision undefined (empty prediction) on {undefined} images, counted as 0")
    return 0


def cmd_gradcheck(args) -> int:
    errors = X.gradcheck_suite(args.seed, args.points, args.params)
    ok = True
    for name, err in errors.items():
        tol = X.MODEL_TOL if name == "model" else X.LOSS_TOL
        passed = err < tol
        ok &= passed
        print(f"{name:<11} max_rel_err {err:.3e}  tol {tol:.0e}  {'ok' if passed else 'FAIL'}")
    return 0 if ok else 2


def cmd_compare(args) -> int:
    config, extras = _resolve_config(args, X.preset_config())
    corpus, val = _corpus_paths(args, extras)
    if corpus is not None:
        train_pairs = _load_split(corpus)
        val_pairs = _load_split(val) if val else None
    else:
        train_pairs, val_pairs = X.preset_corpus(image_size=config.image_size)
    for spec in args.losses:
        X.parse_loss_spec(spec)
    protocols = list(X.PROTOCOLS) if args.protocol == "both" else [args.protocol]
    out = args.out or Path("compare")
    _, rows = X.compare(args.losses, args.seeds, protocols, train_pairs, val_pairs, config, out, args.threshold)
    print(X.format_table(rows, args.threshold))
    print(f"wrote per-run CSVs under {out} and {out / 'summary.csv'}")
    return 0


def cmd_plot(args) -> int:
    logs = {p.parent.name if p.name == "runlog.csv" else p.stem: RunLog.read_csv(p) for p in args.csvs}
    for path in plot_runlogs(logs, args.columns, args.out):
        print(path)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"pixtrip {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
