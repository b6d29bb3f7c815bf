"""``watt`` command line: describe, ablate, train, eval, synth.

Exit codes: 0 success, 2 usage/configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import checkpoint
from .data import SplitSpec, load_directory, make_synthetic, split, write_directory
from .errors import (CheckpointError, ConfigurationError, ContractError, DecodeError, IngestionError,
                     InvalidInputError, NumericError, SplitError)
from .model import GRID_D, GRID_K, ArchConfig, build, describe, default_grid
from .training import evaluate, history_csv, train

log = logging.getLogger("wattnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunConfig:
    command: str
    d: int = 3
    k: int = 6
    attention: bool = True
    data: str | None = None
    seed: int = 0
    epochs: int = 300
    lr: float = 1e-3
    batch: int = 32
    out: str | None = None
    size: int = 224
    balance: bool = True

    def arch(self, num_classes: int = 5) -> ArchConfig:
        cfg = ArchConfig(d=self.d, k=self.k, attention=self.attention,
                         input_shape=(self.size, self.size, 3), num_classes=num_classes)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in vars(args).items() if k in known and v is not None}
        if getattr(args, "no_attention", False):
            values["attention"] = False
        if getattr(args, "no_balance", False):
            values["balance"] = False
        return cls(**values)

    def write(self, out_dir: Path) -> None:
        (out_dir / "config.json").write_text(self.to_json(), newline="\n")


def _out_dir(path: str | None) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_describe(args) -> int:
    rc = RunConfig.from_args(args)
    summary = describe(rc.arch())
    print(summary.to_table())
    out = _out_dir(rc.out)
    if out is not None:
        (out / "summary.csv").write_text(summary.to_csv(), newline="\n")
        rc.write(out)
    return EXIT_OK


def _load_splits(rc: RunConfig):
    if rc.data is None:
        raise IngestionError("--data is required")
    ds = load_directory(rc.data, size=rc.size)
    return ds, split(ds, SplitSpec(seed=rc.seed))


def cmd_ablate(args) -> int:
    rc = RunConfig.from_args(args)
    if args.grid_d or args.grid_k:
        variants = [(d, k) for d in (args.grid_d or GRID_D) for k in (args.grid_k or GRID_K)]
    else:
        variants = default_grid()
    flags = {"on": [True], "off": [False], "both": [True, False]}[args.attention]
    if not variants:
        raise ConfigurationError("empty ablation grid")
    splits = None
    if args.train:
        _, splits = _load_splits(rc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["d", "k", "attention", "params", "attention_params", "macs"] + (["f1"] if args.train else [])
    w.writerow(header)
    for d, k in variants:
        for att in flags:
            cfg = ArchConfig(d=d, k=k, attention=att, input_shape=(rc.size, rc.size, 3))
            s = describe(cfg)
            row = [d, k, int(att), s.total_params, s.attention_params, s.total_macs]
            if splits is not None:
                tr, va, te = splits
                cfg.num_classes = tr.num_classes
                model = build(cfg, seed=rc.seed)
                train(model, tr, va, epochs=rc.epochs, seed=rc.seed, lr=rc.lr, batch_size=rc.batch, balance=rc.balance)
                row.append(f"{evaluate(model, te).macro_f1:.4f}")
            w.writerow(row)
    sys.stdout.write(buf.getvalue())
    out = _out_dir(rc.out)
    if out is not None:
        (out / "ablation.csv").write_text(buf.getvalue(), newline="\n")
        rc.write(out)
    return EXIT_OK


def cmd_train(args) -> int:
    rc = RunConfig.from_args(args)
    out = _out_dir(rc.out or "runs/latest")
    ds, (tr, va, te) = _load_splits(rc)
    model = build(rc.arch(ds.num_classes), seed=rc.seed)
    rc.write(out)

    def progress(h):
        log.info("epoch %d train_loss %.5f valid_loss %.5f valid_f1 %.2f", h.epoch, h.train_loss, h.valid_loss, h.valid_f1)

    try:
        result = train(model, tr, va, epochs=rc.epochs, seed=rc.seed, lr=rc.lr, batch_size=rc.batch,
                       balance=rc.balance, progress=progress)
    except NumericError as exc:
        if exc.state is not None:
            model.load_state_arrays(exc.state)
            checkpoint.save(model, out / "last_good.ckpt", {"seed": rc.seed, "class_names": ds.class_names})
        raise
    (out / "history.csv").write_text(history_csv(result.history), newline="\n")
    checkpoint.save(model, out / "best.ckpt", {
        "seed": rc.seed, "ratios": [4, 1, 2], "size": rc.size, "data": rc.data,
        "class_names": ds.class_names, "best_epoch": result.best_epoch,
    })
    print(f"best epoch {result.best_epoch}: valid macro F1 {result.best_f1:.2f}%")
    print(f"wrote {out / 'history.csv'}, {out / 'best.ckpt'}, {out / 'config.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, header = checkpoint.load(args.checkpoint)
    extra = header.get("extra", {})
    size = model.config.input_shape[0]
    ds = load_directory(args.data, size=size)
    if ds.num_classes != model.config.num_classes:
        raise IngestionError(f"checkpoint predicts {model.config.num_classes} classes, data has {ds.num_classes}")
    if args.split != "all":
        parts = dict(zip(("train", "valid", "test"), split(ds, SplitSpec(seed=extra.get("seed", 0)))))
        ds = parts[args.split]
    report = evaluate(model, ds)
    out = _out_dir(args.out or ".")
    report.write(out)
    print(f"samples: {len(ds)}")
    print(f"macro F1: {report.macro_f1:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = make_synthetic(args.n, args.size, args.seed)
    write_directory(ds, args.out)
    print(f"wrote {len(ds)} images in {ds.num_classes} classes under {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _arch_flags(p: argparse.ArgumentParser, with_dk: bool = True) -> None:
    if with_dk:
        p.add_argument("--d", type=int, default=3, help="number of WATT stages")
        p.add_argument("--k", type=int, default=6, help="width multiplier")
        p.add_argument("--no-attention", action="store_true", help="drop the attention gates")
    p.add_argument("--size", type=int, default=224, help="input resolution (square)")


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset root with one folder per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--no-balance", action="store_true", help="skip undersampling")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="watt", description="Wide attention EfficientNet toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("describe", help="per-layer parameter and MAC table")
    _arch_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("ablate", help="parameter/MAC grid over d, k and attention")
    _arch_flags(p, with_dk=False)
    _run_flags(p)
    p.add_argument("--d", dest="grid_d", type=int, nargs="+")
    p.add_argument("--k", dest="grid_k", type=int, nargs="+")
    p.add_argument("--attention", choices=("on", "off", "both"), default="on")
    p.add_argument("--train", action="store_true", help="train each variant on --data and add test F1")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("train", help="train on a class-folder dataset")
    _arch_flags(p)
    _run_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="confusion matrix, PR curves and macro F1")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("all", "train", "valid", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write the synthetic 5-class pattern dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, DecodeError, SplitError, CheckpointError, InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
