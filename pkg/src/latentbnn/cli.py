"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import bitpack, engine
from .config import ConfigError, dump_config, load_config, read_config, schema_help
from .data import load_dataset
from .errors import DataError, NumericalError, StateError

OUT_ENV = "LATENTBNN_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("latentbnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p, checkpoint=False):
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
    else:
        p.add_argument("--config", help="INI config file; defaults apply when omitted")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted for non-train sections); repeatable")
    p.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or ./runs)")


def build_parser():
    parser = _Parser(
        prog="latentbnn",
        description="Train and deploy dual-path binary networks.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys and defaults:\n\n" + schema_help(),
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--resume", help="continue from this checkpoint")

    p = sub.add_parser("eval", help="accuracy of a checkpoint in one evaluation mode")
    _common(p, checkpoint=True)
    p.add_argument("--mode", default="eval_B", choices=engine.EVAL_MODES)
    p.add_argument("--split", default="test", choices=("train", "test"))

    p = sub.add_parser("recalibrate", help="recompute latent-branch BN statistics")
    _common(p, checkpoint=True)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=128)

    p = sub.add_parser("sweep-lambda", help="train once per lambda value")
    _common(p)
    p.add_argument("--lambdas", default="1e-5,1e-4,1e-3,1e-2")

    p = sub.add_parser("export-features", help="penultimate features of both branches as CSV")
    _common(p, checkpoint=True)
    p.add_argument("--split", default="test", choices=("train", "test"))

    p = sub.add_parser("export-packed", help="write the packed inference model")
    _common(p, checkpoint=True)

    p = sub.add_parser("infer", help="packed inference on a dataset split")
    p.add_argument("--packed", required=True, help="model written by 'export-packed'")
    p.add_argument("--config", help="config naming the dataset")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default=None)
    p.add_argument("--split", default="test", choices=("train", "test"))

    p = sub.add_parser("fre-report", help="per-layer feature reconstruction error")
    _common(p, checkpoint=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--batch-size", type=int, default=128)
    return parser


def _out_dir(args):
    out = args.out or os.environ.get(OUT_ENV) or "runs"
    os.makedirs(out, exist_ok=True)
    return out


def _write_config(cfg, out):
    with open(os.path.join(out, "config.ini"), "w") as f:
        f.write(dump_config(cfg))


def _config(args):
    if getattr(args, "config", None):
        return read_config(args.config, args.overrides)
    return load_config(None, args.overrides)


def _dataset(cfg, split):
    limit = cfg.data.train_limit if split == "train" else cfg.data.test_limit
    ds = load_dataset(cfg.data.kind, split, cfg.data.path or None, limit)
    engine.check_compatible(cfg, ds)
    return ds


def _from_checkpoint(args):
    tr = engine.Trainer.load(args.checkpoint)
    if args.overrides:
        tr.cfg = load_config(dump_config(tr.cfg), args.overrides)
    return tr


def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(args)
    if args.resume:
        tr = engine.Trainer.load(args.resume)
        if dump_config(tr.cfg) != dump_config(cfg):
            raise ConfigError("--resume checkpoint was trained with a different config")
    else:
        tr = engine.Trainer(cfg)
    train_set, test_set = _dataset(cfg, "train"), _dataset(cfg, "test")
    tr.fit(train_set, test_set, out, progress=lambda row: print(
        "epoch {} lr {:.3g} ce {:.4f} rep {:.4g} acc_B {:.4f} acc_W {:.4f} fre {:.4g}".format(*row)))
    print(f"wrote {os.path.join(out, 'checkpoint.bnnf')}")


def cmd_eval(args):
    tr = _from_checkpoint(args)
    _write_config(tr.cfg, _out_dir(args))
    acc = engine.evaluate(tr.model, _dataset(tr.cfg, args.split), args.mode, tr.cfg.eval_batch_size)
    print(f"{args.mode} accuracy {acc:.4f}")


def cmd_recalibrate(args):
    tr = _from_checkpoint(args)
    out = _out_dir(args)
    _write_config(tr.cfg, out)
    engine.recalibrate_bn(tr.model, _dataset(tr.cfg, "train"), args.batches, args.batch_size)
    path = os.path.join(out, "recalibrated.bnnf")
    tr.save(path)
    print(f"wrote {path}")


def cmd_sweep(args):
    cfg = _config(args)
    out = _out_dir(args)
    _write_config(cfg, out)
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--lambdas must be comma-separated numbers, got {args.lambdas!r}") from None
    rows = engine.sweep_lambda(cfg, lambdas, _dataset(cfg, "train"), _dataset(cfg, "test"), out)
    path = os.path.join(out, "sweep.csv")
    with open(path, "w") as f:
        f.write("lambda,acc_B,acc_W,ce,rep\n")
        for r in rows:
            f.write(f"{r['lambda']:g},{r['acc_B']:.9g},{r['acc_W']:.9g},{r['ce']:.9g},{r['rep']:.9g}\n")
    for r in rows:
        print(f"lambda {r['lambda']:g}: acc_B {r['acc_B']:.4f} acc_W {r['acc_W']:.4f}")


def cmd_export_features(args):
    tr = _from_checkpoint(args)
    out = _out_dir(args)
    _write_config(tr.cfg, out)
    path = os.path.join(out, f"features_{args.split}.csv")
    engine.export_features(tr.model, _dataset(tr.cfg, args.split), path, tr.cfg.eval_batch_size)
    print(f"wrote {path}")


def cmd_export_packed(args):
    tr = _from_checkpoint(args)
    out = _out_dir(args)
    _write_config(tr.cfg, out)
    path = os.path.join(out, "model.bnnp")
    bitpack.export_packed(tr.model).save(path)
    print(f"wrote {path}")


def cmd_infer(args):
    pm = bitpack.PackedModel.load(args.packed)
    cfg = _config(args)
    out = _out_dir(args)
    _write_config(cfg, out)
    ds = _dataset(cfg, args.split)
    logits = np.concatenate([
        bitpack.infer(pm, ds.images[s : s + cfg.eval_batch_size]) for s in range(0, len(ds), cfg.eval_batch_size)
    ])
    pred = logits.argmax(axis=1)
    path = os.path.join(out, f"predictions_{args.split}.csv")
    np.savetxt(path, np.stack([ds.labels, pred], axis=1), fmt="%d", delimiter=",", header="label,prediction", comments="")
    print(f"packed accuracy {(pred == ds.labels).mean():.4f}; wrote {path}")


def cmd_fre_report(args):
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint {args.checkpoint} does not exist")
    tr = _from_checkpoint(args)
    out = _out_dir(args)
    _write_config(tr.cfg, out)
    rows = engine.fre_report(tr.model, _dataset(tr.cfg, args.split), args.batch_size)
    path = os.path.join(out, "fre_report.csv")
    engine.write_fre_csv(rows, path)
    for name, v in rows:
        print(f"{name:10s} {v:.6g}")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "recalibrate": cmd_recalibrate,
    "sweep-lambda": cmd_sweep,
    "export-features": cmd_export_features,
    "export-packed": cmd_export_packed,
    "infer": cmd_infer,
    "fre-report": cmd_fre_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"latentbnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"latentbnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"latentbnn: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, StateError, OSError) as exc:
        print(f"latentbnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
