"""Command-line entry points: gen-data, train, eval, analyze, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data or schema error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile

from . import core
from .config import ConfigError, RunConfig
from .data import DatasetError, load_dataset
from .encoders import Vocabulary
from .harness import analysis, training
from .harness.gradcheck import TOY_DIMS, model_grad_check
from .harness.synthetic import SpecError, SyntheticSpec, generate_synthetic
from .model import FGAModel, load_checkpoint, read_manifest, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("fgadialog")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def vocab_path_for(data_path: str) -> str:
    """Vocabulary file written next to a dataset: data.jsonl -> data.vocab.json."""
    root, _ = os.path.splitext(data_path)
    return root + ".vocab.json"


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json or text is None:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _atomic_write(path: str, write) -> None:
    """Write via a temporary file in the target directory so a failure leaves
    nothing behind."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_model(path: str):
    model = load_checkpoint(path)
    extra = read_manifest(path).get("extra", {})
    if "vocab" not in extra:
        raise DatasetError(f"{path}: checkpoint carries no vocabulary")
    return model, Vocabulary(extra["vocab"]), extra


def _load_data(path: str, vocab: Vocabulary, cfg: RunConfig):
    if not os.path.exists(path):
        raise DatasetError(f"{path}: no such data file")
    return load_dataset(path, vocab, cfg)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec.load(args.spec)
    ds = generate_synthetic(spec, args.seed)
    vpath = vocab_path_for(args.out)
    _atomic_write(args.out, ds.write)
    _atomic_write(vpath, ds.vocab.save)
    _emit(args, {"records": len(ds), "out": args.out, "vocab": vpath},
          f"wrote {len(ds)} records to {args.out} (vocabulary {vpath})")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume is not None:
        raise UsageError("--resume is not supported: training always starts from the seeded "
                         "initialization; rerun with the same seed to reproduce a run")
    try:
        cfg = RunConfig.load(args.config)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.config}: invalid JSON ({e})") from None
    overrides = {k: v for k, v in (("seed", args.seed), ("epochs", args.epochs),
                                   ("lr", args.lr), ("batch_size", args.batch_size))
                 if v is not None}
    cfg = cfg.replace(**overrides)
    vocab = Vocabulary.load(args.vocab or vocab_path_for(args.train))
    if len(vocab) != cfg.vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} tokens but vocab_size is {cfg.vocab_size}")
    train_set = _load_data(args.train, vocab, cfg)
    val_set = _load_data(args.val, vocab, cfg)
    model = FGAModel(cfg)
    on_epoch = None if args.json else (lambda e: print(json.dumps(e), file=sys.stderr))
    res = training.train(model, train_set, val_set, cfg, on_epoch=on_epoch)
    extra = {"vocab": vocab.tokens, "best_epoch": res.best_epoch, "best_val_mrr": res.best_mrr}
    save_checkpoint(res.model, args.out, extra)
    log_path = os.path.splitext(args.out)[0] + ".log.json"
    with open(log_path, "w") as fh:
        json.dump({"config_hash": cfg.hash(), "best_epoch": res.best_epoch,
                   "best_val_mrr": res.best_mrr, "epochs": res.log}, fh, indent=2)
    _emit(args, {"checkpoint": args.out, "log": log_path, "best_epoch": res.best_epoch,
                 "best_val_mrr": res.best_mrr, "parameters": model.parameter_count()},
          f"best epoch {res.best_epoch} (val MRR {res.best_mrr}); wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    paths = [p for p in args.model.split(",") if p]
    if not paths:
        raise UsageError("--model needs at least one checkpoint")
    loaded = [_load_model(p) for p in paths]
    models = [m for m, _, _ in loaded]
    vocab = loaded[0][1]
    records = _load_data(args.data, vocab, models[0].cfg)
    rep = training.evaluate(models if len(models) > 1 else models[0], records,
                            with_ndcg=args.ndcg)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(rep.to_csv())
    print(rep.to_json())
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, vocab, extra = _load_model(args.model)
    records = _load_data(args.data, vocab, model.cfg)
    if args.what == "importance":
        table = analysis.importance_scores(model, records, absolute=args.absolute or None)
        if args.csv:
            with open(args.csv, "w") as fh:
                fh.write(table.to_csv())
        print(table.to_json())
    elif args.what == "attention":
        if args.record is None:
            raise UsageError("analyze attention needs --record ID")
        match = [r for r in records if r.record_id == args.record]
        if not match:
            raise DatasetError(f"record {args.record!r} not found in {args.data}")
        beliefs = analysis.attention_map(model, match[0])
        print(json.dumps({"record_id": args.record, "beliefs": beliefs}, indent=2))
    else:
        if args.threshold is None or args.out is None:
            raise UsageError("analyze prune needs --threshold and --out")
        table = analysis.importance_scores(model, records)
        pruned = analysis.prune_interactions(model, table, args.threshold)
        save_checkpoint(pruned, args.out, extra)
        _emit(args, {"checkpoint": args.out, "pruned": [list(p) for p in sorted(pruned.fga.pruned)]},
              f"pruned {len(pruned.fga.pruned)} directions; wrote {args.out}")
    return EXIT_OK


def _corrupt(p: core.Parameter) -> None:
    # negative control for the checker itself
    if p.name == "fusion.out.W":
        p.grad = p.grad * 1.01 + 1e-3


def cmd_gradcheck(args) -> int:
    res = model_grad_check(args.dims, args.seed,
                           corrupt=_corrupt if args.corrupt_gradient else None,
                           max_per_param=None if args.all_coordinates else args.per_param)
    d = res.to_dict()
    _emit(args, d, f"max relative error {res.max_rel_error:.3e} over {res.coordinates} "
                   f"coordinates ({'pass' if res.passed else 'FAIL'}; worst {d['worst']})")
    return EXIT_OK if res.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="print machine-readable JSON")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fgadialog", description="Factor graph attention for visual dialog.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--train", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--vocab", help="vocabulary JSON (default: next to --train)")
    t.add_argument("--resume", help="not supported; reported as an error")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate one checkpoint or an ensemble")
    e.add_argument("--model", required=True, help="checkpoint, or comma-separated list")
    e.add_argument("--data", required=True)
    e.add_argument("--ndcg", action="store_true")
    e.add_argument("--csv", help="also write the report as CSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", parents=[common], help="importance, attention or pruning")
    a.add_argument("what", choices=["importance", "attention", "prune"])
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--record")
    a.add_argument("--threshold", type=float)
    a.add_argument("--out")
    a.add_argument("--absolute", action="store_true", help="mean absolute cue terms")
    a.add_argument("--csv")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--dims", default="tiny", choices=sorted(TOY_DIMS))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--per-param", type=int, default=8, help="coordinates checked per tensor")
    c.add_argument("--all-coordinates", action="store_true")
    c.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help, or a usage error already reported by argparse
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"fgadialog: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (training.DivergenceError, core.NonFiniteError) as e:
        print(f"fgadialog: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, SpecError, ConfigError, ValueError, OSError) as e:
        print(f"fgadialog: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
