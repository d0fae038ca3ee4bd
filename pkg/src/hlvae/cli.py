"""Command-line entry point: ``hlvae {train,impute,predict,synth,eval,split}``.

Every run writes ``run_config.json`` next to its outputs. Passing that
file back through ``--config`` repeats the run; explicit flags override
values from the file. Exit status is 0 on success, 1 for user errors
(bad input, schema or kernel problems) and 2 for numerical or internal
failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import HLVAEError, NonFiniteLoss
from .inference import TrainConfig, train
from .metrics import error_report, predictive_nll_report
from .model import HLVAE, ModelConfig
from .prediction import DEFAULT_SAMPLES, Imputation, impute, predict_future
from .schema import DatasetTable, Schema, load_csv, write_csv
from .splits import HeldOutCells, inject_mcar, split_longitudinal
from .synthetic import GeneratorConfig, generate_synthetic_longitudinal

log = logging.getLogger("hlvae")

OUTPUT_ENV = "HLVAE_OUTPUT_DIR"
CONFIG_NAME = "run_config.json"


class UsageError(Exception):
    """Bad command-line input; reported with exit status 1."""


# -- argument parsing -------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with option values (flags take precedence)")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or the current directory)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hlvae", description="Heterogeneous longitudinal VAE")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and write a checkpoint plus training history")
    _common(p)
    p.add_argument("--data", help="training CSV")
    p.add_argument("--schema", help="schema JSON")
    p.add_argument("--validation", help="validation CSV, scored every epoch")
    p.add_argument("--kernel", default=ModelConfig.kernel)
    p.add_argument("--latent", type=int, default=ModelConfig.latent_dim)
    p.add_argument("--hidden", type=int, default=ModelConfig.hidden)
    p.add_argument("--slot-width", type=int, default=ModelConfig.slot_width)
    p.add_argument("--inducing", type=int, default=ModelConfig.n_inducing)
    p.add_argument("--mask-input", action="store_true", default=False)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--kl", choices=("exact", "bound"), default=TrainConfig.kl)
    p.add_argument("--warmup", type=int, default=None, help="KL warm-up epochs")
    p.add_argument("--early-stopping", action="store_true", default=False)
    p.add_argument("--patience", type=int, default=TrainConfig.patience)
    p.add_argument("--all-gaussian", action="store_true", default=False,
                   help="model every feature with a Gaussian head (baseline)")

    for name, text in (("impute", "fill missing cells of a CSV"),
                       ("predict", "generate rows at new covariates")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--model", help="checkpoint JSON")
        p.add_argument("--data", help="query CSV in the model's schema")
        p.add_argument("--train-data", help="table the GP predictive conditions on")
        p.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
        p.add_argument("--target-schema", help="schema the outputs are scored against (baseline models)")
        if name == "impute":
            p.add_argument("--mode", choices=("auto", "amortized", "gp"), default="auto")
            p.add_argument("--truth", help="held-out cells CSV to score")

    p = sub.add_parser("synth", help="write a synthetic longitudinal dataset")
    _common(p)
    p.add_argument("--gen-config", help="generator config JSON")
    p.add_argument("--instances", type=int)
    p.add_argument("--visits", type=int)
    p.add_argument("--latent", type=int)
    p.add_argument("--missing", type=float, default=0.0, help="MCAR ratio of cells to hide")

    p = sub.add_parser("split", help="split a table by instance")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--fractions", type=float, nargs=3, default=[0.6, 0.2, 0.2])
    p.add_argument("--disclose", type=int, default=0, help="visits per held-out instance moved to train")

    p = sub.add_parser("eval", help="score filled cells against held-out truth")
    _common(p)
    p.add_argument("--pred", help="filled CSV")
    p.add_argument("--truth", help="held-out cells CSV")
    p.add_argument("--schema")
    p.add_argument("--model", help="checkpoint providing training value ranges")
    p.add_argument("--train-data", help="training CSV providing value ranges")
    p.add_argument("--nll", help="per-cell NLL CSV to summarize")
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            values = json.load(fh)
        if values.pop("command", args.command) != args.command:
            raise UsageError(f"{args.config} is a config for a different subcommand")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"{args.config}: unknown options {sorted(unknown)}")
        values.pop("config", None)
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _need(args, *names) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command}: missing required option(s) {flags}")


def _outdir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(args, out: Path) -> None:
    values = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    values["out"] = str(out)
    with open(out / CONFIG_NAME, "w", encoding="utf-8") as fh:
        json.dump(values, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- subcommands ---------------------------------------------------------------------

def cmd_train(args) -> None:
    _need(args, "data", "schema")
    from .plotting import plot_history

    schema = Schema.load(args.schema)
    table = load_csv(args.data, schema)
    validation = load_csv(args.validation, schema) if args.validation else None
    if args.all_gaussian:
        table = table.with_schema(schema.as_gaussian())
        validation = validation.with_schema(table.schema) if validation is not None else None
    mcfg = ModelConfig(latent_dim=args.latent, hidden=args.hidden, slot_width=args.slot_width,
                       kernel=args.kernel, n_inducing=args.inducing, mask_input=args.mask_input)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, kl=args.kl,
                       seed=args.seed, warmup_epochs=args.warmup, early_stopping=args.early_stopping,
                       patience=args.patience)
    out = _outdir(args)
    _snapshot(args, out)
    model = HLVAE.initialize(table, mcfg, seed=args.seed)
    try:
        model, history = train(table, model, tcfg, validation)
    except NonFiniteLoss as exc:
        if exc.model is not None:
            exc.model.save(out / "model_last_good.json")
        if exc.history is not None:
            exc.history.to_csv(out / "history.csv")
        raise
    model.save(out / "model.json")
    history.to_csv(out / "history.csv")
    if history.records:
        plot_history(history, out / "training.png")
    last = history.records[-1] if history.records else None
    if last is not None:
        print(f"trained {len(history.records)} epochs: elbo {last.elbo:.4f}, kl {last.kl:.4f}")
    print(f"wrote {out / 'model.json'}")


def _write_nll(result: Imputation, table: DatasetTable, path: Path) -> None:
    names = table.schema.feature_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# samples={result.samples}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "feature", "nll"])
        for i, d in zip(*np.nonzero(np.isfinite(result.nll))):
            w.writerow([int(table.row_ids[i]), names[d], repr(float(result.nll[i, d]))])


def read_nll(path) -> tuple[dict, list[tuple[int, str, float]]]:
    """Parse an NLL file: (metadata from the leading comment, cell records)."""
    meta, records = {}, []
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if first.startswith("#"):
            for item in first[1:].split():
                key, _, value = item.partition("=")
                meta[key] = value
        else:
            fh.seek(0)
        for rec in csv.DictReader(fh):
            records.append((int(rec["row_id"]), rec["feature"], float(rec["nll"])))
    return meta, records


def _query(args, model: HLVAE) -> tuple[DatasetTable, DatasetTable | None, Schema | None]:
    query = load_csv(args.data, model.schema)
    training = load_csv(args.train_data, model.schema) if args.train_data else None
    target = Schema.load(args.target_schema) if args.target_schema else None
    if target is not None and target.feature_names != model.schema.feature_names:
        raise UsageError("--target-schema must list the same features as the model")
    return query, training, target


def cmd_impute(args) -> None:
    _need(args, "model", "data")
    model = HLVAE.load(args.model)
    query, training, target = _query(args, model)
    truth = HeldOutCells.from_csv(args.truth, model.schema) if args.truth else None
    out = _outdir(args)
    _snapshot(args, out)
    result = impute(query, model, training, args.samples, args.seed, args.mode, truth, target)
    write_csv(result.filled, out / "imputed.csv")
    _write_nll(result, query, out / "nll.csv")
    print(f"imputed {int((~query.mask).sum())} cells; wrote {out / 'imputed.csv'}")


def cmd_predict(args) -> None:
    _need(args, "model", "data", "train_data")
    model = HLVAE.load(args.model)
    query, training, target = _query(args, model)
    out = _outdir(args)
    _snapshot(args, out)
    result = predict_future(query, model, training, args.samples, args.seed, target)
    write_csv(result.filled, out / "predicted.csv")
    _write_nll(result, query, out / "nll.csv")
    print(f"predicted {query.N} rows; wrote {out / 'predicted.csv'}")


def cmd_synth(args) -> None:
    cfg = GeneratorConfig.load(args.gen_config) if args.gen_config else GeneratorConfig()
    for flag, field_name in (("instances", "n_instances"), ("visits", "visits"), ("latent", "latent_dim")):
        if getattr(args, flag) is not None:
            setattr(cfg, field_name, getattr(args, flag))
    out = _outdir(args)
    _snapshot(args, out)
    data = generate_synthetic_longitudinal(cfg, args.seed)
    cfg.schema().save(out / "schema.json")
    with open(out / "generator_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")
    write_csv(data.table, out / "complete.csv")
    table = data.table
    if args.missing > 0:
        table, held = inject_mcar(table, args.missing, args.seed)
        held.to_csv(out / "heldout.csv", table.schema)
    write_csv(table, out / "data.csv")
    with open(out / "latents.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id"] + [f"z{l}" for l in range(data.latents.shape[1])])
        for rid, z in zip(table.row_ids, data.latents):
            w.writerow([int(rid)] + [repr(float(v)) for v in z])
    print(f"wrote {table.N} rows to {out / 'data.csv'}")


def cmd_split(args) -> None:
    _need(args, "data", "schema")
    schema = Schema.load(args.schema)
    table = load_csv(args.data, schema)
    parts = split_longitudinal(table, tuple(args.fractions), args.seed, args.disclose)
    out = _outdir(args)
    _snapshot(args, out)
    for name, part in parts.items():
        write_csv(part, out / f"{name}.csv")
        print(f"{name}: {part.N} rows, {len(part.instances)} instances")


def cmd_eval(args) -> None:
    from .plotting import plot_report

    _need(args, "pred", "truth")
    if args.model is None and (args.schema is None or args.train_data is None):
        raise UsageError("eval needs --model, or --schema with --train-data, for the training value ranges")
    if args.model:
        model = HLVAE.load(args.model)
        stats = model.stats
        schema = Schema.load(args.schema) if args.schema else model.schema
    else:
        from .schema import fit_normalization

        schema = Schema.load(args.schema)
        stats = fit_normalization(load_csv(args.train_data, schema))
    pred = load_csv(args.pred, schema)
    held = HeldOutCells.from_csv(args.truth, schema)
    rows, feats = held.positions(pred)
    if not pred.mask[rows, feats].all():
        raise UsageError(f"{args.pred} leaves some held-out cells empty")
    report = error_report(pred.Y[rows, feats], held.values, feats, schema, stats)
    if args.nll:
        _, records = read_nll(args.nll)
        lookup = {(r, f): v for r, f, v in records}
        names = schema.feature_names
        try:
            nll = np.array([lookup[(int(r), names[d])] for r, d in zip(held.rows, held.features)])
        except KeyError as exc:
            raise UsageError(f"{args.nll} has no NLL for held-out cell {exc.args[0]}") from None
        report.extend(predictive_nll_report(nll, held.features, schema))
    out = _outdir(args)
    _snapshot(args, out)
    report.to_csv(out / "metrics.csv")
    plot_report(report, out / "metrics.png")
    print(report.pretty())


COMMANDS = {
    "train": cmd_train,
    "impute": cmd_impute,
    "predict": cmd_predict,
    "synth": cmd_synth,
    "split": cmd_split,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"hlvae: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse: --help or a malformed command line
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"hlvae {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ArithmeticError as exc:
        print(f"hlvae {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (HLVAEError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"hlvae {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a bug on our side
        log.exception("internal failure")
        print(f"hlvae {args.command}: internal failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
