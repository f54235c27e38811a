"""Command-line entry point: ``champfl {run,agg-test,mia-appendix,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report
from .aggregation import AggregatorConfig, aggregate
from .attack import ProxMetric
from .bsci import LeakageConfig, BsciConfig, appendix_a_experiment
from .data import BackdoorSpec, idx_image_shape
from .errors import ConfigError, InputError, NumericError
from .nn import ModelSpec
from .sim import ExperimentConfig, cifar_profile, desk_profile, fmnist_profile

PROFILES = {"desk": desk_profile, "fmnist": fmnist_profile, "cifar": cifar_profile}


def parse_model(text: str, input_shape) -> ModelSpec:
    """``logistic`` | ``mlp[:h1,h2,...]`` | ``fmnist_cnn[:width]`` | ``cifar_alexnet[:width]``."""
    arch, _, arg = text.partition(":")
    if arch == "mlp":
        hidden = tuple(int(h) for h in arg.split(",") if h) if arg else (64,)
        return ModelSpec("mlp", input_shape, hidden=hidden)
    if arg:
        if arch == "logistic":
            raise ConfigError("logistic takes no parameter")
        return ModelSpec(arch, input_shape, width=float(arg))
    return ModelSpec(arch, input_shape)


def _shape(text: str) -> tuple[int, int, int]:
    try:
        c, h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CxHxW, got {text!r}") from None
    return (c, h, w)


def _deep_update(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _deep_update(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def build_config(args) -> ExperimentConfig:
    """Profile defaults, then the JSON config file, then individual flags."""
    cfg = PROFILES[args.profile]()
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc.msg}") from None
        cfg = ExperimentConfig.from_dict(_deep_update(cfg.to_dict(), doc.get("config", doc)))

    top = {}
    for flag, key in (
        ("clients", "n_clients"), ("rounds", "rounds"), ("local_epochs", "local_epochs"), ("lr", "lr"),
        ("batch", "batch"), ("seed", "seed"), ("eval_every", "eval_every"), ("train_size", "train_size"),
        ("test_dataset", "test_dataset"),
    ):  # fmt: skip
        if getattr(args, flag) is not None:
            top[key] = getattr(args, flag)
    if args.dataset is not None:
        top["dataset"] = args.dataset
    cfg = replace(cfg, **top)

    input_shape = cfg.model.input_shape
    if args.input_shape is not None:
        input_shape = args.input_shape
    elif args.dataset is not None and args.dataset.startswith("idx:"):
        img = args.dataset[4:].split(",")[0]
        if not Path(img).exists():
            raise InputError(f"dataset file not found: {img}")
        input_shape = idx_image_shape(img)
    if args.model is not None:
        cfg = replace(cfg, model=parse_model(args.model, input_shape))
    elif input_shape != cfg.model.input_shape:
        cfg = replace(cfg, model=replace(cfg.model, input_shape=input_shape))

    atk = cfg.attack
    bd = atk.backdoor
    bd_over = {}
    if args.source is not None:
        bd_over["source_class"] = args.source
    if args.target is not None:
        bd_over["target_class"] = args.target
    if args.trigger_size is not None:
        bd_over["size"] = args.trigger_size
    if args.untargeted:
        bd_over["mode"] = "untargeted"
    if bd_over:
        bd = replace(bd, **bd_over)
    metric = atk.metric
    if args.prox is not None:
        metric = ProxMetric.parse(args.prox, weight=metric.weight)
    if args.prox_weight is not None:
        metric = replace(metric, weight=args.prox_weight)
    atk_over = {"backdoor": bd, "metric": metric}
    if args.attack is not None:
        atk_over["kind"] = args.attack
    if args.alpha_mode is not None:
        atk_over["mode"] = args.alpha_mode
    if args.window is not None:
        atk_over["window"] = args.window
    if args.poison_fraction is not None:
        atk_over["poison_fraction"] = args.poison_fraction
    if args.malicious is not None:
        atk_over["malicious_ids"] = tuple(int(i) for i in args.malicious.split(",") if i)
    cfg = replace(cfg, attack=replace(atk, **atk_over))

    if args.defense is not None:
        cfg = replace(cfg, defense=AggregatorConfig.parse(args.defense))
    if args.bsci is not None:
        cfg = replace(cfg, bsci=BsciConfig.parse(args.bsci))
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = build_config(args)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    out = report.resolve_out_dir(cfg, args.out)
    records, summary = report.run_to_dir(cfg, out)
    print(f"wrote {out} (digest {summary.digest})")
    print(f"final benign_acc={report.fmt(summary.benign_acc_final)} asr={report.fmt(summary.asr_final)} asr_mid={report.fmt(summary.asr_mid)}")
    return 0


def _load_vectors(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise InputError(f"file not found: {path}")
    if p.suffix == ".npy":
        return np.atleast_2d(np.load(p).astype(np.float64))
    rows = []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(v) for v in line.replace(",", " ").split()])
        except ValueError:
            raise InputError(f"{path}:{lineno}: not a list of numbers") from None
    if not rows:
        raise InputError(f"{path}: no vectors")
    if len({len(r) for r in rows}) != 1:
        raise InputError(f"{path}: vectors have different lengths")
    return np.array(rows)


def cmd_agg_test(args) -> int:
    cfg = AggregatorConfig.parse(args.defense)
    updates = _load_vectors(args.updates)
    cfg.validate(len(updates))
    prev = _load_vectors(args.prev)[0] if args.prev else None
    outcome = aggregate(cfg, updates, prev_global=prev)
    doc = {
        "rule": cfg.rule,
        "params": outcome.params.tolist(),
        "selected": list(outcome.selected) if outcome.selected is not None else None,
        "scores": outcome.scores.tolist() if outcome.scores is not None else None,
        "iterations": outcome.iterations,
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_mia_appendix(args) -> int:
    results = {}
    for seed in args.seeds:
        cfg = LeakageConfig(seed=seed, epochs=args.epochs, shadows=args.shadows, relabel=args.relabel)
        res = appendix_a_experiment(cfg)
        results[str(seed)] = {k: v.to_dict() for k, v in res.items()}
        print(f"seed {seed}: clean AUC={report.fmt(res['clean'].auc)} backdoored AUC={report.fmt(res['backdoored'].auc)}")
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_report(args) -> int:
    tables, summaries = [], []
    for item in args.inputs:
        path = Path(item)
        jsonl = path / "rounds.jsonl" if path.is_dir() else path
        if not jsonl.exists():
            raise InputError(f"no rounds file at {jsonl}")
        records = report.read_round_jsonl(jsonl)
        cfg_path = jsonl.parent / "config.json"
        cfg = report.read_config(cfg_path) if cfg_path.exists() else None
        summary = report.summarize(records, cfg)
        summaries.append(summary)
        tables.append(report.rounds_table_text(records, summary))
    text = "".join(tables)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.summary:
        report.write_summary_csv(summaries, args.summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="champfl", description="Federated backdoor simulator with robust aggregation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and write its result directory")
    run.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    run.add_argument("--config", help="JSON config (as written to config.json); flags override it")
    run.add_argument("--dataset", help="idx:<images>,<labels> or synthetic:<classes>x<per_class>")
    run.add_argument("--test-dataset", help="separate test set, same syntax as --dataset")
    run.add_argument("--train-size", type=int)
    run.add_argument("--input-shape", type=_shape, help="CxHxW (read from IDX headers when omitted)")
    run.add_argument("--model", help="logistic | mlp[:h1,h2] | fmnist_cnn[:width] | cifar_alexnet[:width]")
    run.add_argument("--clients", type=int)
    run.add_argument("--malicious", help="comma-separated malicious client ids")
    run.add_argument("--rounds", type=int)
    run.add_argument("--local-epochs", type=int)
    run.add_argument("--lr", type=float)
    run.add_argument("--batch", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--eval-every", type=int)
    run.add_argument("--defense", help="rule[:k=v,...], e.g. multi_krum:m=3,f=1")
    run.add_argument("--attack", choices=("none", "vanilla", "champ"))
    run.add_argument("--prox", help="l2 | cos | huber[:delta]")
    run.add_argument("--prox-weight", type=float)
    run.add_argument("--alpha-mode", choices=("bsci", "asr"))
    run.add_argument("--window", type=int, help="history window k for alpha")
    run.add_argument("--bsci", help="R=6,p=0.3;0.2;0.1;0;0;0,epochs=5,init=initial,degree=3,C=1,tol=0.001")
    run.add_argument("--source", type=int, help="source class")
    run.add_argument("--target", type=int, help="target class")
    run.add_argument("--trigger-size", type=int)
    run.add_argument("--untargeted", action="store_true")
    run.add_argument("--poison-fraction", type=float)
    run.add_argument("--out", help=f"output directory (default ${report.OUT_ENV}/<digest> or runs/<digest>)")
    run.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    run.set_defaults(func=cmd_run)

    agg = sub.add_parser("agg-test", help="aggregate a file of vectors once")
    agg.add_argument("updates", help="text file (one vector per line) or .npy (N, K)")
    agg.add_argument("--defense", default="fedavg")
    agg.add_argument("--prev", help="previous global model (needed by align_ins, rlr, fools_gold)")
    agg.add_argument("--out")
    agg.set_defaults(func=cmd_agg_test)

    mia = sub.add_parser("mia-appendix", help="membership leakage of a triggered vs clean model")
    mia.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    mia.add_argument("--epochs", type=int, default=10)
    mia.add_argument("--shadows", type=int, default=2)
    mia.add_argument("--relabel", action="store_true", help="also relabel triggered samples to the target class")
    mia.add_argument("--out", help="write confusion matrices, ROC points and AUCs as JSON")
    mia.set_defaults(func=cmd_mia_appendix)

    rep = sub.add_parser("report", help="tabulate rounds.jsonl files (or run directories) as CSV")
    rep.add_argument("inputs", nargs="+")
    rep.add_argument("--out", help="per-round CSV (default stdout)")
    rep.add_argument("--summary", help="also write one summary row per run")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, NumericError, OSError) as exc:
        print(f"champfl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
