"""Command-line pipelines: gen-data, train-model, explain, evaluate, render.

Flag resolution order is command line > config file (plain key=value lines,
keys named like the long flags) > PAIRMASK_SEED (seed only) > built-in
default. Every run echoes its fully resolved configuration as JSON into the
output directory. Diagnostics go to stderr; exit codes are 0 on success,
1 on contract errors, 2 on numeric errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen, figures, metrics, models, render
from .errors import ContractError, NumericError, ParseError
from .explainers import (AttributionReport, ExplainerConfig, METHODS,
                         explain_dataset, load_reports, save_reports)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# flag declaration with config-file merging
# ---------------------------------------------------------------------------


class _Command:
    def __init__(self, subparsers, name: str, help_text: str):
        self.name = name
        self.parser = subparsers.add_parser(name, help=help_text)
        self.parser.add_argument("--config", default=None,
                                 help="key=value file presetting any flag")
        self.spec: dict[str, tuple] = {}

    def add(self, flag: str, *, type=str, default=None, required: bool = False,
            choices=None, help: str = ""):
        dest = flag.lstrip("-").replace("-", "_")
        self.parser.add_argument(flag, dest=dest, type=type, default=None,
                                 choices=choices, help=help)
        self.spec[dest] = (type, default, required)
        return self

    def resolve(self, args: argparse.Namespace) -> dict:
        file_values = _read_config_file(args.config) if args.config else {}
        resolved = {}
        for dest, (typ, default, required) in self.spec.items():
            value = getattr(args, dest)
            if value is None and dest in file_values:
                raw = file_values[dest]
                value = (raw.lower() in ("1", "true", "yes")) if typ is _bool else typ(raw)
            if value is None and dest == "seed":
                env = os.environ.get("PAIRMASK_SEED")
                if env is not None:
                    value = int(env)
            if value is None:
                if required:
                    raise ContractError(f"{self.name}: missing required flag --{dest.replace('_', '-')}")
                value = default
            resolved[dest] = value
        return resolved


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _read_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ContractError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value in config file {path}", line=lineno)
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _echo_config(resolved: dict, subcommand: str, out_path: str) -> None:
    out = Path(out_path)
    directory = out if out.suffix == "" else out.parent
    directory.mkdir(parents=True, exist_ok=True)
    stem = subcommand if out.suffix == "" else out.stem
    doc = {"subcommand": subcommand, **{k: v for k, v in sorted(resolved.items())}}
    (directory / f"{stem}.config.json").write_text(
        json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _default_workers() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_data(opt: dict) -> int:
    preset = datagen.PRESETS[opt["preset"]]
    overrides = {k: opt[k] for k in ("n1", "n2", "n_train", "n_dev", "n_test",
                                     "noise", "vocab_size") if opt[k] is not None}
    cfg = preset(seed=opt["seed"])
    if overrides:
        cfg = datagen.PlantedTaskConfig(**{**cfg.__dict__, **overrides})
    out = Path(opt["out"])
    out.mkdir(parents=True, exist_ok=True)
    splits = datagen.generate_planted_dataset(cfg)
    for name, split in zip(("train", "dev", "test"), splits):
        datagen.save_dataset(split, out / f"{name}.jsonl")
    _echo_config(opt, "gen-data", opt["out"])
    _log(f"gen-data: wrote {[len(s) for s in splits]} examples to {out}")
    return 0


def _load_train_dev(data: str, dev: str | None):
    path = Path(data)
    if path.is_dir():
        return (datagen.load_dataset(path / "train.jsonl"),
                datagen.load_dataset(path / "dev.jsonl"))
    train = datagen.load_dataset(path)
    return train, (datagen.load_dataset(dev) if dev else [])


def _cmd_train_model(opt: dict) -> int:
    train, dev = _load_train_dev(opt["data"], opt["dev"])
    all_examples = train + dev
    vocab = opt["vocab_size"] or max(max(ex.tokens1 + ex.tokens2) for ex in all_examples) + 1
    classes = opt["classes"] or max(ex.label for ex in all_examples) + 1
    cfg = models.TrainConfig(d=opt["d"], hidden=opt["hidden"], vocab_size=vocab,
                             n_classes=classes, lr=opt["lr"], batch_size=opt["batch_size"],
                             max_epochs=opt["max_epochs"],
                             target_dev_accuracy=opt["target_acc"])
    params = models.train_classifier(train, dev, opt["arch"], cfg, seed=opt["seed"])
    models.save_classifier(params, opt["out"])
    _echo_config(opt, "train-model", opt["out"])
    dev_acc = models.accuracy(params, opt["arch"], dev) if dev else float("nan")
    _log(f"train-model: {opt['arch']} dev accuracy {dev_acc:.3f} -> {opt['out']}")
    return 0


def _cmd_explain(opt: dict) -> int:
    params = models.load_classifier(opt["model"])
    examples = datagen.load_dataset(opt["data"])
    if opt["limit"] is not None:
        examples = examples[:opt["limit"]]
    cfg = ExplainerConfig(method=opt["method"], gamma1=opt["gamma1"], gamma2=opt["gamma2"],
                          tau=opt["tau"], samples=opt["samples"], max_epochs=opt["epochs"],
                          lr=opt["lr"], k=opt["k"], sparsity=opt["sparsity"],
                          seed=opt["seed"])
    reports = explain_dataset(params, examples, cfg, workers=opt["workers"])
    save_reports(reports, opt["out"])
    _echo_config(opt, "explain", opt["out"])
    _log(f"explain: {len(reports)} {opt['method']} reports -> {opt['out']}")
    return 0


def _validate_report_ids(reports, examples) -> None:
    for rep in reports:
        if not 0 <= rep.example_id < len(examples):
            raise ContractError(f"report references unknown example id {rep.example_id}")
        ex = examples[rep.example_id]
        if (rep.n1, rep.n2) != (len(ex.tokens1), len(ex.tokens2)):
            raise ContractError(
                f"report for example {rep.example_id} does not match the dataset "
                f"({rep.n1}+{rep.n2} vs {len(ex.tokens1)}+{len(ex.tokens2)} words)")


def _cmd_evaluate(opt: dict) -> int:
    params = models.load_classifier(opt["model"])
    examples = datagen.load_dataset(opt["data"])
    reports = load_reports(opt["reports"])
    _validate_report_ids(reports, examples)
    wanted = tuple(m.strip() for m in opt["metrics"].split(",") if m.strip())
    cfg = metrics.MetricConfig(removal_depth=opt["removal_depth"],
                               recovery_topk=opt["topk"])
    results = metrics.evaluate_reports(params, examples, reports, cfg,
                                       metrics=wanted, workers=opt["workers"])
    doc = {"config": {"removal_depth": cfg.removal_depth,
                      "v_grid": list(cfg.v_grid),
                      "rho_grid": list(cfg.rho_grid),
                      "recovery_topk": cfg.recovery_topk},
           "methods": {}}
    for method, ev in results.items():
        entry: dict = {"n_examples": ev.n_examples}
        if ev.aopc is not None:
            entry["aopc"] = ev.aopc
        if ev.posthoc is not None:
            entry["posthoc"] = {str(v): acc for v, acc in sorted(ev.posthoc.items())}
        if ev.curves is not None:
            entry["degradation"] = {"morf": ev.curves.morf.tolist(),
                                    "lerf": ev.curves.lerf.tolist(),
                                    "p_full": ev.curves.p_full,
                                    "p_empty": ev.curves.p_empty,
                                    "score": ev.degradation_score}
        if ev.recovery is not None:
            entry["recovery"] = ev.recovery
        doc["methods"][method] = entry
    out = Path(opt["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    if opt["figures"]:
        figures.aopc_figure(results, out.parent / f"{out.stem}_aopc.png")
        figures.posthoc_figure(results, out.parent / f"{out.stem}_posthoc.png")
        figures.degradation_figure(results, out.parent / f"{out.stem}_degradation.png")
    _echo_config(opt, "evaluate", opt["out"])
    _log(f"evaluate: {sorted(results)} -> {opt['out']}")
    return 0


def _cmd_render(opt: dict) -> int:
    examples = datagen.load_dataset(opt["data"])
    reports = load_reports(opt["reports"])
    _validate_report_ids(reports, examples)
    if opt["limit"] is not None:
        reports = reports[:opt["limit"]]
    text = render.render_document(reports, examples, fmt=opt["format"], top=opt["top"])
    if opt["out"] == "-":
        sys.stdout.write(text)
    else:
        out = Path(opt["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        _echo_config(opt, "render", opt["out"])
    _log(f"render: {len(reports)} examples ({opt['format']})")
    return 0


def _cmd_pipeline(opt: dict) -> int:
    out = Path(opt["out"])
    seed = opt["seed"]
    workers = opt["workers"]
    methods = tuple(m.strip() for m in opt["methods"].split(",") if m.strip())
    for m in methods:
        if m not in METHODS:
            raise ContractError(f"unknown method {m!r}; choose from {METHODS}")

    _cmd_gen_data({"preset": opt["preset"], "out": str(out / "data"), "seed": seed,
                   "n1": None, "n2": None, "n_train": None, "n_dev": None,
                   "n_test": None, "noise": None, "vocab_size": None})
    _cmd_train_model({"arch": opt["arch"], "data": str(out / "data"), "dev": None,
                      "out": str(out / "model.json"), "seed": seed, "d": 32,
                      "hidden": 64, "lr": 0.01, "batch_size": 64, "max_epochs": 200,
                      "target_acc": 0.95, "vocab_size": None, "classes": None})
    reports_dir = out / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    merged: list[AttributionReport] = []
    for method in methods:
        _cmd_explain({"model": str(out / "model.json"), "data": str(out / "data" / "test.jsonl"),
                      "method": method, "out": str(reports_dir / f"{method}.jsonl"),
                      "seed": seed, "gamma1": 10.0, "gamma2": 1.0, "tau": 0.5,
                      "samples": 32, "epochs": 100, "lr": 0.05, "k": 10,
                      "sparsity": 1.0, "limit": opt["explain_limit"], "workers": workers})
        merged.extend(load_reports(reports_dir / f"{method}.jsonl"))
    save_reports(merged, reports_dir / "all.jsonl")
    _cmd_evaluate({"model": str(out / "model.json"), "data": str(out / "data" / "test.jsonl"),
                   "reports": str(reports_dir / "all.jsonl"), "metrics": opt["metrics"],
                   "out": str(out / "metrics.json"), "removal_depth": 10, "topk": 2,
                   "workers": workers, "figures": opt["figures"]})
    render_method = "gmask" if "gmask" in methods else methods[0]
    _cmd_render({"data": str(out / "data" / "test.jsonl"),
                 "reports": str(reports_dir / f"{render_method}.jsonl"),
                 "out": str(out / "report.html"), "format": "html", "top": 4,
                 "limit": min(25, opt["explain_limit"] or 25)})
    _echo_config(opt, "pipeline", opt["out"])
    _log(f"pipeline: artifacts in {out}")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def _build_parser() -> tuple[_Parser, dict[str, _Command]]:
    parser = _Parser(prog="pairmask",
                     description="group-mask explanations for sentence-pair classifiers")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    commands: dict[str, _Command] = {}

    c = _Command(sub, "gen-data", "generate a planted-rationale dataset")
    c.add("--preset", choices=sorted(datagen.PRESETS), default="default")
    c.add("--out", required=True, help="output directory for the JSONL splits")
    c.add("--seed", type=int, default=0)
    c.add("--n1", type=int).add("--n2", type=int)
    c.add("--n-train", type=int).add("--n-dev", type=int).add("--n-test", type=int)
    c.add("--noise", type=float).add("--vocab-size", type=int)
    commands["gen-data"] = c

    c = _Command(sub, "train-model", "train a reference classifier")
    c.add("--arch", choices=list(models.ARCHITECTURES), required=True)
    c.add("--data", required=True, help="dataset directory or train JSONL file")
    c.add("--dev", help="dev JSONL when --data is a single file")
    c.add("--out", required=True, help="model checkpoint path (JSON)")
    c.add("--seed", type=int, default=0)
    c.add("--d", type=int, default=32).add("--hidden", type=int, default=64)
    c.add("--lr", type=float, default=0.01).add("--batch-size", type=int, default=64)
    c.add("--max-epochs", type=int, default=200)
    c.add("--target-acc", type=float, default=0.95)
    c.add("--vocab-size", type=int).add("--classes", type=int)
    commands["train-model"] = c

    c = _Command(sub, "explain", "attribute predictions on a dataset")
    c.add("--model", required=True).add("--data", required=True)
    c.add("--method", choices=list(METHODS), required=True)
    c.add("--out", required=True).add("--seed", type=int, default=0)
    c.add("--gamma1", type=float, default=10.0).add("--gamma2", type=float, default=1.0)
    c.add("--tau", type=float, default=0.5).add("--k", type=int, default=10)
    c.add("--samples", type=int, default=32).add("--epochs", type=int, default=100)
    c.add("--lr", type=float, default=0.05).add("--sparsity", type=float, default=1.0)
    c.add("--limit", type=int).add("--workers", type=int, default=_default_workers())
    commands["explain"] = c

    c = _Command(sub, "evaluate", "score reports with faithfulness metrics")
    c.add("--model", required=True).add("--data", required=True)
    c.add("--reports", required=True).add("--out", required=True)
    c.add("--metrics", default="aopc,posthoc,degradation,recovery")
    c.add("--removal-depth", type=int, default=10).add("--topk", type=int, default=2)
    c.add("--workers", type=int, default=_default_workers())
    c.add("--figures", type=_bool, default=True)
    commands["evaluate"] = c

    c = _Command(sub, "render", "render attribution heatmaps")
    c.add("--reports", required=True).add("--data", required=True)
    c.add("--out", required=True, help="output file, or - for stdout")
    c.add("--format", choices=["ansi", "html"], default="ansi")
    c.add("--top", type=int, default=4).add("--limit", type=int)
    commands["render"] = c

    c = _Command(sub, "pipeline", "generate, train, explain, evaluate, render")
    c.add("--out", required=True).add("--seed", type=int, default=0)
    c.add("--arch", choices=list(models.ARCHITECTURES), default="bow-pair")
    c.add("--preset", choices=sorted(datagen.PRESETS), default="default")
    c.add("--methods", default="gmask,imask,random,loo")
    c.add("--metrics", default="aopc,posthoc,degradation,recovery")
    c.add("--explain-limit", type=int, default=100)
    c.add("--workers", type=int, default=_default_workers())
    c.add("--figures", type=_bool, default=True)
    commands["pipeline"] = c
    return parser, commands


_RUNNERS = {
    "gen-data": _cmd_gen_data,
    "train-model": _cmd_train_model,
    "explain": _cmd_explain,
    "evaluate": _cmd_evaluate,
    "render": _cmd_render,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    parser, commands = _build_parser()
    try:
        args = parser.parse_args(argv)
        resolved = commands[args.subcommand].resolve(args)
        return _RUNNERS[args.subcommand](resolved)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
