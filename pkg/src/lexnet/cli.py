"""Command-line interface: ``lexnet <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, explain, flowdata, io
from .backbone import lexnet_config, resnet_twin_config
from .flowdata import FlowParseError
from .model import build_model
from .trainer import ProjectionError, TrainConfig, evaluate, train

log = logging.getLogger("lexnet")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- data helpers


def _flow_file(data_dir: Path, stem: str) -> Path | None:
    for suffix in (".csv", ".jsonl"):
        p = data_dir / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def load_split(data_dir, split_seed: int = 0, test_fraction: float = 0.5) -> flowdata.DatasetSplit:
    """train/test files when present, otherwise a stratified split of ``flows.*``."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise CliError(f"data directory not found: {data_dir}")
    tr, te = _flow_file(data_dir, "train"), _flow_file(data_dir, "test")
    if tr and te:
        train_recs, test_recs = flowdata.parse_flows(tr), flowdata.parse_flows(te)
        labels = flowdata.LabelMap.from_records(train_recs)
        unseen = {r.label for r in test_recs} - set(labels.names)
        if unseen:
            raise CliError(f"test labels missing from training data: {', '.join(sorted(unseen))}")
        return flowdata.DatasetSplit(train_recs, test_recs, labels)
    flows = _flow_file(data_dir, "flows")
    if flows is None:
        raise CliError(f"{data_dir} holds neither flows.csv/.jsonl nor train+test files")
    records = flowdata.parse_flows(flows)
    if not records:
        raise CliError(f"{flows} contains no flows")
    return flowdata.stratified_split(records, test_fraction, split_seed)


def _model_split(model, data_dir, which: str) -> flowdata.Dataset:
    meta = model.meta.get("split", {})
    split = load_split(data_dir, meta.get("seed", 0), meta.get("test_fraction", 0.5))
    names = model.label_names
    recs = {"train": split.train, "test": split.test, "all": split.train + split.test}[which]
    unknown = {r.label for r in recs} - set(names)
    if unknown:
        raise CliError(f"labels unknown to the model: {', '.join(sorted(unknown))}")
    return flowdata.encode_records(recs, flowdata.LabelMap(list(names)))


def _load(path):
    try:
        return io.load_model(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc


def _emit(obj, out: str | None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = flowdata.imbalanced_counts(args.classes, args.flows, args.imbalance) if args.imbalance != 1 \
        else args.flows
    records, sigs = flowdata.synth_generate(args.classes, counts, args.noise, args.seed)
    ext = "jsonl" if args.format == "jsonl" else "csv"
    flowdata.write_flows(records, out / f"flows.{ext}")
    flowdata.write_signatures(sigs, out / "signatures.jsonl")
    print(f"wrote {len(records)} flows and {len(sigs)} signatures to {out}")


def _train_config(path: str | None, seed: int | None) -> tuple[TrainConfig, dict]:
    raw = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {p} is not valid JSON: {exc}") from exc
    model_opts = raw.pop("model", {})
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad training config: {exc}") from exc
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg, model_opts


def cmd_train(args):
    cfg, model_opts = _train_config(args.config, args.seed)
    split = load_split(args.data, args.split_seed, args.test_fraction)
    tr, te = split.encoded()
    kind = model_opts.get("backbone", "lexnet")
    widths = tuple(model_opts.get("widths", (16, 16, 32, 32)))
    if kind == "lexnet":
        config = lexnet_config(widths)
    elif kind == "resnet_twin":
        config = resnet_twin_config(widths)
    else:
        raise CliError(f"unknown backbone {kind!r} (lexnet or resnet_twin)")
    model = build_model(len(split.labels), config, seed=cfg.seed, label_names=split.labels.names,
                        proto_cap=cfg.proto_cap_per_class)
    model.meta = {"split": {"seed": args.split_seed, "test_fraction": args.test_fraction}}
    model, report = train(model, tr, cfg, te)
    checksum = io.save_model(model, args.out)
    if args.report:
        Path(args.report).write_text(report.to_jsonl(), encoding="utf-8")
    final = report.final
    print(f"test accuracy {final['accuracy']:.4f}; prototypes/class {final['protos_per_class_mean']:.2f} "
          f"(min {final['protos_per_class_min']}, max {final['protos_per_class_max']})")
    print(f"model written to {args.out} (sha256 {checksum})")


def cmd_eval(args):
    model = _load(args.model)
    data = _model_split(model, args.data, args.split)
    metrics = evaluate(model, data)
    if args.json:
        _emit(metrics, None)
        return
    print(f"samples   {len(data)}")
    print(f"accuracy  {metrics['accuracy']:.4f}")
    print(f"prototypes/class  mean {metrics['protos_per_class_mean']:.2f}  "
          f"min {metrics['protos_per_class_min']}  max {metrics['protos_per_class_max']}")
    counts = model.prototypes.counts(model.n_classes)
    print(f"{'class':<16}{'support':>8}{'accuracy':>10}{'protos':>8}")
    support = np.bincount(data.y, minlength=model.n_classes)
    for k, name in enumerate(model.label_names):
        acc = metrics["per_class_accuracy"][k]
        acc_s = f"{acc:.4f}" if acc is not None else "-"
        print(f"{name:<16}{support[k]:>8}{acc_s:>10}{counts[k]:>8}")


def cmd_classify(args):
    model = _load(args.model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        records = flowdata.parse_flows(args.flows)
    lines = []
    if records:
        x = np.stack([flowdata.encode_flow(r) for r in records])
        proba = model.predict_proba(x)
        for r, p in zip(records, proba):
            k = int(np.argmax(p))
            lines.append(json.dumps({"flow_id": r.flow_id, "label": model.label_names[k],
                                     "confidence": float(p[k])}))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _find_flow(args):
    if args.flows:
        records = flowdata.parse_flows(args.flows)
    elif args.data:
        split = load_split(args.data)
        records = split.train + split.test
    else:
        raise CliError("give --flows FILE or --data DIR to look the flow up")
    for r in records:
        if r.flow_id == args.flow:
            return r
    raise CliError(f"flow {args.flow!r} not found")


def cmd_explain(args):
    model = _load(args.model)
    rec = _find_flow(args)
    x = flowdata.encode_flow(rec)
    stem = f"{rec.flow_id}_{args.method}"
    if args.method == "bydesign":
        try:
            item = explain.explain_prediction(model, x, rec.flow_id)
        except explain.ExplanationError as exc:
            raise CliError(str(exc)) from exc
        print(json.dumps(item.to_dict(), indent=2))
    elif args.method == "gradcam":
        item = explain.grad_cam(model, x)
        item.sample_id = rec.flow_id
    else:
        item = explain.shapley_mc(model, x, n_permutations=args.permutations, seed=args.seed)
        item.sample_id = rec.flow_id
    svg, sidecar = explain.render_explanation(item, x, args.out, stem, k=args.top)
    print(f"wrote {svg} and {sidecar}")


def cmd_faithfulness(args):
    model = _load(args.model)
    data = _model_split(model, args.data, args.split)
    rep = explain.faithfulness_eval(model, data, args.method, seed=args.seed, n_permutations=args.permutations,
                                    max_samples=args.max_samples)
    _emit(rep.to_dict(), args.out)


def cmd_bench(args):
    model = _load(args.model)
    data = _model_split(model, args.data, "test")
    rep = bench.bench_inference(model, data.x, args.warmup, args.iters, args.batch)
    _emit(rep.to_dict(), args.out)


def cmd_params(args):
    if args.model:
        model = _load(args.model)
    else:
        model = build_model(args.classes, lexnet_config(), seed=0)
        if args.prototypes < args.classes:
            raise CliError("--prototypes must be at least --classes (one prototype per class)")
        extra = args.prototypes - args.classes
        for j in range(extra):  # spread the extra prototypes round-robin over the classes
            model.prototypes.add(j % args.classes, np.zeros(model.prototypes.depth, np.float32))
            model.last.add_column(j % args.classes)
    print(bench.format_param_table(model.param_table()))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lexnet", description="Explainable prototype CNN for encrypted-traffic flows")
    p.add_argument("--seed", type=int, default=None, help="seed for every random choice (default 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a planted-signature corpus")
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--flows", type=int, required=True, help="mean flows per class")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--imbalance", type=float, default=1.0, help="largest/smallest class ratio")
    s.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="JSON training config")
    s.add_argument("--out", required=True, help="model file to write")
    s.add_argument("--report", help="JSONL training report")
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--test-fraction", type=float, default=0.5)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics on a data split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("classify", help="label + confidence per flow")
    s.add_argument("--model", required=True)
    s.add_argument("--flows", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("explain", help="explain one flow")
    s.add_argument("--model", required=True)
    s.add_argument("--flow", required=True, help="flow id")
    s.add_argument("--flows", help="flow file holding the flow")
    s.add_argument("--data", help="data directory holding the flow")
    s.add_argument("--method", choices=("bydesign", "gradcam", "shapley"), default="bydesign")
    s.add_argument("--permutations", type=int, default=64)
    s.add_argument("--top", type=int, default=10, help="highlighted cells for post hoc maps")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("faithfulness", help="top-protos / top-10 region accuracy")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=("bydesign", "gradcam", "shapley", "random"), required=True)
    s.add_argument("--split", choices=("train", "test", "all"), default="train")
    s.add_argument("--permutations", type=int, default=32)
    s.add_argument("--max-samples", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_faithfulness)

    s = sub.add_parser("bench", help="single-sample CPU inference timing")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--warmup", type=int, default=50)
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("params", help="cumulative parameter table")
    s.add_argument("--model")
    s.add_argument("--classes", type=int, default=200)
    s.add_argument("--prototypes", type=int, default=340)
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    explicit_seed = args.seed
    if args.seed is None:
        args.seed = 0
    if args.command == "train":
        args.seed = explicit_seed  # None keeps the config file's seed
    try:
        args.func(args)
    except CliError as exc:
        print(f"lexnet {args.command}: {exc}", file=sys.stderr)
        return 1
    except FlowParseError as exc:
        print(f"lexnet {args.command}: flow file error: {exc}", file=sys.stderr)
        return 1
    except io.ModelFileError as exc:
        print(f"lexnet {args.command}: model file error: {exc}", file=sys.stderr)
        return 1
    except ProjectionError as exc:
        print(f"lexnet {args.command}: projection failed: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"lexnet {args.command}: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"lexnet {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
