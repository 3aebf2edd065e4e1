"""Train on the planted-signature corpus and report accuracy, growth, recovery and faithfulness.

    python3 scripts/run_synthetic.py --out runs/synthetic
"""
import argparse
import json
import logging
import time
from pathlib import Path

from lexnet import explain, flowdata, io
from lexnet.model import build_model
from lexnet.trainer import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--flows", type=int, default=200, help="mean flows per class")
    p.add_argument("--imbalance", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--config", default=str(ROOT / "configs" / "synthetic_acceptance.json"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--faithfulness-samples", type=int, default=200)
    p.add_argument("--out", default="runs/synthetic")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = flowdata.imbalanced_counts(args.classes, args.flows, args.imbalance)
    recs, sigs = flowdata.synth_generate(args.classes, counts, args.noise, args.seed)
    split = flowdata.stratified_split(recs, 0.5, args.seed)
    tr, te = split.encoded()
    cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))

    model = build_model(args.classes, seed=cfg.seed, label_names=split.labels.names)
    t0 = time.perf_counter()
    model, report = train(model, tr, cfg, te)
    seconds = time.perf_counter() - t0
    io.save_model(model, out / "model.lex")
    (out / "train_report.jsonl").write_text(report.to_jsonl())

    summary = {
        "train_seconds": seconds,
        "test_accuracy": report.final["accuracy"],
        "prototypes_per_class": model.prototypes.counts(args.classes),
        "signature_recovery": explain.signature_recovery(model, te, sigs),
        "faithfulness": {},
    }
    for method in ("bydesign", "gradcam", "shapley", "random"):
        n = None if method in ("bydesign", "random") else args.faithfulness_samples
        if method == "shapley":
            n = max(1, args.faithfulness_samples // 5)
        summary["faithfulness"][method] = explain.faithfulness_eval(model, tr, method, max_samples=n).to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
