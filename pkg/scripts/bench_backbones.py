"""Parameter tables and a paired single-sample timing of LEXNet against its standard-residual twin.

    python3 scripts/bench_backbones.py --repeats 5
"""
import argparse
import json

import numpy as np

from lexnet import bench, flowdata
from lexnet.backbone import lexnet_config, resnet_twin_config
from lexnet.model import build_model


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--repeats", type=int, default=3, help="independent paired benchmarks")
    p.add_argument("--rounds", type=int, default=9)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    recs, _ = flowdata.synth_generate(args.classes, 50, 0.1, args.seed)
    x = flowdata.encode_records(recs).x
    models = {}
    for name, cfg in (("lexnet", lexnet_config()), ("resnet_twin", resnet_twin_config())):
        m = build_model(args.classes, cfg, seed=args.seed)
        m.forward(x[:64], train=True)
        models[name] = m
        print(f"== {name}")
        print(bench.format_param_table(m.param_table()))
        print()

    ratios = []
    for r in range(args.repeats):
        out = bench.paired_backbone_bench(models["lexnet"], models["resnet_twin"], x, args.rounds, args.iters)
        ratios.append(out["ratio"])
        print(json.dumps({"repeat": r, **out}))
    print(f"ratio lexnet/twin: median {np.median(ratios):.3f}, range {min(ratios):.3f}-{max(ratios):.3f}")
    rep = bench.bench_inference(models["lexnet"], x, 50, 1000)
    print(json.dumps(rep.to_dict(), indent=2))


if __name__ == "__main__":
    main()
