"""Explanations: prototype evidence per prediction, post hoc baselines and faithfulness scoring."""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .flowdata import Dataset, Signature
from .lproto import cell_location, lproto_backward
from .model import LexNetModel

VARIABLES = ("size", "direction")
METHODS = ("bydesign", "gradcam", "shapley", "random")


class ExplanationError(RuntimeError):
    pass


@dataclass
class ExplanationEntry:
    prototype_id: int
    class_id: int
    score: float
    location: tuple[int, int]  # (packet index, variable)
    source: str

    def to_dict(self):
        return {"prototype_id": self.prototype_id, "class_id": self.class_id, "score": self.score,
                "location": list(self.location), "source": self.source}


@dataclass
class Explanation:
    sample_id: str
    predicted: int
    entries: list[ExplanationEntry]
    grid: np.ndarray  # (T, 2) input grid that was explained

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [e.location for e in self.entries]

    def payload(self) -> dict:
        return {"bars": {VARIABLES[v]: self.grid[:, v].tolist() for v in range(2)},
                "highlight": [list(c) for c in self.cells]}

    def to_dict(self):
        return {"sample_id": self.sample_id, "predicted": self.predicted,
                "entries": [e.to_dict() for e in self.entries]}


@dataclass
class AttributionMap:
    method: str
    values: np.ndarray  # (T, 2)
    target: int
    sample_id: str = ""
    stderr: np.ndarray | None = None
    degenerate: bool = False  # True when the map is identically zero


def _grid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise nn.DimensionError("explain one sample at a time")
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 1:
        raise nn.DimensionError(f"expected a (1, T, 2) sample, got {x.shape}")
    return x


# ---------------------------------------------------------------- by design


def explain_prediction(model: LexNetModel, x: np.ndarray, sample_id: str = "") -> Explanation:
    """Predicted class plus, for each of its prototypes, the score and where it fired."""
    x = _grid(x)
    protos = model.prototypes
    if any(p is None for p in protos.provenance):
        raise ExplanationError("model has prototypes without projection provenance; train it first")
    fwd = model.forward(x[None])
    pred = int(np.argmax(fwd.logits[0]))
    width = x.shape[2]
    entries = []
    for j in protos.of_class(pred):
        prov = protos.provenance[j]
        t, v = prov.location
        src = f"train sample {prov.sample_id}"
        if prov.flow_id:
            src += f" ({prov.flow_id})"
        src += f", packet {t + 1} {VARIABLES[v]}"
        entries.append(ExplanationEntry(protos.ids[j], pred, float(fwd.scores[0, j]),
                                        cell_location(fwd.cells[0, j], width), src))
    return Explanation(sample_id, pred, entries, x[0].copy())


def argmax_cells(model: LexNetModel, x: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class (N,) and flat argmax cell per prototype (N, m)."""
    preds, cells = [], []
    for i in range(0, len(x), batch_size):
        fwd = model.forward(x[i:i + batch_size])
        preds.append(np.argmax(fwd.logits, axis=1))
        cells.append(fwd.cells)
    return np.concatenate(preds), np.concatenate(cells)


def bydesign_map(model: LexNetModel, x: np.ndarray) -> AttributionMap:
    """The model's own evidence as a map: each predicted-class prototype's score at its argmax cell."""
    x = _grid(x)
    fwd = model.forward(x[None])
    pred = int(np.argmax(fwd.logits[0]))
    vals = np.zeros(x.shape[1] * x.shape[2])
    for j in model.prototypes.of_class(pred):
        c = fwd.cells[0, j]
        vals[c] = max(vals[c], float(fwd.scores[0, j]))
    return AttributionMap("bydesign", vals.reshape(x.shape[1:]), pred)


# ---------------------------------------------------------------- Grad-CAM


def grad_cam_from(features: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Grad-CAM on channels-last (H, W, C) maps; returns (relu(sum_c w_c A_c), w)."""
    if features.shape != grads.shape or features.ndim != 3:
        raise nn.DimensionError("features and gradients must both be (H, W, C)")
    weights = grads.astype(np.float64).mean(axis=(0, 1))
    cam = np.maximum(features.astype(np.float64) @ weights, 0.0)
    return cam, weights


def grad_cam(model: LexNetModel, x: np.ndarray, target: int | None = None) -> AttributionMap:
    x = _grid(x)
    fwd = model.forward(x[None])
    if target is None:
        target = int(np.argmax(fwd.logits[0]))
    dscores = model.last.weight[target][None].astype(np.float64)
    dlat, _ = lproto_backward(dscores, fwd.proto_cache)
    cam, _ = grad_cam_from(fwd.latent[0], dlat[0])
    degenerate = not np.any(cam)
    if degenerate:
        warnings.warn("Grad-CAM map is all zero for this sample", RuntimeWarning, stacklevel=2)
    return AttributionMap("gradcam", cam, target, degenerate=degenerate)


# ---------------------------------------------------------------- Shapley


def shapley_permutation(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, baseline: np.ndarray,
                        permutations: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Mean marginal contributions over the given feature orderings.

    ``f`` maps a (B, n) batch to (B,) outputs.  Returns the per-feature mean and
    its Monte-Carlo standard error (zero with a single permutation).  Each
    ordering telescopes, so the attributions always sum to f(x) - f(baseline).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    base = np.asarray(baseline, dtype=np.float64).ravel()
    n = x.size
    if base.size != n:
        raise nn.DimensionError("baseline and input differ in size")
    perms = np.asarray(permutations, dtype=int)
    if perms.ndim != 2 or perms.shape[1] != n or len(perms) < 1:
        raise ValueError("need at least one permutation of all features")
    contrib = np.zeros((len(perms), n))
    for r, order in enumerate(perms):
        path = np.repeat(base[None], n + 1, axis=0)
        for i, feat in enumerate(order):
            path[i + 1:, feat] = x[feat]
        out = np.asarray(f(path), dtype=np.float64)
        contrib[r, order] = np.diff(out)
    mean = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / np.sqrt(len(perms)) if len(perms) > 1 else np.zeros(n)
    return mean, se


def all_permutations(n: int) -> list[tuple[int, ...]]:
    return list(itertools.permutations(range(n)))


def shapley_mc(model: LexNetModel, x: np.ndarray, target: int | None = None, n_permutations: int = 32,
               baseline: np.ndarray | None = None, seed: int = 0) -> AttributionMap:
    """Monte-Carlo permutation Shapley values of the target logit over the 40 input cells."""
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    x = _grid(x)
    base = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=x.dtype).reshape(x.shape)
    if target is None:
        target = int(np.argmax(model.forward(x[None]).logits[0]))
    shape = x.shape

    def f(batch):
        return model.forward(batch.reshape((-1,) + shape).astype(model.dtype)).logits[:, target]

    rng = np.random.default_rng(seed)
    perms = [rng.permutation(x.size) for _ in range(n_permutations)]
    mean, se = shapley_permutation(f, x, base, perms)
    return AttributionMap("shapley", mean.reshape(shape[1:]), target, stderr=se.reshape(shape[1:]))


# ---------------------------------------------------------------- faithfulness


def top_regions(values: np.ndarray, k: int) -> list[tuple[int, int]]:
    """The k highest cells of a (T, V) map; ties go to the earlier row-major cell."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise nn.DimensionError("attribution map must be 2-D")
    if not 1 <= k <= values.size:
        raise ValueError(f"k must lie in [1, {values.size}]")
    order = np.argsort(-values.ravel(), kind="stable")[:k]
    width = values.shape[1]
    return [cell_location(i, width) for i in order]


@dataclass
class FaithfulnessReport:
    method: str
    top_protos_accuracy: float
    top_10_accuracy: float
    top_protos_hit_rate: float
    top_10_hit_rate: float
    n_samples: int
    single_proto_samples: int = 0
    single_proto_top_10_accuracy: float | None = None
    per_sample: list[dict] = field(default_factory=list, repr=False)

    def to_dict(self, with_samples: bool = False) -> dict:
        d = {k: getattr(self, k) for k in ("method", "top_protos_accuracy", "top_10_accuracy",
                                          "top_protos_hit_rate", "top_10_hit_rate", "n_samples",
                                          "single_proto_samples", "single_proto_top_10_accuracy")}
        if with_samples:
            d["per_sample"] = self.per_sample
        return d


def attribution(model: LexNetModel, x: np.ndarray, method: str, seed: int = 0,
                n_permutations: int = 32) -> AttributionMap:
    if method == "bydesign":
        return bydesign_map(model, x)
    if method == "gradcam":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return grad_cam(model, x)
    if method == "shapley":
        return shapley_mc(model, x, n_permutations=n_permutations, seed=seed)
    if method == "random":
        x = _grid(x)
        vals = np.random.default_rng(seed).random(x.shape[1:])
        return AttributionMap("random", vals, -1)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def faithfulness_eval(model: LexNetModel, data: Dataset, method: str, seed: int = 0,
                      n_permutations: int = 32, max_samples: int | None = None) -> FaithfulnessReport:
    """How often a method's top cells recover the model's own prototype regions.

    A sample scores under top-m when every argmax cell of the predicted class's
    prototypes is among the method's m best cells, with m the number of those
    prototypes (top-protos) or 10 (top-10).  The hit rates count recovered
    regions instead.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    n = len(data) if max_samples is None else min(len(data), max_samples)
    if n == 0:
        raise ValueError("empty dataset")
    preds, cells = argmax_cells(model, data.x[:n])
    width = data.x.shape[3]
    size = data.x.shape[2] * width
    protos = model.prototypes
    strict_m = strict_10 = hits_m = hits_10 = 0.0
    single, single_hits = 0, 0
    rows = []
    for i in range(n):
        own = protos.of_class(int(preds[i]))
        truth = {cell_location(cells[i, j], width) for j in own}
        m = min(len(own), size)
        sub_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        amap = attribution(model, data.x[i], method, sub_seed, n_permutations)
        ranked = top_regions(amap.values, max(m, min(10, size)))
        top_m, top_10 = set(ranked[:m]), set(ranked[:min(10, size)])
        ok_m, ok_10 = truth <= top_m, truth <= top_10
        strict_m += ok_m
        strict_10 += ok_10
        hits_m += len(truth & top_m) / len(truth)
        hits_10 += len(truth & top_10) / len(truth)
        if len(own) == 1:
            single += 1
            single_hits += ok_10
        rows.append({"sample": data.ids[i], "predicted": int(preds[i]), "truth": sorted(truth),
                     "top_protos": bool(ok_m), "top_10": bool(ok_10)})
    return FaithfulnessReport(method, strict_m / n, strict_10 / n, hits_m / n, hits_10 / n, n, single,
                              single_hits / single if single else None, rows)


# ---------------------------------------------------------------- signature recovery


def signature_recovery(model: LexNetModel, data: Dataset, signatures: Sequence[Signature],
                       threshold: float = 0.5) -> dict:
    """Per class, the best rate at which one of its prototypes fires on a planted cell.

    Rates are measured on that class's own samples; a class counts as
    recovered when its best rate reaches ``threshold``.
    """
    by_label = {s.label: s for s in signatures}
    _, cells = argmax_cells(model, data.x)
    width = data.x.shape[3]
    per_class = {}
    for k, name in enumerate(model.label_names):
        members = np.flatnonzero(data.y == k)
        sig = by_label.get(name)
        if sig is None or len(members) == 0:
            continue
        planted = {t * width + v for t, v in sig.cells()}
        best = 0.0
        for j in model.prototypes.of_class(k):
            rate = float(np.mean([c in planted for c in cells[members, j]]))
            best = max(best, rate)
        per_class[name] = best
    recovered = [name for name, r in per_class.items() if r >= threshold]
    return {"per_class": per_class, "recovered": recovered,
            "fraction": len(recovered) / len(per_class) if per_class else 0.0}


# ---------------------------------------------------------------- rendering


def render_explanation(item: Explanation | AttributionMap, x: np.ndarray, out_dir, stem: str = "explanation",
                       k: int = 10) -> tuple[Path, Path]:
    """Two bar charts (size, direction) over packet positions with highlighted cells.

    Writes ``<stem>.svg`` and a one-line ``<stem>.jsonl`` sidecar listing the
    highlighted (position, variable) cells.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    grid = _grid(x)[0]
    if isinstance(item, Explanation):
        method, sample_id = "bydesign", item.sample_id
        cells = item.cells
        scores = [e.score for e in item.entries]
    else:
        method, sample_id = item.method, item.sample_id
        vals = np.asarray(item.values)
        cells = [c for c in top_regions(vals, min(k, vals.size)) if vals[c] > 0]
        scores = [float(vals[c]) for c in cells]
        if not cells:
            warnings.warn("attribution map has no positive cells; nothing highlighted", RuntimeWarning,
                          stacklevel=2)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = np.arange(1, grid.shape[0] + 1)
    fig, axes = plt.subplots(2, 1, figsize=(7, 4), sharex=True)
    for v, ax in enumerate(axes):
        ax.bar(t, grid[:, v], color="0.6")
        ax.set_ylabel(VARIABLES[v])
        lo, hi = (0.0, 1.0) if v == 0 else (-1.0, 1.0)
        ax.set_ylim(lo - 0.05, hi + 0.05)
        for (ct, cv) in cells:
            if cv == v:
                ax.add_patch(Rectangle((ct + 0.5, lo - 0.05), 1.0, hi - lo + 0.1, fill=False,
                                       edgecolor="tab:blue", linewidth=2))
    axes[-1].set_xlabel("packet")
    axes[0].set_title(f"{method}: sample {sample_id}" if sample_id else method)
    fig.tight_layout()
    svg = out_dir / f"{stem}.svg"
    fig.savefig(svg, format="svg", metadata={"Date": None})
    plt.close(fig)
    sidecar = out_dir / f"{stem}.jsonl"
    record = {"sample_id": sample_id, "method": method, "cells": [list(c) for c in cells], "scores": scores}
    sidecar.write_text(json.dumps(record) + "\n", encoding="utf-8")
    return svg, sidecar
