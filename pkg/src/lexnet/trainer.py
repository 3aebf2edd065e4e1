"""Staged training: SGD of backbone+prototypes, projection, prototype growth, head refit."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .flowdata import Dataset
from .lproto import Provenance, cell_location, lproto_forward
from .model import LexNetModel

log = logging.getLogger(__name__)


class ProjectionError(ValueError):
    pass


@dataclass
class TrainConfig:
    n_epochs_outer: int = 10
    n_sgd: int = 20
    n_last: int = 5
    warmup_epochs: int = 5
    lr_backbone: float = 0.05
    lr_proto: float = 0.05
    lr_last: float = 0.05
    proto_l2: float = 1e-3
    batch_size: int = 64
    proto_cap_per_class: int = 5
    growth_quantile: float = 0.25
    momentum: float = 0.0
    cluster_coef: float = 0.0
    separation_coef: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_epochs_outer", "n_sgd", "batch_size", "proto_cap_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("n_last", "warmup_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.growth_quantile < 1:
            raise ValueError("growth_quantile must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class TrainReport:
    iterations: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"record": "iteration", **it}, sort_keys=True) for it in self.iterations]
        lines.append(json.dumps({"record": "final", **self.final}, sort_keys=True))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- helpers


def compute_latents(model: LexNetModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode channels-last latent maps (N, H, W, D), computed in fixed batches."""
    if len(x) == 0:
        return np.zeros((0,) + tuple(model.config.input_shape[1:]) + (model.config.out_channels,),
                        dtype=model.dtype)
    return np.concatenate([model.latent(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:  # batch norm needs >= 2 samples
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _distance_terms(model: LexNetModel, fwd, labels, cfg: TrainConfig):
    """Optional cluster / separation costs on pooled distances; (value, d/d(d2))."""
    if not (cfg.cluster_coef or cfg.separation_coef):
        return 0.0, None
    d2 = fwd.proto_cache[1].astype(np.float64)
    b = d2.shape[0]
    own = np.array(model.prototypes.class_ids)[None, :] == np.asarray(labels)[:, None]
    grad = np.zeros_like(d2)
    value = 0.0
    rows = np.arange(b)
    if cfg.cluster_coef:
        masked = np.where(own, d2, np.inf)
        j = np.argmin(masked, axis=1)
        value += cfg.cluster_coef * masked[rows, j].mean()
        grad[rows, j] += cfg.cluster_coef / b
    if cfg.separation_coef and (~own).any():
        masked = np.where(~own, d2, np.inf)
        j = np.argmin(masked, axis=1)
        ok = np.isfinite(masked[rows, j])
        value -= cfg.separation_coef * masked[rows[ok], j[ok]].mean()
        grad[rows[ok], j[ok]] -= cfg.separation_coef / b
    return value, grad


def _velocity_step(params, lrs, decay, cfg: TrainConfig, velocity: dict):
    if not cfg.momentum:
        nn.sgd_step(params, lrs, decay)
        return
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        g = g + 2.0 * decay.get(p.group, 0.0) * p.data
        v = velocity.get(id(p))
        v = g if v is None or v.shape != g.shape else cfg.momentum * v + g
        velocity[id(p)] = v
        p.data -= (lrs[p.group] * v).astype(p.data.dtype)
        p.grad = None


# ---------------------------------------------------------------- stages


def stage1_epoch(model: LexNetModel, data: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                 lr_scale: float = 1.0, velocity: dict | None = None) -> float:
    """One SGD epoch over backbone and prototypes; the head stays fixed."""
    if len(data) == 0:
        raise ValueError("empty training set")
    velocity = {} if velocity is None else velocity
    params = model.params_in("backbone", "prototype")
    lrs = {"backbone": cfg.lr_backbone * lr_scale, "prototype": cfg.lr_proto}
    decay = {"prototype": cfg.proto_l2}
    total, seen = 0.0, 0
    for idx in _batches(len(data), cfg.batch_size, rng):
        loss, _, fwd, dlogits = model.loss(data.x[idx], data.y[idx], cfg.proto_l2, train=True)
        extra, dd2 = _distance_terms(model, fwd, data.y[idx], cfg)
        model.backward(fwd, dlogits, groups=("backbone", "prototype"), extra_dd2=dd2)
        _velocity_step(params, lrs, decay, cfg, velocity)
        total += (loss + extra) * len(idx)
        seen += len(idx)
    model.projected = False
    return total / seen


def project_prototypes(model: LexNetModel, data: Dataset, latents: np.ndarray | None = None) -> list[dict]:
    """Move every prototype onto its nearest same-class latent training patch.

    Ties resolve to the earliest (sample, row-major cell).
    """
    latents = compute_latents(model, data.x) if latents is None else latents
    n, h, w, d = latents.shape
    flat = latents.reshape(n, h * w, d)
    protos = model.prototypes
    entries = []
    for j in range(len(protos)):
        k = protos.class_ids[j]
        members = np.flatnonzero(data.y == k)
        if len(members) == 0:
            name = model.label_names[k] if k < len(model.label_names) else str(k)
            raise ProjectionError(f"class {name!r} has no training samples to project onto")
        cand = flat[members].astype(np.float64)  # (n_k, cells, D)
        d2 = ((cand - protos.vectors[j].astype(np.float64)) ** 2).sum(axis=2)
        best = int(np.argmin(d2))  # row-major over (sample, cell)
        s, cell = divmod(best, h * w)
        sample = int(members[s])
        before = float(d2.flat[best])
        protos.param.data[j] = flat[sample, cell]
        loc = cell_location(cell, w)
        protos.provenance[j] = Provenance(sample, loc, data.ids[sample])
        entries.append({"prototype": protos.ids[j], "class": k, "sample": sample, "location": list(loc),
                        "distance_before": before})
    model.projected = True
    return entries


def min_class_distances(model: LexNetModel, data: Dataset, latents: np.ndarray | None = None):
    """Per-sample min squared distance to own-class prototypes, and where it occurs.

    Returns ``(dists, proto_rows, cells)``, each of length N.
    """
    latents = compute_latents(model, data.x) if latents is None else latents
    n, h, w, d = latents.shape
    flat = latents.reshape(n, h * w, d).astype(np.float64)
    protos = model.prototypes
    dists = np.full(n, np.inf)
    rows = np.zeros(n, dtype=int)
    cells = np.zeros(n, dtype=int)
    for j in range(len(protos)):
        members = np.flatnonzero(data.y == protos.class_ids[j])
        if len(members) == 0:
            continue
        d2 = ((flat[members] - protos.vectors[j].astype(np.float64)) ** 2).sum(axis=2)
        c = np.argmin(d2, axis=1)
        v = d2[np.arange(len(members)), c]
        better = v < dists[members]
        dists[members[better]] = v[better]
        rows[members[better]] = j
        cells[members[better]] = c[better]
    return dists, rows, cells


def compute_avg_dists(model: LexNetModel, data: Dataset, latents: np.ndarray | None = None,
                      per_sample: np.ndarray | None = None) -> np.ndarray:
    if per_sample is None:
        per_sample = min_class_distances(model, data, latents)[0]
    out = np.zeros(model.n_classes)
    for k in range(model.n_classes):
        members = data.y == k
        if not members.any():
            raise ValueError(f"class {k} has no samples")
        out[k] = per_sample[members].mean()
    return out


def excess_kurtosis(values) -> float:
    """Bias-corrected Fisher excess kurtosis (0 for a normal distribution)."""
    x = np.asarray(values, dtype=np.float64)
    n = len(x)
    if n < 4:
        raise ValueError("kurtosis needs at least 4 values")
    x = x - x[0]  # shift first: equal values then centre to exact zeros
    c = x - x.mean()
    m2 = np.mean(c ** 2)
    if m2 == 0:
        return 0.0
    g2 = np.mean(c ** 4) / m2 ** 2 - 3.0
    return float(((n + 1) * g2 + 6) * (n - 1) / ((n - 2) * (n - 3)))


def grow_prototypes(model: LexNetModel, avg_dists: np.ndarray, cfg: TrainConfig,
                    data: Dataset | None = None, coverage=None, latents: np.ndarray | None = None) -> dict:
    """Add one prototype to each worst-covered class when avg distances are fat-tailed.

    The grown classes are those with ``avg_dist`` strictly above the
    ``1 - growth_quantile`` quantile; when ties leave none above it, the
    classes at the maximum grow.  A new prototype copies the latent patch
    where the class's worst-covered sample is closest to its prototypes (or a
    Uniform[0, 1] draw when no data is supplied).
    """
    avg = np.asarray(avg_dists, dtype=np.float64)
    out = {"kurtosis": None, "grown": [], "threshold": None}
    if len(avg) < 4:
        return out
    kurt = excess_kurtosis(avg)
    out["kurtosis"] = kurt
    if not kurt > 0:
        return out
    thr = float(np.quantile(avg, 1.0 - cfg.growth_quantile))
    out["threshold"] = thr
    protos = model.prototypes
    counts = protos.counts(model.n_classes)
    if data is not None and coverage is None:
        latents = compute_latents(model, data.x) if latents is None else latents
        coverage = min_class_distances(model, data, latents)
    rng = np.random.default_rng(cfg.seed + 7919 * (len(protos) + 1))
    chosen = np.flatnonzero(avg > thr)
    if chosen.size == 0:  # e.g. 199 equal values and one outlier: the quantile sits on the tie
        chosen = np.flatnonzero(avg == avg.max())
    for k in chosen:
        k = int(k)
        if counts[k] >= cfg.proto_cap_per_class:
            continue
        if data is not None:
            dists, _, cells = coverage
            members = np.flatnonzero(data.y == k)
            worst = int(members[np.argmax(dists[members])])
            h, w = latents.shape[1:3]
            cell = int(cells[worst])
            vec = latents[worst].reshape(h * w, -1)[cell]
            prov = Provenance(worst, cell_location(cell, w), data.ids[worst])
        else:
            vec = rng.uniform(0.0, 1.0, size=protos.depth)
            prov = None
        new_id = protos.add(k, vec, prov)
        model.last.add_column(k)
        counts[k] += 1
        out["grown"].append({"class": k, "prototype": new_id})
    return out


def class_scores(model: LexNetModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    latents = compute_latents(model, x, batch_size)
    return lproto_forward(latents, model.prototypes.vectors)[0]


def stage3_epoch(model: LexNetModel, scores: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                 rng: np.random.Generator) -> float:
    """One SGD epoch on the head over precomputed similarity scores."""
    if len(labels) == 0:
        raise ValueError("empty training set")
    w = model.last.param
    total = 0.0
    for idx in _batches(len(labels), cfg.batch_size, rng):
        logits = scores[idx] @ w.data.T
        loss, dlogits = nn.softmax_cross_entropy(logits, labels[idx])
        w.accumulate((dlogits.T @ scores[idx]).astype(w.data.dtype))
        nn.sgd_step([w], cfg.lr_last)
        total += loss * len(idx)
    return total / len(labels)


# ---------------------------------------------------------------- evaluation


def evaluate(model: LexNetModel, data: Dataset, predictions: np.ndarray | None = None) -> dict:
    if len(data) == 0:
        raise ValueError("empty dataset")
    pred = model.predict(data.x) if predictions is None else np.asarray(predictions)
    k = model.n_classes
    conf = np.zeros((k, k), dtype=int)
    np.add.at(conf, (data.y, pred), 1)
    support = conf.sum(axis=1)
    per_class = [float(conf[i, i] / support[i]) if support[i] else None for i in range(k)]
    counts = model.prototypes.counts(k)
    return {
        "accuracy": float(np.trace(conf) / len(data)),
        "per_class_accuracy": per_class,
        "confusion": conf.tolist(),
        "protos_per_class_mean": float(np.mean(counts)),
        "protos_per_class_min": int(min(counts)),
        "protos_per_class_max": int(max(counts)),
    }


# ---------------------------------------------------------------- outer loop


def train(model: LexNetModel, train_data: Dataset, cfg: TrainConfig, test_data: Dataset | None = None,
          on_projection: Callable | None = None) -> tuple[LexNetModel, TrainReport]:
    """Repeat [stage 1 x n_sgd -> projection -> growth -> stage 3 x n_last]."""
    if len(train_data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    model.prototypes.cap = cfg.proto_cap_per_class
    model.train_config = asdict(cfg)
    report = TrainReport()
    velocity: dict = {}
    t = 0
    for it in range(cfg.n_epochs_outer):
        s1 = []
        for _ in range(cfg.n_sgd):
            scale = min(1.0, (t + 1) / cfg.warmup_epochs) if cfg.warmup_epochs else 1.0
            s1.append(stage1_epoch(model, train_data, cfg, rng, scale, velocity))
            t += 1

        latents = compute_latents(model, train_data.x)
        projection = project_prototypes(model, train_data, latents)
        latents = compute_latents(model, train_data.x)
        if on_projection is not None:
            on_projection(model, train_data, projection)
        coverage = min_class_distances(model, train_data, latents)
        avg = compute_avg_dists(model, train_data, per_sample=coverage[0])
        growth = grow_prototypes(model, avg, cfg, train_data, coverage, latents)

        scores = lproto_forward(latents, model.prototypes.vectors)[0]
        s3 = [stage3_epoch(model, scores, train_data.y, cfg, rng) for _ in range(cfg.n_last)]

        record = {
            "iteration": it,
            "stage1_loss": [float(v) for v in s1],
            "stage3_loss": [float(v) for v in s3],
            "train_accuracy": evaluate(model, train_data)["accuracy"],
            "prototypes_per_class": model.prototypes.counts(model.n_classes),
            "avg_dists": [float(v) for v in avg],
            "kurtosis": growth["kurtosis"],
            "grown_classes": [g["class"] for g in growth["grown"]],
        }
        if test_data is not None and len(test_data):
            record["test_accuracy"] = evaluate(model, test_data)["accuracy"]
        log.info("iteration %d: loss %.4f train acc %.3f protos %d", it, s1[-1], record["train_accuracy"],
                 len(model.prototypes))
        report.iterations.append(record)

    final_data = test_data if test_data is not None and len(test_data) else train_data
    metrics = evaluate(model, final_data)
    report.final = {k: metrics[k] for k in ("accuracy", "per_class_accuracy", "protos_per_class_mean",
                                            "protos_per_class_min", "protos_per_class_max")}
    report.final["evaluated_on"] = "test" if final_data is test_data else "train"
    return model, report
