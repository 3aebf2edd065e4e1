"""The full network: backbone -> prototype layer -> linear head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .backbone import Backbone, BackboneConfig, lexnet_config
from .lproto import LastLayer, PrototypeSet, classify, lproto_backward, lproto_forward


@dataclass
class Forward:
    logits: np.ndarray
    scores: np.ndarray
    cells: np.ndarray  # (B, m) flat argmax cell per prototype
    latent: np.ndarray
    backbone_cache: list | None = None
    proto_cache: tuple | None = None


class LexNetModel:
    def __init__(self, backbone: Backbone, prototypes: PrototypeSet, last: LastLayer, n_classes: int,
                 label_names: list[str] | None = None):
        self.backbone = backbone
        self.prototypes = prototypes
        self.last = last
        self.n_classes = n_classes
        self.label_names = label_names or [str(k) for k in range(n_classes)]
        self.projected = False
        self.train_config: dict = {}
        self.meta: dict = {}

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    @property
    def dtype(self):
        return self.backbone.dtype

    @property
    def params(self) -> list[nn.Parameter]:
        return self.backbone.params + [self.prototypes.param, self.last.param]

    def params_in(self, *groups: str) -> list[nn.Parameter]:
        return [p for p in self.params if p.group in groups]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    # ------------------------------------------------------------ forward / backward

    def forward(self, x: np.ndarray, train: bool = False) -> Forward:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        latent, bcache = self.backbone.forward(x, train)
        scores, cells, pcache = lproto_forward(latent, self.prototypes.vectors)
        logits, _ = classify(scores, self.last.weight)
        nn.check_finite(logits, "logits")
        return Forward(logits, scores, cells, latent, bcache if train else None, pcache)

    def backward(self, fwd: Forward, dlogits: np.ndarray, groups=("backbone", "prototype", "last_layer"),
                 extra_dd2: np.ndarray | None = None):
        """Accumulate gradients of the parameters in ``groups``; returns d(input)."""
        if "last_layer" in groups:
            self.last.param.accumulate((dlogits.T @ fwd.scores).astype(self.dtype))
        if not {"backbone", "prototype"} & set(groups):
            return None
        dscores = dlogits @ self.last.weight
        dlat, dvec = lproto_backward(dscores, fwd.proto_cache, extra_dd2)
        if "prototype" in groups:
            self.prototypes.param.accumulate(dvec.astype(self.dtype))
        if "backbone" in groups:
            return self.backbone.backward(dlat.astype(self.dtype), fwd.backbone_cache)
        return None

    def loss(self, x, labels, proto_l2: float = 0.0, train: bool = True):
        fwd = self.forward(x, train)
        ce, dlogits = nn.softmax_cross_entropy(fwd.logits, labels)
        reg = proto_l2 * float(np.sum(self.prototypes.vectors.astype(np.float64) ** 2))
        return ce + reg, ce, fwd, dlogits

    def latent(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        return self.backbone.forward(x, False)[0]

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        out = [np.argmax(self.forward(x[i:i + batch_size]).logits, axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        out = [nn.softmax(self.forward(x[i:i + batch_size]).logits) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    # ------------------------------------------------------------ accounting

    def param_table(self) -> list[dict]:
        """Layer-by-layer cumulative parameter counts in the reference table layout."""
        c, h, w = self.config.input_shape
        rows = []
        prev = c
        for op, out_ch, cum in self.backbone.cumulative_params():
            rows.append({"input": f"{prev}x{h}x{w}", "operator": op, "stride": "1", "out": out_ch, "cum": cum})
            prev = out_ch
        m = len(self.prototypes)
        cum = rows[-1]["cum"] + self.prototypes.param_count()
        rows.append({"input": f"{prev}x{h}x{w}", "operator": "LProto Layer", "stride": "-", "out": m, "cum": cum})
        rows.append({"input": f"{m}x{h}x{w}", "operator": "Max Pooling", "stride": "-", "out": m, "cum": cum})
        cum += self.last.weight.size
        rows.append({"input": f"{m}x1x1", "operator": "FC", "stride": "-", "out": self.n_classes, "cum": cum})
        return rows

    def count_params(self) -> int:
        return sum(p.size for p in self.params)


def build_model(n_classes: int, config: BackboneConfig | None = None, seed: int = 0,
                prototypes_per_class: int | list[int] = 1, label_names=None, proto_cap: int | None = None,
                dtype=np.float32) -> LexNetModel:
    """Freshly initialized network: Kaiming-uniform backbone, Uniform[0,1] prototypes, +1/-0.5 head."""
    config = config or lexnet_config()
    rng = np.random.default_rng(seed)
    backbone = Backbone(config, rng, dtype)
    counts = [prototypes_per_class] * n_classes if isinstance(prototypes_per_class, int) else list(prototypes_per_class)
    if len(counts) != n_classes or min(counts) < 1:
        raise ValueError("every class needs at least one prototype")
    class_ids = [k for k, n in enumerate(counts) for _ in range(n)]
    vectors = rng.uniform(0.0, 1.0, size=(len(class_ids), config.out_channels)).astype(dtype)
    protos = PrototypeSet(vectors, class_ids, cap=proto_cap)
    last = LastLayer.initial(n_classes, class_ids, dtype)
    return LexNetModel(backbone, protos, last, n_classes, label_names)


def convert_dtype(model: LexNetModel, dtype) -> LexNetModel:
    """Cast every parameter and BN statistic in place (used for float64 gradient checks)."""
    model.backbone.dtype = dtype
    for p in model.params:
        p.data = p.data.astype(dtype)
        p.grad = None
    for bn in model.backbone.bn_layers:
        bn.state.mean = bn.state.mean.astype(dtype)
        bn.state.var = bn.state.var.astype(dtype)
    return model
