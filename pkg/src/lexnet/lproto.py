"""Prototype layer operating directly on the backbone output.

Each prototype is a depth-D vector (a (1, 1) latent patch).  Squared L2
distances to every latent cell are turned into similarities with
``log((d2 + 1) / (d2 + eps))``, max-pooled to one score per prototype and fed
to a bias-free linear head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import DimensionError, Parameter

SIM_EPS = 1e-4


@dataclass
class Provenance:
    sample_id: int
    location: tuple[int, int]
    flow_id: str = ""

    def to_dict(self):
        return {"sample_id": self.sample_id, "location": list(self.location), "flow_id": self.flow_id}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["sample_id"]), tuple(d["location"]), d.get("flow_id", ""))


@dataclass
class Prototype:
    id: int
    class_id: int
    vector: np.ndarray
    provenance: Provenance | None = None


class PrototypeSet:
    """Prototype vectors as one (m, D) parameter plus per-row class and provenance."""

    def __init__(self, vectors: np.ndarray, class_ids, ids=None, provenance=None, cap: int | None = None):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or vectors.shape[0] != len(class_ids):
            raise DimensionError("one class id per prototype row required")
        self.param = Parameter(vectors, "prototype", "prototypes")
        self.class_ids = [int(c) for c in class_ids]
        self.ids = list(range(len(class_ids))) if ids is None else [int(i) for i in ids]
        self.provenance: list[Provenance | None] = list(provenance) if provenance else [None] * len(class_ids)
        self.cap = cap
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("prototype ids must be unique")

    @classmethod
    def initial(cls, n_classes: int, depth: int, rng: np.random.Generator, dtype=np.float32, cap=None):
        """One prototype per class drawn from Uniform([0, 1]^D)."""
        vectors = rng.uniform(0.0, 1.0, size=(n_classes, depth)).astype(dtype)
        return cls(vectors, list(range(n_classes)), cap=cap)

    @property
    def vectors(self) -> np.ndarray:
        return self.param.data

    @property
    def depth(self) -> int:
        return self.param.data.shape[1]

    def __len__(self) -> int:
        return len(self.class_ids)

    def of_class(self, k: int) -> list[int]:
        """Row indices of class ``k``'s prototypes."""
        return [j for j, c in enumerate(self.class_ids) if c == k]

    def counts(self, n_classes: int) -> list[int]:
        out = [0] * n_classes
        for c in self.class_ids:
            out[c] += 1
        return out

    def prototype(self, j: int) -> Prototype:
        return Prototype(self.ids[j], self.class_ids[j], self.vectors[j], self.provenance[j])

    def add(self, class_id: int, vector: np.ndarray, provenance: Provenance | None = None) -> int:
        if self.cap is not None and len(self.of_class(class_id)) >= self.cap:
            raise ValueError(f"class {class_id} already holds {self.cap} prototypes")
        new_id = max(self.ids) + 1 if self.ids else 0
        self.param.data = np.vstack([self.param.data, np.asarray(vector, dtype=self.param.data.dtype)[None]])
        self.param.grad = None
        self.class_ids.append(int(class_id))
        self.ids.append(new_id)
        self.provenance.append(provenance)
        return new_id

    def param_count(self) -> int:
        return param_count_lproto(len(self), self.depth)


def param_count_lproto(m: int, depth: int = 32) -> int:
    return m * depth


# ---------------------------------------------------------------- distances and similarity


def distance_map(latent: np.ndarray, prototype: np.ndarray) -> np.ndarray:
    """Squared L2 distance between a prototype and every latent patch.

    ``latent`` is (D, H, W).  A (D,) prototype gives an (H, W) map; a (D, ph, pw)
    prototype gives the (H-ph+1, W-pw+1) map of summed per-cell distances.
    """
    if latent.ndim != 3:
        raise DimensionError(f"latent must be (D, H, W), got {latent.shape}")
    p = np.asarray(prototype)
    if p.ndim == 1:
        p = p[:, None, None]
    if p.shape[0] != latent.shape[0]:
        raise DimensionError(f"prototype depth {p.shape[0]} != latent depth {latent.shape[0]}")
    _, ph, pw = p.shape
    _, h, w = latent.shape
    out = np.zeros((h - ph + 1, w - pw + 1), dtype=np.float64)
    for i in range(ph):
        for j in range(pw):
            window = latent[:, i:i + h - ph + 1, j:j + w - pw + 1].astype(np.float64)
            out += ((window - p[:, i, j, None, None]) ** 2).sum(axis=0)
    return out


def similarity(d2, eps: float = SIM_EPS):
    d2 = np.asarray(d2, dtype=np.float64)
    if np.any(d2 < 0):
        raise ValueError("squared distance must be non-negative")
    return np.log((d2 + 1.0) / (d2 + eps))


def similarity_map(dmap: np.ndarray, eps: float = SIM_EPS) -> np.ndarray:
    return similarity(dmap, eps)


# ---------------------------------------------------------------- batched layer


def nearest_cells(latent: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Index (row-major over H*W) of the closest latent cell per (sample, prototype).

    ``latent`` is channels-last (B, H, W, D).  Distances use the expanded form
    in float64; the prototype's own squared norm is constant across cells and
    is dropped.
    """
    b, h, w, d = latent.shape
    zf = latent.reshape(b, h * w, d).astype(np.float64)
    zz = np.einsum("bnd,bnd->bn", zf, zf)
    approx = zz[:, :, None] - 2.0 * (zf @ vectors.T.astype(np.float64))
    return np.argmin(approx, axis=1)  # (B, m), first occurrence on ties


def lproto_forward(latent: np.ndarray, vectors: np.ndarray, eps: float = SIM_EPS):
    """Scores (B, m) and argmax cells (B, m) of the similarity maps.

    The score of each prototype is evaluated exactly (direct differences) at
    its nearest cell, so a prototype equal to a latent patch scores
    ``log(1/eps)`` bit-for-bit.
    """
    if len(vectors) == 0:
        raise ValueError("empty prototype set")
    if latent.ndim != 4 or latent.shape[-1] != vectors.shape[1]:
        raise DimensionError(f"prototype depth {vectors.shape[1]} vs latent {latent.shape}")
    b, h, w, d = latent.shape
    idx = nearest_cells(latent, vectors)
    zf = latent.reshape(b, h * w, d)
    zstar = np.take_along_axis(zf, idx[:, :, None], axis=1)  # (B, m, D)
    diff = zstar - vectors[None]
    d2 = np.einsum("bmd,bmd->bm", diff, diff)
    scores = np.log((d2 + 1.0) / (d2 + eps))
    return scores, idx, (diff, d2, idx, latent.shape, eps)


def lproto_backward(dscores: np.ndarray, cache, extra_dd2: np.ndarray | None = None):
    """Gradients w.r.t. the latent map and the prototype vectors.

    ``extra_dd2`` is an additional gradient on the pooled squared distances
    (B, m), used by optional distance-based loss terms.
    """
    diff, d2, idx, lshape, eps = cache
    b, h, w, d = lshape
    dd2 = dscores * (1.0 / (d2 + 1.0) - 1.0 / (d2 + eps))
    if extra_dd2 is not None:
        dd2 = dd2 + extra_dd2
    dz = 2.0 * diff * dd2[..., None]  # (B, m, D)
    dvectors = -dz.sum(axis=0)
    dlat = np.zeros((b, h * w, d), dtype=diff.dtype)
    rows = np.repeat(np.arange(b), idx.shape[1])
    np.add.at(dlat, (rows, idx.ravel()), dz.reshape(-1, d))
    return dlat.reshape(lshape), dvectors


def cell_location(flat_idx: int, width: int = 2) -> tuple[int, int]:
    return int(flat_idx) // width, int(flat_idx) % width


# ---------------------------------------------------------------- head


class LastLayer:
    def __init__(self, weight: np.ndarray):
        self.param = Parameter(weight, "last_layer", "last_layer")

    @classmethod
    def initial(cls, n_classes: int, class_ids, dtype=np.float32) -> "LastLayer":
        w = np.full((n_classes, len(class_ids)), -0.5, dtype=dtype)
        for j, c in enumerate(class_ids):
            w[c, j] = 1.0
        return cls(w)

    @property
    def weight(self) -> np.ndarray:
        return self.param.data

    def add_column(self, class_id: int) -> None:
        k = self.weight.shape[0]
        col = np.full((k, 1), -0.5, dtype=self.weight.dtype)
        col[class_id, 0] = 1.0
        self.param.data = np.hstack([self.weight, col])
        self.param.grad = None


def classify(scores: np.ndarray, weight: np.ndarray):
    """Logits and predicted class (lowest id wins ties)."""
    logits, _ = nn.linear_forward(scores, weight)
    return logits, np.argmax(logits, axis=-1)
