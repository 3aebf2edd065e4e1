"""Flow records, their 1x20x2 encoding, synthetic corpora and stratified splits.

File schema (CSV, UTF-8)::

    flow_id,label,sizes,dirs[,transport]
    f1,app1,44;1480;60,U;D;U

JSONL mirror: ``{"flow_id": ..., "label": ..., "sizes": [int], "dirs": ["U"|"D"]}``.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SEQ_LEN = 20
SIZE_SCALE = 1500
MAX_PACKET = 65535
UP, DOWN = "U", "D"


class FlowParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class FlowRecord:
    flow_id: str
    label: str
    sizes: list[int]
    dirs: list[str]
    transport: str | None = None

    def __post_init__(self):
        if not self.sizes:
            raise ValueError(f"flow {self.flow_id}: no packets")
        if len(self.sizes) != len(self.dirs):
            raise ValueError(f"flow {self.flow_id}: {len(self.sizes)} sizes but {len(self.dirs)} dirs")
        for s in self.sizes:
            if not 0 <= s <= MAX_PACKET:
                raise ValueError(f"flow {self.flow_id}: packet size {s} outside [0, {MAX_PACKET}]")
        for d in self.dirs:
            if d not in (UP, DOWN):
                raise ValueError(f"flow {self.flow_id}: unknown direction {d!r}")

    @property
    def packets(self) -> list[tuple[int, str]]:
        return list(zip(self.sizes, self.dirs))

    def to_json(self) -> dict:
        out = {"flow_id": self.flow_id, "label": self.label, "sizes": self.sizes, "dirs": self.dirs}
        if self.transport:
            out["transport"] = self.transport
        return out


@dataclass
class MtsSample:
    grid: np.ndarray  # (1, T, 2): size channel, direction channel
    label: int
    flow_id: str = ""


# ---------------------------------------------------------------- parsing


def _parse_row(line: int, flow_id, label, sizes, dirs, transport=None) -> FlowRecord:
    if flow_id in (None, "") or label in (None, ""):
        raise FlowParseError(line, "missing flow_id or label")
    if isinstance(sizes, str):
        sizes = [s for s in sizes.split(";") if s.strip() != ""]
    if isinstance(dirs, str):
        dirs = [d.strip() for d in dirs.split(";") if d.strip() != ""]
    try:
        sizes = [int(str(s).strip()) for s in sizes]
    except ValueError as e:
        raise FlowParseError(line, f"non-numeric packet size ({e})") from None
    if len(sizes) != len(dirs):
        raise FlowParseError(line, f"{len(sizes)} sizes but {len(dirs)} directions")
    bad = [d for d in dirs if d not in (UP, DOWN)]
    if bad:
        raise FlowParseError(line, f"unknown direction token {bad[0]!r}")
    try:
        return FlowRecord(str(flow_id), str(label), sizes, list(dirs), transport or None)
    except ValueError as e:
        raise FlowParseError(line, str(e)) from None


def parse_flows(path, fmt: str | None = None, strict: bool = True) -> list[FlowRecord]:
    """Read flow records in file order.

    With ``strict=False`` malformed rows are skipped with a warning naming the
    line instead of aborting.
    """
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        warnings.warn(f"{path}: empty flow file", stacklevel=2)
        return []
    records: list[FlowRecord] = []

    def handle(err: FlowParseError):
        if strict:
            raise err
        warnings.warn(f"{path}: {err}", stacklevel=3)

    if fmt == "jsonl":
        for i, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                rec = _parse_row(i, obj.get("flow_id"), obj.get("label"), obj.get("sizes", []),
                                 obj.get("dirs", []), obj.get("transport"))
            except json.JSONDecodeError as e:
                handle(FlowParseError(i, f"invalid JSON ({e.msg})"))
                continue
            except FlowParseError as e:
                handle(e)
                continue
            records.append(rec)
        return records
    if fmt != "csv":
        raise ValueError(f"unknown flow format {fmt!r}")

    reader = csv.reader(text.splitlines())
    header = [h.strip() for h in next(reader)]
    missing = [c for c in ("flow_id", "label", "sizes", "dirs") if c not in header]
    if missing:
        raise FlowParseError(1, f"missing columns: {', '.join(missing)}")
    col = {name: header.index(name) for name in header}
    for i, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            handle(FlowParseError(i, f"expected {len(header)} fields, got {len(row)}"))
            continue
        try:
            rec = _parse_row(i, row[col["flow_id"]], row[col["label"]], row[col["sizes"]], row[col["dirs"]],
                             row[col["transport"]] if "transport" in col else None)
        except FlowParseError as e:
            handle(e)
            continue
        records.append(rec)
    return records


def write_flows(records, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    with path.open("w", encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for r in records:
                fh.write(json.dumps(r.to_json()) + "\n")
            return
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["flow_id", "label", "sizes", "dirs"])
        for r in records:
            w.writerow([r.flow_id, r.label, ";".join(map(str, r.sizes)), ";".join(r.dirs)])


# ---------------------------------------------------------------- encoding


def encode_flow(record: FlowRecord, seq_len: int = SEQ_LEN, size_scale: int = SIZE_SCALE) -> np.ndarray:
    """(1, seq_len, 2) grid: scaled, clamped size and +1/-1 direction; 0-padded."""
    grid = np.zeros((1, seq_len, 2), dtype=np.float32)
    n = min(len(record.sizes), seq_len)
    sizes = np.minimum(np.asarray(record.sizes[:n], dtype=np.float64), size_scale) / size_scale
    grid[0, :n, 0] = sizes
    grid[0, :n, 1] = [1.0 if d == UP else -1.0 for d in record.dirs[:n]]
    return grid


@dataclass
class LabelMap:
    names: list[str]

    @classmethod
    def from_records(cls, records) -> "LabelMap":
        return cls(sorted({r.label for r in records}))

    def id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown label {name!r}") from None

    def __len__(self):
        return len(self.names)


@dataclass
class Dataset:
    x: np.ndarray  # (N, 1, T, 2)
    y: np.ndarray  # (N,)
    ids: list[str]
    labels: LabelMap

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.x[idx], self.y[idx], [self.ids[i] for i in idx], self.labels)


def encode_records(records, labels: LabelMap | None = None, seq_len: int = SEQ_LEN) -> Dataset:
    labels = labels or LabelMap.from_records(records)
    if records:
        x = np.stack([encode_flow(r, seq_len) for r in records])
    else:
        x = np.zeros((0, 1, seq_len, 2), dtype=np.float32)
    y = np.array([labels.id(r.label) for r in records], dtype=np.int64)
    return Dataset(x, y, [r.flow_id for r in records], labels)


# ---------------------------------------------------------------- splitting


@dataclass
class DatasetSplit:
    train: list[FlowRecord]
    test: list[FlowRecord]
    labels: LabelMap

    def encoded(self) -> tuple[Dataset, Dataset]:
        return encode_records(self.train, self.labels), encode_records(self.test, self.labels)


def stratified_split(records, test_fraction: float = 0.5, seed: int = 0) -> DatasetSplit:
    """Per-class shuffled split; both parts keep the original record order."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    labels = LabelMap.from_records(records)
    by_class: dict[str, list[int]] = {name: [] for name in labels.names}
    for i, r in enumerate(records):
        by_class[r.label].append(i)
    test_idx: set[int] = set()
    for name in labels.names:
        idx = by_class[name]
        if len(idx) < 2:
            raise ValueError(f"class {name!r} has {len(idx)} record(s); at least 2 are needed to split")
        n_test = int(round(len(idx) * test_fraction))
        n_test = min(max(n_test, 1), len(idx) - 1)
        perm = rng.permutation(len(idx))
        test_idx.update(idx[j] for j in perm[:n_test])
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return DatasetSplit(train, test, labels)


# ---------------------------------------------------------------- synthetic corpus

SIZE_PALETTE = (110, 230, 350, 470, 590, 710, 830, 950, 1070, 1190, 1310, 1430)
BAND = 40  # background sizes keep this far away from any first-marker size


@dataclass
class Marker:
    pos: int
    kind: str  # "size" | "dir"
    value: int | str

    @property
    def cell(self) -> tuple[int, int]:
        return (self.pos, 0 if self.kind == "size" else 1)

    def to_dict(self):
        return {"pos": self.pos, "kind": self.kind, "value": self.value}


@dataclass
class Signature:
    label: str
    markers: list[Marker] = field(default_factory=list)

    def cells(self) -> set[tuple[int, int]]:
        return {m.cell for m in self.markers}

    def to_dict(self):
        return {"class": self.label, "markers": [m.to_dict() for m in self.markers]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["class"], [Marker(int(m["pos"]), m["kind"], m["value"]) for m in d["markers"]])


def imbalanced_counts(k: int, mean: int, ratio: float) -> list[int]:
    """Per-class counts falling linearly from ``ratio`` x smallest, averaging ``mean``."""
    lo = 2 * mean / (1 + ratio)
    counts = np.rint(np.linspace(ratio * lo, lo, k)).astype(int)
    return [int(c) for c in counts]


def _make_signatures(k_classes: int, rng: np.random.Generator, max_marker_pos: int) -> list[Signature]:
    width = len(str(k_classes - 1))
    palette = list(SIZE_PALETTE)
    first_sizes = [int(v) for v in rng.permutation(palette)[:k_classes]]
    while len(first_sizes) < k_classes:
        first_sizes.append(int(rng.choice(palette)))
    spare = [v for v in palette if v not in first_sizes]
    used: set[tuple[int, int]] = set()
    signatures = []
    for k in range(k_classes):
        while True:
            pos = int(rng.integers(0, max_marker_pos + 1))
            if (pos, first_sizes[k]) not in used:
                used.add((pos, first_sizes[k]))
                break
        markers = [Marker(pos, "size", first_sizes[k])]
        taken = {pos}
        for _ in range(int(rng.integers(0, 3))):
            p = int(rng.integers(0, max_marker_pos + 1))
            if p in taken:
                continue
            taken.add(p)
            if spare and rng.random() < 0.5:
                markers.append(Marker(p, "size", int(rng.choice(spare))))
            else:
                markers.append(Marker(p, "dir", UP if rng.random() < 0.5 else DOWN))
        signatures.append(Signature(f"app{k:0{width}d}", markers))
    return signatures


def synth_generate(k_classes: int, flows_per_class: int | list[int] = 100, noise: float = 0.1, seed: int = 0,
                   max_marker_pos: int = 15, n_templates: int = 1, resample: float | None = None,
                   signatures: list[Signature] | None = None) -> tuple[list[FlowRecord], list[Signature]]:
    """Flows whose classes are identified by planted (position, size | direction) markers.

    Each class gets 1-3 markers.  The first is always a size marker; while the
    palette lasts its size is unique to the class, otherwise the (position,
    size) pair is.  Pass ``signatures`` to plant a fixed table instead.

    Background packets follow one of ``n_templates`` packet skeletons shared
    by every class (think of a common handshake).  With probability
    ``resample`` (default: ``noise / 2``) a background packet is replaced by a
    fresh log-uniform draw in [40, 1500];
    every size, marker or not, is jittered by up to ``round(100 * noise)``
    bytes and every direction flips with probability ``noise / 2``.
    Background sizes keep ``BAND`` bytes away from first-marker sizes.
    """
    if k_classes < 2:
        raise ValueError("need at least 2 classes")
    if not 0 <= noise <= 1:
        raise ValueError("noise must lie in [0, 1]")
    if n_templates < 1:
        raise ValueError("need at least one background template")
    resample = noise / 2 if resample is None else resample
    if not 0 <= resample <= 1:
        raise ValueError("resample must lie in [0, 1]")
    counts = [flows_per_class] * k_classes if isinstance(flows_per_class, int) else list(flows_per_class)
    if len(counts) != k_classes or min(counts) < 1:
        raise ValueError("flows_per_class must give a positive count per class")
    rng = np.random.default_rng(seed)
    if signatures is None:
        if k_classes > (max_marker_pos + 1) * len(SIZE_PALETTE):
            raise ValueError("too many classes for the marker space")
        signatures = _make_signatures(k_classes, rng, max_marker_pos)
    elif len(signatures) != k_classes:
        raise ValueError("one signature per class required")

    reserved = np.array(sorted({int(s.markers[0].value) for s in signatures if s.markers[0].kind == "size"}), float)

    def draw_sizes(n):
        out = np.exp(rng.uniform(np.log(40), np.log(1500), size=n))
        if reserved.size == 0:
            return out
        while True:
            bad = np.abs(out[:, None] - reserved[None]).min(axis=1) < BAND
            if not bad.any():
                return out
            out[bad] = np.exp(rng.uniform(np.log(40), np.log(1500), size=int(bad.sum())))

    templates = [(draw_sizes(30), rng.random(30) < 0.5) for _ in range(n_templates)]
    jitter = int(round(100 * noise))

    def jittered(v):
        return max(0, int(v) + (int(rng.integers(-jitter, jitter + 1)) if jitter else 0))

    def flipped(d):
        return (DOWN if d == UP else UP) if noise > 0 and rng.random() < noise / 2 else d

    # one length distribution for every class, so padding carries no label information
    shortest = max(m.pos for s in signatures for m in s.markers) + 1
    records = []
    for k, sig in enumerate(signatures):
        for i in range(counts[k]):
            n = int(rng.integers(shortest, 31))
            t_sizes, t_up = templates[int(rng.integers(n_templates))]
            fresh = rng.random(n) < resample
            base = np.where(fresh, draw_sizes(n), t_sizes[:n])
            up = np.where(fresh, rng.random(n) < 0.5, t_up[:n])
            sizes = [jittered(v) for v in base]
            dirs = [flipped(UP if u else DOWN) for u in up]
            for m in sig.markers:
                if m.kind == "size":
                    sizes[m.pos] = jittered(m.value)
                else:
                    dirs[m.pos] = flipped(m.value)
            records.append(FlowRecord(f"{sig.label}-{i:04d}", sig.label, sizes, dirs))
    order = rng.permutation(len(records))
    return [records[i] for i in order], signatures


def write_signatures(signatures, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in signatures:
            fh.write(json.dumps(s.to_dict()) + "\n")


def read_signatures(path) -> list[Signature]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [Signature.from_dict(json.loads(line)) for line in lines if line.strip()]
