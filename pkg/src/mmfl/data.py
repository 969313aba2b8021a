"""Flow-structured traffic data: synthetic generator, CSV loader, partitioning, scoring."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .nn import ModelWeights, forward_steps

FLOW_LEN = 10
RATIO_THRESHOLD = 0.7
PACKET_THRESHOLD = 0.5


class SchemaError(ValueError):
    pass


class RowError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class PacketRecord:
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Flow:
    features: np.ndarray        # (FLOW_LEN, F)
    packet_labels: np.ndarray   # (FLOW_LEN,)
    label: int

    @property
    def packets(self) -> List[PacketRecord]:
        return [PacketRecord(f, int(y)) for f, y in zip(self.features, self.packet_labels)]


def flow_label(packet_labels: np.ndarray, ratio_threshold: float = RATIO_THRESHOLD) -> np.ndarray:
    """Malicious iff the malicious-packet ratio is strictly above the threshold."""
    return (np.mean(np.asarray(packet_labels), axis=-1) > ratio_threshold).astype(int)


class FlowSet:
    """A stack of flows held as arrays; iterates and indexes as ``Flow`` objects."""

    def __init__(self, features: np.ndarray, packet_labels: np.ndarray, labels: Optional[np.ndarray] = None):
        self.features = np.asarray(features, dtype=np.float64)
        self.packet_labels = np.asarray(packet_labels, dtype=int)
        if self.features.ndim != 3 or self.features.shape[:2] != self.packet_labels.shape:
            raise ValueError("features must be (n, T, F) with matching (n, T) packet labels")
        self.labels = flow_label(self.packet_labels) if labels is None else np.asarray(labels, dtype=int)

    @classmethod
    def from_flows(cls, flows: Sequence[Flow]) -> "FlowSet":
        return cls(np.stack([f.features for f in flows]), np.stack([f.packet_labels for f in flows]),
                   np.array([f.label for f in flows]))

    @property
    def n_features(self) -> int:
        return self.features.shape[2]

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Flow(self.features[i], self.packet_labels[i], int(self.labels[i]))
        return FlowSet(self.features[i], self.packet_labels[i], self.labels[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "FlowSet":
        idx = np.asarray(idx, dtype=int)
        return FlowSet(self.features[idx], self.packet_labels[idx], self.labels[idx])


@dataclass
class DatasetSplit:
    device_train: List[FlowSet]
    test: FlowSet
    edge: List[np.ndarray]      # unlabeled (n, T, F) feature stacks per BS


def generate_synthetic(rng: np.random.Generator, n_features: int, n_flows: int, class_sep: float,
                       malicious_fraction: float = 0.5) -> FlowSet:
    """Gaussian packets, mean +class_sep (malicious) or -class_sep (benign) per feature.

    A malicious flow carries 8-10 malicious packets, a benign one 0-2, so
    flow labels agree with the ratio rule.
    """
    if n_features < 2 or n_flows < 1:
        raise ValueError("need n_features >= 2 and n_flows >= 1")
    malicious = rng.random(n_flows) < malicious_fraction
    counts = np.where(malicious, rng.integers(8, 11, n_flows), rng.integers(0, 3, n_flows))
    packet_labels = np.zeros((n_flows, FLOW_LEN), dtype=int)
    for i, k in enumerate(counts):
        packet_labels[i, rng.permutation(FLOW_LEN)[:k]] = 1
    sign = 2.0 * packet_labels - 1.0
    features = sign[..., None] * class_sep + rng.standard_normal((n_flows, FLOW_LEN, n_features))
    return FlowSet(features, packet_labels)


# ------------------------------------------------------------------ csv ---

def load_schema(path) -> Dict:
    with open(path) as fh:
        schema = json.load(fh)
    if "features" not in schema or "label" not in schema:
        raise SchemaError("schema needs 'features' and 'label'")
    return schema


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Per-column min-max scaling over the last axis; constant columns map to 0."""
    flat = x.reshape(-1, x.shape[-1])
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (flat - lo) / safe, 0.0)
    return out.reshape(x.shape)


def load_csv(path, schema: Dict, normalize: bool = True) -> FlowSet:
    columns, label_col = list(schema["features"]), schema["label"]
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        index = {name.strip(): i for i, name in enumerate(header)}
        for name in columns + [label_col]:
            if name not in index:
                raise SchemaError(f"missing column {name!r}")
        cols = [index[c] for c in columns]
        for line, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in cols])
                label = float(row[index[label_col]])
            except (ValueError, IndexError) as exc:
                raise RowError(line, f"non-numeric or missing cell ({exc})") from None
            if label not in (0.0, 1.0):
                raise RowError(line, f"label must be 0 or 1, got {row[index[label_col]]!r}")
            labels.append(int(label))
    n_flows = len(rows) // FLOW_LEN
    keep = n_flows * FLOW_LEN
    x = np.array(rows[:keep], dtype=np.float64).reshape(n_flows, FLOW_LEN, len(columns))
    if normalize and n_flows:
        x = minmax_normalize(x)
    y = np.array(labels[:keep], dtype=int).reshape(n_flows, FLOW_LEN)
    return FlowSet(x, y)


def write_csv(flows: FlowSet, path, feature_names: Optional[Sequence[str]] = None, label_name: str = "label"):
    names = list(feature_names or [f"f{i}" for i in range(flows.n_features)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + [label_name])
        for feats, labels in zip(flows.features, flows.packet_labels):
            for row, y in zip(feats, labels):
                w.writerow([repr(float(v)) for v in row] + [int(y)])
    return {"features": names, "label": label_name}


# ------------------------------------------------------------ partition ---

def partition(flows: FlowSet, n_devices: int, sizes: Union[int, Sequence[int]], rng: np.random.Generator,
              edge_sizes: Sequence[int] = (), test_size: Optional[int] = None) -> DatasetSplit:
    """Disjoint random device shards; the remainder (or ``test_size`` of it) is the test set.

    Edge sets are drawn from the training pool and carry features only.
    """
    sizes = [sizes] * n_devices if isinstance(sizes, (int, np.integer)) else list(sizes)
    if len(sizes) != n_devices:
        raise ValueError("need one size per device")
    need = sum(sizes) + (test_size or 0)
    if need > len(flows):
        raise ValueError(f"insufficient data: need {need} flows, have {len(flows)}")
    order = rng.permutation(len(flows))
    shards, start = [], 0
    for s in sizes:
        shards.append(flows.subset(order[start:start + s]))
        start += s
    rest = order[start:]
    test = flows.subset(rest if test_size is None else rest[:test_size])
    pool = order[:start]
    edge = []
    for size in edge_sizes:
        if size > len(pool):
            raise ValueError(f"insufficient data: edge set of {size} from a pool of {len(pool)}")
        edge.append(flows.features[rng.choice(pool, size=size, replace=False)])
    return DatasetSplit(shards, test, edge)


# ------------------------------------------------------------- scoring ---

def flow_verdict(packet_probs, packet_threshold: float = PACKET_THRESHOLD,
                 ratio_threshold: float = RATIO_THRESHOLD):
    """1 if the share of packets scored above ``packet_threshold`` exceeds ``ratio_threshold``.

    Accepts one flow (T,) or a stack (n, T).
    """
    p = np.asarray(packet_probs, dtype=np.float64)
    verdict = (np.mean(p > packet_threshold, axis=-1) > ratio_threshold).astype(int)
    return int(verdict) if verdict.ndim == 0 else verdict


Scorer = Union[ModelWeights, Callable[[np.ndarray], np.ndarray]]


def packet_probabilities(model: Scorer, features: np.ndarray) -> np.ndarray:
    if isinstance(model, ModelWeights):
        return forward_steps(model, features)
    return np.asarray(model(features))


def evaluate_accuracy(model: Scorer, test: FlowSet, packet_threshold: float = PACKET_THRESHOLD,
                      ratio_threshold: float = RATIO_THRESHOLD) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    verdicts = flow_verdict(packet_probabilities(model, test.features), packet_threshold, ratio_threshold)
    return float(np.mean(np.atleast_1d(verdicts) == test.labels))
