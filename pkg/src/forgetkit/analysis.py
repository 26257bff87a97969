"""Layer-wise diagnostics: weight cosine similarity, frozen-encoder probing, and
before/after forgetting reports."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .data import pad_segments
from .model import PAD_ID, Checkpoint, Model, layer_parameters, params_digest


@dataclass
class LayerSimilarityProfile:
    a_id: str
    b_id: str
    cosine: list[float]
    per_parameter: dict[str, float] = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "cosine"])
            for g, c in enumerate(self.cosine):
                w.writerow([g, repr(c)])

    def write_raw_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "cosine"])
            for n, c in sorted(self.per_parameter.items()):
                w.writerow([n, repr(c)])


def _cos(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("zero-norm parameter vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def layerwise_cosine(a: Checkpoint, b: Checkpoint) -> LayerSimilarityProfile:
    """Cosine similarity per layer group of the concatenated flattened parameters."""
    if a.config != b.config:
        raise ValueError("checkpoints have different model configs")
    cos = []
    for g in range(a.config.num_groups):
        names = layer_parameters(a.config, g)
        u = np.concatenate([a.params[n].ravel() for n in names])
        v = np.concatenate([b.params[n].ravel() for n in names])
        cos.append(_cos(u, v))
    per = {}
    for n in a.params:
        try:
            per[n] = _cos(a.params[n].ravel(), b.params[n].ravel())
        except ValueError:
            per[n] = float("nan")
    return LayerSimilarityProfile(a.id, b.id, cos, per)


# probing -----------------------------------------------------------------------

@dataclass
class ProbeDataset:
    """Per-position tags for segments; tag -1 marks positions to ignore."""
    name: str
    train_segments: list
    train_tags: list
    test_segments: list
    test_tags: list

    @classmethod
    def split(cls, name: str, segments, tags, test_share: float = 0.25, seed: int = 0) -> "ProbeDataset":
        perm = np.random.default_rng(seed).permutation(len(segments))
        cut = max(1, int(round(len(segments) * (1 - test_share))))
        tr, te = perm[:cut], perm[cut:]
        return cls(name, [segments[i] for i in tr], [tags[i] for i in tr],
                   [segments[i] for i in te], [tags[i] for i in te])


@dataclass
class ProbeResult:
    layer: int
    task: str
    metric: float
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


def layer_features(model: Model, segments, tags, layer: int, batch_size: int = 32):
    feats, labels = [], []
    with nc.no_grad():
        for start in range(0, len(segments), batch_size):
            ids = pad_segments(segments[start:start + batch_size])
            states = model.hidden_states(ids, ids != PAD_ID)[layer].data
            tag = np.full(ids.shape, -1, dtype=np.int64)
            for i, t in enumerate(tags[start:start + batch_size]):
                tag[i, :len(t)] = t
            keep = tag >= 0
            feats.append(states[keep])
            labels.append(tag[keep])
    return np.concatenate(feats), np.concatenate(labels)


def probe_layer(ckpt: Checkpoint, layer: int, data: ProbeDataset, seed: int, epochs: int = 20,
                lr: float = 1e-2, batch_size: int = 64) -> ProbeResult:
    """Train a linear tagger on frozen layer-``layer`` states; report test micro-F1.

    Micro-F1 over all tags of a single-label task equals token accuracy.
    """
    L = ckpt.config.num_layers
    if not 0 <= layer <= L:
        raise ValueError(f"probe layer {layer} outside [0, {L}]")
    model = Model(ckpt)
    X_tr, y_tr = layer_features(model, data.train_segments, data.train_tags, layer)
    X_te, y_te = layer_features(model, data.test_segments, data.test_tags, layer)
    num_classes = int(max(y_tr.max(), y_te.max())) + 1
    config = {"epochs": epochs, "lr": lr, "batch_size": batch_size, "head": "linear+bias",
              "optimizer": "adam", "num_classes": num_classes}
    if num_classes == 1 or np.unique(y_tr).size == 1:
        # one class: the bias alone predicts it
        only = int(y_tr[0])
        return ProbeResult(layer, data.name, float((y_te == only).mean()), config)
    rng = np.random.default_rng(seed)
    D = X_tr.shape[1]
    W = nc.parameter(rng.normal(0, 0.02, size=(D, num_classes)), "probe.w")
    b = nc.parameter(np.zeros(num_classes), "probe.b")
    params = {"probe.w": W, "probe.b": b}
    opt = nc.make_optimizer(params, group_lr=lr)
    ones = np.ones(batch_size, dtype=bool)
    for _ in range(epochs):
        order = rng.permutation(len(y_tr))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = nc.cross_entropy(X_tr[idx] @ W + b, y_tr[idx], ones[:len(idx)])
            grads = nc.backprop(loss)
            nc.optimizer_step(params, grads, opt)
    pred = np.argmax(X_te @ W.data + b.data, axis=1)
    return ProbeResult(layer, data.name, float((pred == y_te).mean()), config)


def encoder_digest(ckpt: Checkpoint) -> str:
    return params_digest(ckpt.params)


# forgetting reports ---------------------------------------------------------------

@dataclass
class ExperimentReport:
    tasks: list[str]
    before: dict[str, float]
    after: dict[str, float]
    delta: dict[str, float]
    domain_of: dict[str, str]
    domain_average: dict[str, dict[str, float]]
    relative_error_increase: dict[str, float]
    higher_is_better: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def table(self, before_label: str = "Before", after_label: str = "After", digits: int = 2) -> str:
        """Aligned text table with one column per task and a Delta row."""
        cols = self.tasks
        rows = [("Model", *cols),
                (before_label, *(f"{self.before[t]:.{digits}f}" for t in cols)),
                (after_label, *(f"{self.after[t]:.{digits}f}" for t in cols)),
                ("Delta", *(f"{self.delta[t]:.{digits}f}" for t in cols))]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = []
        for k, r in enumerate(rows):
            lines.append(" | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
            if k == 0 or k == 2:
                lines.append("-+-".join("-" * w for w in widths))
        return "\n".join(lines)


def relative_error_increase(err_before: float, err_after: float) -> float:
    if err_before == 0:
        raise ZeroDivisionError("error before is zero")
    return (err_after - err_before) / err_before


def forgetting_report(before: Mapping[str, float], after: Mapping[str, float],
                      domain_of: Mapping[str, str] | None = None, higher_is_better: bool = True,
                      decimals: int | None = None, max_score: float = 100.0) -> ExperimentReport:
    """Per-task deltas (positive = performance dropped), domain averages, relative error growth.

    For score metrics the error is ``max_score - score``; for loss metrics
    (``higher_is_better=False``) the metric itself is the error.
    """
    if set(before) != set(after):
        raise KeyError(f"task keys differ: {sorted(set(before) ^ set(after))}")
    tasks = list(before)
    sign = 1.0 if higher_is_better else -1.0

    def rnd(x):
        return round(x, decimals) if decimals is not None else x

    delta = {t: rnd(sign * (before[t] - after[t])) for t in tasks}
    domain_of = dict(domain_of) if domain_of else {t: "all" for t in tasks}
    domains = list(dict.fromkeys(domain_of[t] for t in tasks))
    averages, rel = {}, {}
    for d in domains:
        members = [t for t in tasks if domain_of[t] == d]
        b = float(np.mean([before[t] for t in members]))
        a = float(np.mean([after[t] for t in members]))
        averages[d] = {"before": b, "after": a, "delta": sign * (b - a)}
        eb, ea = (max_score - b, max_score - a) if higher_is_better else (b, a)
        rel[d] = relative_error_increase(eb, ea) if eb != 0 else float("nan")
    return ExperimentReport(tasks, dict(before), dict(after), delta, domain_of, averages, rel, higher_is_better)


def overall_score(domain_average: Mapping[str, float]) -> float:
    """Mean of per-domain averages, each domain weighted equally."""
    return float(np.mean(list(domain_average.values())))
