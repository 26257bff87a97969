"""End-to-end experiment runner: corpora, pre-training, mitigation grids over seeds,
crash-resumable grid points, and consolidated reports."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analysis
from .data import ingest, segment
from .mitigation import MODES, MitigationConfig, Stage, StagePlan, run_plan, train_stage
from .model import Checkpoint, ModelConfig, init_checkpoint, load_checkpoint, save_checkpoint
from .synth import SyntheticDomainSpec, gen_domains, probe_data

log = logging.getLogger(__name__)

# grid keys that matter for each mode; the rest are pinned to the base config
MODE_GRID_KEYS = {
    "none": (),
    "mdl": (),
    "ewc": ("lam", "fisher_fraction", "strategy", "pooling", "pca_dim", "gmm_k"),
    "lrc": ("rho",),
    "er": ("fisher_fraction", "strategy", "pooling", "pca_dim", "gmm_k"),
}
GRID_KEYS = ("lam", "rho", "fisher_fraction", "strategy", "pooling", "pca_dim", "gmm_k")
# tuning grids used when a config gives none
DEFAULT_GRIDS = {"lam": [0.5, 1.0, 5.0, 10.0], "fisher_fraction": [0.001, 0.01, 0.1], "rho": [1.3, 1.7, 2.6]}


class ConfigError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def short_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:12]


@dataclass
class ExperimentConfig:
    domains: list[dict]                        # SyntheticDomainSpec fields, first one is the pre-training domain
    model: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    modes: list[str] = field(default_factory=lambda: ["none", "ewc", "lrc", "er"])
    grids: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_GRIDS.items()})
    points: list[dict] = field(default_factory=list)   # extra explicit points, e.g. ablations
    base: dict = field(default_factory=dict)           # MitigationConfig overrides shared by every point
    data_seed: int = 0
    segment_length: int = 64
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    stage_steps: int = 300
    probe: dict = field(default_factory=dict)          # {"num_docs": int, "epochs": int} or empty to skip
    outdir: str = "runs"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "domains" not in raw:
            raise ConfigError("config needs a 'domains' list")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def validate(self) -> None:
        if len(self.domains) < 2:
            raise ConfigError("a continual experiment needs at least two domains")
        if not self.seeds:
            raise ConfigError("seeds list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.modes and not self.points:
            raise ConfigError("no modes and no explicit points")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}")
        for k, v in self.grids.items():
            if k not in GRID_KEYS:
                raise ConfigError(f"unknown grid key {k!r}")
            if not isinstance(v, list) or not v:
                raise ConfigError(f"grid {k!r} must be a nonempty list")
        try:
            ModelConfig.from_dict(self.model_dict())
            for p in self.grid_points():
                MitigationConfig(**p)
            for d in self.domains:
                SyntheticDomainSpec(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.segment_length + 1 > self.model_dict()["max_len"]:
            raise ConfigError("segment_length + 1 exceeds model max_len")

    def model_dict(self) -> dict:
        # byte vocabulary fits in 3 specials + 128 ASCII ids unless overridden
        return {"vocab_size": 131, "max_len": self.segment_length + 1, **self.model}

    def grid_points(self) -> list[dict]:
        pts = []
        for mode in self.modes:
            keys = [k for k in MODE_GRID_KEYS[mode] if k in self.grids]
            for combo in itertools.product(*(self.grids[k] for k in keys)):
                pts.append({**self.base, "mode": mode, **dict(zip(keys, combo))})
        for p in self.points:
            pts.append({**self.base, **p})
        seen, unique = set(), []
        for p in pts:
            key = canonical_json(p)
            if key not in seen:
                seen.add(key)
                unique.append(p)
        return unique

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("outdir")
        return short_hash(d)


def point_label(point: dict, base: dict | None = None) -> str:
    base = base or {}
    bits = [point["mode"]]
    for k in sorted(point):
        if k != "mode" and (k not in base or base[k] != point[k]):
            bits.append(f"{k}={point[k]}")
    return ",".join(bits)


# data -------------------------------------------------------------------------------

@dataclass
class DomainData:
    name: str
    train: list
    valid: list
    spec: SyntheticDomainSpec


def prepare_domains(cfg: ExperimentConfig, root: Path) -> list[DomainData]:
    specs = [SyntheticDomainSpec(**d) for d in cfg.domains]
    corpus_dir = root / "corpus"
    if not (corpus_dir / "manifest.json").exists():
        gen_domains(specs, cfg.data_seed, corpus_dir)
    max_len = cfg.model_dict()["max_len"]
    out = []
    for spec in specs:
        train, valid, _test = ingest(corpus_dir / f"{spec.name}.txt", spec.name, cfg.data_seed)
        out.append(DomainData(spec.name, segment(train, cfg.segment_length, max_len),
                              segment(valid, cfg.segment_length, max_len), spec))
    return out


def pretrain(cfg: ExperimentConfig, domain: DomainData, seed: int, root: Path) -> Checkpoint:
    """Stage-0 training on the first domain, cached per seed."""
    path = root / "pretrain" / f"seed-{seed}" / "model.ckpt"
    if path.exists():
        return load_checkpoint(path)
    mc = ModelConfig.from_dict(cfg.model_dict())
    base = MitigationConfig(**{**cfg.base, "mode": "none", "lr": cfg.pretrain_lr})
    ckpt, tlog = train_stage(init_checkpoint(mc, seed), domain.train, base, cfg.pretrain_steps, seed,
                             stage=f"pretrain-{domain.name}", log_every=10)
    path.parent.mkdir(parents=True, exist_ok=True)
    tlog.write_csv(path.parent / "train_log.csv")
    tmp = path.with_suffix(".tmp")
    save_checkpoint(ckpt, tmp)
    tmp.replace(path)
    return ckpt


# grid points ---------------------------------------------------------------------------

def _f(x: float) -> float:
    # plain float so the JSON repr round-trips exactly
    return float(x)


def run_point(cfg: ExperimentConfig, point: dict, seed: int, domains: list[DomainData],
              pre: Checkpoint, pdir: Path) -> dict:
    mcfg = MitigationConfig(**point)
    first, rest = domains[0], domains[1:]
    stages = [Stage(f"stage{i + 1}-{d.name}", d.name, d.train, mcfg, cfg.stage_steps)
              for i, d in enumerate(rest)]
    plan = StagePlan(stages, {d.name: d.valid for d in domains})
    results = run_plan(plan, seed, pre, history=[(first.name, first.train)])
    final, _ = results[-1]
    before = results[0][1].eval_before
    after = results[-1][1].eval_after

    pdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(final, pdir / "model.ckpt")
    stages_out = []
    for ckpt, rep in results:
        rep.log.write_csv(pdir / f"{rep.stage}.log.csv")
        sel = rep.artifacts.get("selection")
        manifest = None
        if sel:
            manifest = f"{rep.stage}.selection.json"
            (pdir / manifest).write_text(json.dumps(sel, indent=2, sort_keys=True))
        stages_out.append({"stage": rep.stage, "checkpoint": rep.checkpoint_id, "parent": rep.parent_id,
                           "selection_manifest": manifest,
                           "eval_after": {k: _f(v) for k, v in rep.eval_after.items()}})

    profile = analysis.layerwise_cosine(pre, final)
    profile.write_csv(pdir / "similarity.csv")
    profile.write_raw_csv(pdir / "similarity_raw.csv")

    probes = {}
    if cfg.probe:
        for d in domains:
            segs, tags = probe_data(d.spec, cfg.data_seed, num_docs=cfg.probe.get("num_docs", 10),
                                    length=cfg.segment_length)
            ds = analysis.ProbeDataset.split(d.name, segs, tags, seed=cfg.data_seed)
            probes[d.name] = [_f(analysis.probe_layer(final, layer, ds, seed,
                                                          epochs=cfg.probe.get("epochs", 20)).metric)
                              for layer in range(final.config.num_layers + 1)]

    rep = analysis.forgetting_report(before, after, {d: d for d in before}, higher_is_better=False)
    return {
        "point": point,
        "label": point_label(point, cfg.base),
        "domains": [d.name for d in domains],
        "seed": seed,
        "pretrain_checkpoint": pre.id,
        "checkpoint": final.id,
        "stages": stages_out,
        "loss_before": {k: _f(v) for k, v in before.items()},
        "loss_after": {k: _f(v) for k, v in after.items()},
        "delta": {k: _f(v) for k, v in rep.delta.items()},
        "relative_increase": {k: _f(v) for k, v in rep.relative_error_increase.items()},
        "overall": _f(analysis.overall_score(after)),
        "similarity": [_f(c) for c in profile.cosine],
        "probe": probes,
    }


def run(cfg: ExperimentConfig, outdir=None) -> tuple[Path, dict]:
    """Execute every (grid point, seed); finished points are skipped on rerun."""
    root = Path(outdir or cfg.outdir) / cfg.hash()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    domains = prepare_domains(cfg, root)
    status = {"completed": 0, "skipped": 0, "failed": 0}
    for seed in cfg.seeds:
        pre = None
        for point in cfg.grid_points():
            pdir = root / "points" / f"{point['mode']}-{short_hash(point)}" / f"seed-{seed}"
            metrics_path = pdir / "metrics.json"
            if metrics_path.exists():
                status["skipped"] += 1
                continue
            try:
                if pre is None:
                    pre = pretrain(cfg, domains[0], seed, root)
                metrics = run_point(cfg, point, seed, domains, pre, pdir)
            except Exception as exc:  # recorded, the grid goes on
                log.error("point %s seed %d failed: %s", point_label(point, cfg.base), seed, exc)
                pdir.mkdir(parents=True, exist_ok=True)
                (pdir / "error.txt").write_text(traceback.format_exc())
                status["failed"] += 1
                continue
            (pdir / "error.txt").unlink(missing_ok=True)
            tmp = metrics_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(metrics, indent=2, sort_keys=True))
            tmp.replace(metrics_path)
            status["completed"] += 1
            log.info("done %s seed %d overall %.4f", metrics["label"], seed, metrics["overall"])
    if status["completed"] + status["skipped"] > 0:
        report(root)
    return root, status


# reporting -----------------------------------------------------------------------------

def load_metrics(root: Path) -> list[dict]:
    rows = []
    for path in sorted(Path(root).glob("points/*/seed-*/metrics.json")):
        m = json.loads(path.read_text())
        m["path"] = str(path.parent.relative_to(root))
        rows.append(m)
    return rows


def monotone_with_slack(values, increasing: bool, slack: int = 1, tol: float = 0.0) -> bool:
    """At most ``slack`` adjacent pairs may move the wrong way (beyond ``tol``)."""
    v = np.asarray(values, dtype=float)
    steps = np.diff(v) if increasing else -np.diff(v)
    return int(np.sum(steps < -tol)) <= slack


def lambda_sweep(rows: list[dict], first: str, last: str) -> dict | None:
    """Per-seed forgetting/last-domain loss curves over EWC lambda (Fisher-weighted points only).

    Other EWC knobs must be constant for a sweep to be drawn; lambda 0 is taken from
    the unmitigated run when no explicit lambda-0 point exists.
    """
    ewc = [r for r in rows if r["point"]["mode"] == "ewc" and r["point"].get("use_fisher", True)]
    fixed = {canonical_json({k: v for k, v in r["point"].items() if k != "lam"}) for r in ewc}
    if len(fixed) != 1:
        return None
    by_seed: dict[int, dict[float, dict]] = {}
    for r in ewc:
        by_seed.setdefault(r["seed"], {})[float(r["point"].get("lam", 1.0))] = r
    for r in rows:
        if r["point"]["mode"] == "none" and r["seed"] in by_seed:
            by_seed[r["seed"]].setdefault(0.0, r)
    lams = sorted(set().union(*(d.keys() for d in by_seed.values())))
    if len(lams) < 2:
        return None
    curves = {}
    for seed, d in sorted(by_seed.items()):
        if sorted(d) != lams:
            continue
        forget = [d[l]["relative_increase"][first] for l in lams]
        target = [d[l]["loss_after"][last] for l in lams]
        curves[str(seed)] = {
            "forgetting": forget, "target_loss": target,
            "forgetting_monotone": monotone_with_slack(forget, increasing=False),
            "target_monotone": monotone_with_slack(target, increasing=True),
        }
    if not curves:
        return None
    ok = [c["forgetting_monotone"] and c["target_monotone"] for c in curves.values()]
    return {"lambdas": lams, "per_seed": curves, "monotone_majority": sum(ok) * 2 > len(ok)}


def report(root) -> dict:
    """Aggregate every finished point into JSON, CSV, text tables and figures."""
    from . import plotting

    root = Path(root)
    rows = load_metrics(root)
    if not rows:
        raise FileNotFoundError(f"no completed grid points under {root}")
    domains = rows[0]["domains"]
    first, last = domains[0], domains[-1]

    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["label"], []).append(r)
    table = []
    for label, rs in groups.items():
        rs = sorted(rs, key=lambda r: r["seed"])
        entry = {
            "label": label,
            "mode": rs[0]["point"]["mode"],
            "seeds": [r["seed"] for r in rs],
            "loss_after": {d: _f(float(np.mean([r["loss_after"][d] for r in rs]))) for d in domains},
            "delta": {d: _f(float(np.mean([r["delta"][d] for r in rs]))) for d in domains},
            "overall": _f(float(np.mean([r["overall"] for r in rs]))),
            "cells": [{"seed": r["seed"], "checkpoint": r["checkpoint"], "path": r["path"],
                       "selection_manifests": [s["selection_manifest"] for s in r["stages"]]} for r in rs],
        }
        if any(r["probe"] for r in rs):
            entry["probe_outer"] = {d: _f(float(np.mean([r["probe"][d][-1] for r in rs]))) for d in domains}
        table.append(entry)
    # lower mean held-out loss ranks first; label breaks ties
    table.sort(key=lambda e: (e["overall"], e["label"]))
    for i, e in enumerate(table, 1):
        e["rank"] = i

    sweep = lambda_sweep(rows, first, last)
    out = {"domains": domains, "rows": table, "lambda_sweep": sweep}
    (root / "report.json").write_text(json.dumps(out, indent=2, sort_keys=True))

    with open(root / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "label", "mode", "seeds", *(f"loss_{d}" for d in domains),
                    *(f"delta_{d}" for d in domains), "overall"])
        for e in table:
            w.writerow([e["rank"], e["label"], e["mode"], " ".join(map(str, e["seeds"])),
                        *(repr(e["loss_after"][d]) for d in domains),
                        *(repr(e["delta"][d]) for d in domains), repr(e["overall"])])
    (root / "report.txt").write_text(render_table(table, domains) + "\n")

    fig_dir = root / "figures"
    plotting.plot_overall([e["label"] for e in table], [e["overall"] for e in table], fig_dir / "overall.png")
    profiles = {}
    for label, rs in groups.items():
        profiles[label] = list(np.mean([r["similarity"] for r in rs], axis=0))
    plotting.plot_similarity_profiles(profiles, fig_dir / "similarity.png")
    if sweep:
        seeds = list(sweep["per_seed"].values())
        plotting.plot_lambda_sweep(sweep["lambdas"], np.mean([c["forgetting"] for c in seeds], axis=0),
                                   np.mean([c["target_loss"] for c in seeds], axis=0),
                                   fig_dir / "lambda_sweep.png", sweep["monotone_majority"])
    return out


def render_table(table: list[dict], domains: list[str]) -> str:
    head = ["#", "configuration", *(f"{d} loss" for d in domains), *(f"{d} delta" for d in domains), "Overall"]
    body = [[str(e["rank"]), e["label"], *(f"{e['loss_after'][d]:.4f}" for d in domains),
             *(f"{e['delta'][d]:+.4f}" for d in domains), f"{e['overall']:.4f}"] for e in table]
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(head), "  ".join("-" * w for w in widths), *map(fmt, body)])
