"""Forgetting mitigation: EWC, learning-rate control, experience replay, and the
unmitigated / joint-training baselines, plus single- and multi-stage training."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .data import (MaskedBatch, NoTargetsError, ReplayBuffer, Segment, build_replay_buffer,
                   mask_batch, mix_batch, proportional_ratio)
from .model import Checkpoint, Model, group_of, mlm_forward, read_container, write_container
from .numcore import Tensor

MODES = ("none", "ewc", "lrc", "er", "mdl")


class TrainingDivergedError(FloatingPointError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class MitigationConfig:
    mode: str = "none"
    lam: float = 1.0
    fisher_fraction: float = 0.001
    fisher_min_samples: int = 32
    use_fisher: bool = True
    rho: float = 1.3
    lr: float = 1e-3                 # top-group rate; every group under non-LRC modes
    replay_ratio: float | None = None  # None: proportional to token counts, capped
    replay_cap: float = 0.5
    strategy: str = "random"         # random | low | high | uniform | gmm
    num_bins: int = 10
    pooling: str = "avg"
    pca_dim: int = 100
    gmm_k: int = 5
    batch_size: int = 8
    mask_rate: float = 0.15

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mitigation mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if self.replay_ratio is not None and not 0 <= self.replay_ratio <= 1:
            raise ValueError("replay ratio must lie in [0, 1]")
        if not 0 < self.fisher_fraction <= 1:
            raise ValueError("fisher_fraction must lie in (0, 1]")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


# EWC -------------------------------------------------------------------------

@dataclass
class FisherDiagonal:
    values: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]
    anchor_id: str
    num_samples: int

    def save(self, path) -> Path:
        arrays = {f"fisher/{k}": v for k, v in self.values.items()}
        arrays.update({f"anchor/{k}": v for k, v in self.anchor.items()})
        meta = {"anchor_id": self.anchor_id, "num_samples": self.num_samples}
        return write_container(path, arrays, "fisher", None, meta)

    @classmethod
    def load(cls, path) -> "FisherDiagonal":
        header, arrays = read_container(path)
        if header.get("role") != "fisher":
            raise ValueError(f"{path} is not a Fisher container")
        values = {k[len("fisher/"):]: v for k, v in arrays.items() if k.startswith("fisher/")}
        anchor = {k[len("anchor/"):]: v for k, v in arrays.items() if k.startswith("anchor/")}
        meta = header["metadata"]
        return cls(values, anchor, meta["anchor_id"], int(meta["num_samples"]))


def fisher_diagonal(model: Model, samples: Sequence[MaskedBatch], reduction: str = "sum") -> FisherDiagonal:
    """Mean of squared per-sample gradients, anchored at the model's current weights.

    Each sample should be a batch of one segment so the square is taken per sample.
    With ``reduction="sum"`` a sample's loss is its total masked-token negative
    log-likelihood (the log-likelihood of the segment); ``"mean"`` uses the
    per-token average that training optimises.
    """
    if not samples:
        raise ValueError("Fisher estimation needs at least one sample")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    acc = {n: np.zeros_like(p.data) for n, p in model.params.items()}
    for batch in samples:
        loss, _ = mlm_forward(model, batch)
        if reduction == "sum":
            loss = loss * float(batch.num_targets)
        grads = nc.backprop(loss)
        for n, g in grads.items():
            acc[n] += g * g
    N = len(samples)
    values = {n: a / N for n, a in acc.items()}
    ckpt = model.checkpoint()
    return FisherDiagonal(values, {n: a.copy() for n, a in ckpt.params.items()}, ckpt.id, N)


def fisher_samples(segments: Sequence, mask_rate: float, seed: int, vocab_size: int) -> list[MaskedBatch]:
    """One single-segment masked batch per segment, each with a fresh masking seed."""
    out = []
    for i, seg in enumerate(segments):
        try:
            out.append(mask_batch([seg], mask_rate, seed * 100_003 + i, vocab_size))
        except NoTargetsError:
            continue
    return out


def ewc_penalty(params: dict[str, Tensor], fisher: FisherDiagonal, lam: float,
                use_fisher: bool = True) -> Tensor:
    """Sum over parameters of lam * F * (theta - theta_anchor)^2 (no 1/2 factor).

    With ``use_fisher=False`` every F entry is replaced by one.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    total: Tensor | None = None
    for name, p in params.items():
        anchor = fisher.anchor.get(name)
        if anchor is None or anchor.shape != p.shape:
            raise ValueError(f"parameter {name} does not match the Fisher anchor")
        weight = lam * fisher.values[name] if use_fisher else np.full(p.shape, float(lam))
        diff = p - anchor
        term = (diff * diff * weight).sum()
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# LRC -------------------------------------------------------------------------

def lrc_schedule(eta_top: float, rho: float, num_groups: int) -> list[float]:
    """Per-group learning rates, input group first: each group below the top is divided by rho."""
    if eta_top <= 0:
        raise ValueError("eta_top must be positive")
    if rho < 1:
        raise ValueError("rho must be >= 1")
    if num_groups < 1:
        raise ValueError("need at least one group")
    rates = [0.0] * num_groups
    rates[-1] = float(eta_top)
    for g in range(num_groups - 1, 0, -1):
        rates[g - 1] = rates[g] / rho
    return rates


# training --------------------------------------------------------------------

@dataclass
class TrainLog:
    num_groups: int
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return ["step", "task_loss", "penalty", "total_loss"] + [f"lr_group_{g}" for g in range(self.num_groups)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def task_losses(self) -> np.ndarray:
        return np.array([r["task_loss"] for r in self.rows])


class _Stream:
    """Endless seeded reshuffling stream over a segment list."""

    def __init__(self, segments: Sequence, rng: np.random.Generator):
        if not segments:
            raise ValueError("empty training corpus")
        self.segments = segments
        self.rng = rng
        self.queue: list[int] = []

    def peek(self, k: int) -> list:
        while len(self.queue) < k:
            self.queue.extend(self.rng.permutation(len(self.segments)).tolist())
        return [self.segments[i] for i in self.queue[:k]]

    def advance(self, k: int) -> None:
        del self.queue[:k]


def train_stage(ckpt: Checkpoint, segments: Sequence[Segment], cfg: MitigationConfig, steps: int,
                seed: int, *, fisher: FisherDiagonal | None = None, buffer: ReplayBuffer | None = None,
                aux_segments: Sequence[Segment] | None = None, stage: str = "stage",
                log_every: int = 1) -> tuple[Checkpoint, TrainLog]:
    """Masked-LM training on ``segments`` under the configured mitigation."""
    if cfg.mode == "ewc" and fisher is None:
        raise ValueError("mode=ewc needs a FisherDiagonal")
    if cfg.mode == "er" and (buffer is None or len(buffer) == 0):
        raise ValueError("mode=er needs a non-empty ReplayBuffer")
    if cfg.mode == "mdl" and not aux_segments:
        raise ValueError("mode=mdl needs the other corpus")
    model = Model(ckpt)
    config = model.config
    G = config.num_groups
    groups = {n: group_of(n, config) for n in model.params}
    if cfg.mode == "lrc":
        rates = lrc_schedule(cfg.lr, cfg.rho, G)
    else:
        rates = [cfg.lr] * G
    opt = nc.make_optimizer(model.params, groups, dict(enumerate(rates)))
    rng = np.random.default_rng(seed)
    stream = _Stream(segments, rng)

    mix_buffer = buffer if cfg.mode == "er" else None
    if cfg.mode == "er" and cfg.replay_ratio is not None:
        mix_buffer = replace(buffer, ratio=cfg.replay_ratio)
    if cfg.mode == "mdl":
        aux_tok = sum(len(s) for s in aux_segments)
        cur_tok = sum(len(s) for s in segments)
        mix_buffer = ReplayBuffer(len(aux_segments), tuple(aux_segments),
                                  aux_tok / (aux_tok + cur_tok), tuple(range(len(aux_segments))), "mdl")

    log = TrainLog(G)
    B = cfg.batch_size
    for step in range(1, steps + 1):
        mixed = mix_batch(stream.peek(B), mix_buffer, B, rng)
        stream.advance(int((~mixed.from_replay).sum()))
        mask_seed = int(rng.integers(2 ** 31 - 1))
        batch = mask_batch(mixed.segments, cfg.mask_rate, mask_seed, config.vocab_size)
        task, _ = mlm_forward(model, batch)
        total = task
        penalty_value = 0.0
        if cfg.mode == "ewc":
            penalty = ewc_penalty(model.params, fisher, cfg.lam, cfg.use_fisher)
            penalty_value = penalty.item()
            total = task + penalty
        if not np.isfinite(total.item()):
            raise TrainingDivergedError(
                f"{stage}: non-finite loss at step {step} (task={task.item()}, penalty={penalty_value})")
        grads = nc.backprop(total)
        nc.optimizer_step(model.params, grads, opt)
        if step % log_every == 0 or step == steps:
            row = {"step": step, "task_loss": task.item(), "penalty": penalty_value,
                   "total_loss": total.item()}
            row.update({f"lr_group_{g}": rates[g] for g in range(G)})
            log.rows.append(row)
    out = model.checkpoint(stage=stage, step=int(ckpt.metadata.get("step", 0)) + steps,
                           seed=int(seed), parent=ckpt.id)
    return out, log


def eval_loss(ckpt_or_model, segments: Sequence, seed: int = 0, mask_rate: float = 0.15,
              batch_size: int = 32) -> float:
    """Held-out masked-LM loss with deterministic masking (target-weighted mean)."""
    model = ckpt_or_model if isinstance(ckpt_or_model, Model) else Model(ckpt_or_model)
    total, count = 0.0, 0
    with nc.no_grad():
        for b, start in enumerate(range(0, len(segments), batch_size)):
            chunk = segments[start:start + batch_size]
            try:
                batch = mask_batch(chunk, mask_rate, seed * 7_919 + b, model.config.vocab_size)
            except NoTargetsError:
                continue
            loss, _ = mlm_forward(model, batch)
            total += loss.item() * batch.num_targets
            count += batch.num_targets
    if count == 0:
        raise ValueError("no evaluable segments")
    return total / count


# multi-stage plans ---------------------------------------------------------------

@dataclass
class Stage:
    name: str
    domain: str
    train: Sequence[Segment]
    cfg: MitigationConfig = field(default_factory=MitigationConfig)
    steps: int = 100


@dataclass
class StagePlan:
    stages: list[Stage]
    eval_sets: dict[str, Sequence[Segment]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a plan needs at least one stage")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ValueError("stage names must be unique")


@dataclass
class StageReport:
    stage: str
    domain: str
    mode: str
    checkpoint_id: str
    parent_id: str
    eval_before: dict[str, float]
    eval_after: dict[str, float]
    log: TrainLog
    artifacts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage, "domain": self.domain, "mode": self.mode,
            "checkpoint": self.checkpoint_id, "parent": self.parent_id,
            "eval_before": self.eval_before, "eval_after": self.eval_after,
            "final_task_loss": self.log.rows[-1]["task_loss"] if self.log.rows else None,
            "artifacts": self.artifacts,
        }


def select_subset(model: Model, segments: Sequence[Segment], n: int, cfg: MitigationConfig,
                  seed: int) -> tuple[np.ndarray, dict]:
    """Pick ``n`` segments from a previous domain with the configured strategy."""
    from . import selection as sel
    from .model import encode_batch

    n = min(n, len(segments))
    if cfg.strategy == "random":
        return sel.select_by_strategy(np.zeros(len(segments)), n, "random", seed=seed), {"strategy": "random"}
    if cfg.strategy in ("low", "high", "uniform"):
        feats = sel.gradient_features(model, segments, seed, cfg.mask_rate)
        idx = sel.select_by_strategy(feats, n, cfg.strategy, cfg.num_bins, seed)
        return idx, {"strategy": cfg.strategy, "feature_stats": sel.feature_stats(feats)}
    if cfg.strategy == "gmm":
        with nc.no_grad():
            emb = encode_batch(model, segments, cfg.pooling)
        idx, info = sel.latent_cluster_select(emb, n, cfg.pca_dim, cfg.gmm_k, seed)
        return idx, {"strategy": "gmm", "pooling": cfg.pooling, **info}
    raise ValueError(f"unknown selection strategy {cfg.strategy!r}")


def subset_size(num_segments: int, cfg: MitigationConfig) -> int:
    return max(cfg.fisher_min_samples, int(round(cfg.fisher_fraction * num_segments)))


def build_artifacts(ckpt: Checkpoint, previous: list[tuple[str, Sequence[Segment]]],
                    current: Sequence[Segment], cfg: MitigationConfig, seed: int) -> dict:
    """Fisher diagonal and/or replay buffer from earlier domains, anchored at ``ckpt``.

    The subset budget is split equally over the earlier domains.
    """
    out: dict = {}
    if cfg.mode not in ("ewc", "er") or not previous:
        return out
    model = Model(ckpt)
    total = sum(len(s) for _, s in previous)
    budget = subset_size(total, cfg)
    share = max(1, budget // len(previous))
    chosen: list[Segment] = []
    selection_info = {}
    for j, (domain, segs) in enumerate(previous):
        idx, info = select_subset(model, segs, share, cfg, seed + 31 * j)
        chosen.extend(segs[i] for i in idx)
        selection_info[domain] = {**info, "chosen_ids": [int(i) for i in idx]}
    out["selection"] = selection_info
    if cfg.mode == "ewc":
        samples = fisher_samples(chosen, cfg.mask_rate, seed, ckpt.config.vocab_size)
        out["fisher"] = fisher_diagonal(model, samples)
    else:
        src_tok = sum(len(s) for _, segs in previous for s in segs)
        cur_tok = sum(len(s) for s in current)
        ratio = cfg.replay_ratio if cfg.replay_ratio is not None else \
            proportional_ratio(src_tok, cur_tok, cfg.replay_cap)
        out["buffer"] = build_replay_buffer(chosen, range(len(chosen)), len(chosen), ratio, cfg.strategy)
    return out


def run_plan(plan: StagePlan, seed: int, init: Checkpoint,
             history: Sequence[tuple[str, Sequence[Segment]]] = ()) -> list[tuple[Checkpoint, StageReport]]:
    """Execute stages in order, rebuilding Fisher / replay artifacts at each boundary.

    ``history`` lists the (domain, training segments) that ``init`` was already trained on.
    """
    results = []
    ckpt = init
    seen: list[tuple[str, Sequence[Segment]]] = list(history)
    for i, stage in enumerate(plan.stages):
        stage_seed = seed + 7_919 * i
        try:
            art = build_artifacts(ckpt, seen, stage.train, stage.cfg, stage_seed)
            before = {d: eval_loss(ckpt, s) for d, s in plan.eval_sets.items()}
            aux = None
            if stage.cfg.mode == "mdl":
                aux = [s for _, segs in seen for s in segs]
            new, log = train_stage(ckpt, stage.train, stage.cfg, stage.steps, stage_seed,
                                   fisher=art.get("fisher"), buffer=art.get("buffer"),
                                   aux_segments=aux, stage=stage.name)
            after = {d: eval_loss(new, s) for d, s in plan.eval_sets.items()}
        except Exception as exc:  # attach the stage name
            raise StageError(stage.name, exc) from exc
        report = StageReport(stage.name, stage.domain, stage.cfg.mode, new.id, ckpt.id, before, after, log,
                             {"selection": art.get("selection"),
                              "fisher_samples": art["fisher"].num_samples if "fisher" in art else None,
                              "buffer_size": len(art["buffer"]) if "buffer" in art else None,
                              "single_anchor": stage.cfg.mode == "ewc"})
        report.artifacts_objects = art
        results.append((new, report))
        seen.append((stage.domain, stage.train))
        ckpt = new
    return results


def config_dict(cfg: MitigationConfig) -> dict:
    return asdict(cfg)
