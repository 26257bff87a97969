"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The experiment-backed criteria (4, 5, 7, 10) share one three-seed harness run
on two synthetic domains; that run dominates the runtime (roughly 15 minutes on
one CPU core).
"""
import json
import time

import numpy as np
import pytest

from forgetkit import harness
from forgetkit import numcore as nc
from forgetkit import selection as sel
from forgetkit.analysis import forgetting_report, layerwise_cosine
from forgetkit.cli import main
from forgetkit.data import build_replay_buffer, mask_batch, mix_batch
from forgetkit.mitigation import (FisherDiagonal, MitigationConfig, ewc_penalty, fisher_diagonal, fisher_samples,
                                  lrc_schedule, train_stage)
from forgetkit.model import BOS_ID, Model, ModelConfig, init_checkpoint, load_checkpoint, mlm_forward

SEEDS = [0, 1, 2]
LAMBDAS = [0.0, 0.5, 1.0, 5.0, 10.0, 100.0]

EXPERIMENT = {
    "domains": [{"name": "generic", "grammar": "newswire", "num_docs": 150},
                {"name": "biomed", "grammar": "biomed", "num_docs": 150}],
    "seeds": SEEDS,
    "modes": ["none", "ewc", "er"],
    "grids": {"lam": LAMBDAS},
    "points": [{"mode": "ewc", "lam": 1.0, "use_fisher": False}],
    "base": {"lr": 3e-4, "fisher_min_samples": 64},
    "segment_length": 64,
    "pretrain_steps": 1500,
    "pretrain_lr": 1e-3,
    "stage_steps": 300,
}


def _segments(rng, n, length, vocab):
    return [np.concatenate([[BOS_ID], rng.integers(3, vocab, size=length)]) for _ in range(n)]


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    cfg = harness.ExperimentConfig.from_dict({**EXPERIMENT, "outdir": str(tmp_path_factory.mktemp("exp"))})
    start = time.time()
    root, status = harness.run(cfg)
    elapsed = time.time() - start
    assert status["failed"] == 0
    rows = harness.load_metrics(root)
    by = {}
    for r in rows:
        p = r["point"]
        key = (p["mode"], p.get("lam"), p.get("use_fisher", True))
        by[(key, r["seed"])] = r
    return {"root": root, "rows": rows, "by": by, "elapsed": elapsed}


def _get(exp, seed, mode, lam=None, use_fisher=True):
    return exp["by"][((mode, lam, use_fisher), seed)]


# 1 ---------------------------------------------------------------------------------------

def test_c01_gradient_correctness(acceptance):
    start = time.time()
    cfg = ModelConfig(vocab_size=131, num_layers=4, hidden=64, heads=2, max_len=17, ff_dim=256)
    model = Model(init_checkpoint(cfg, 0))
    rng = np.random.default_rng(0)
    batch = mask_batch(_segments(rng, 2, 16, 131), 0.3, 1, 131)
    analytic = nc.backprop(mlm_forward(model, batch)[0])
    # at least 4 coordinates per tensor, the rest spread by tensor size
    names = list(model.params)
    sizes = np.array([model.params[n].size for n in names])
    extra = rng.multinomial(1000, sizes / sizes.sum())
    coords = {n: rng.choice(model.params[n].size, size=min(model.params[n].size, 4 + k), replace=False)
              for n, k in zip(names, extra)}
    total = sum(len(c) for c in coords.values())
    numeric = nc.finite_diff_grad(lambda: mlm_forward(model, batch)[0].item(), model.params, 1e-5, coords)
    worst = max(float(nc.relative_error(analytic[n].reshape(-1)[coords[n]], numeric[n]).max()) for n in names)
    elapsed = time.time() - start
    ok = total >= 1000 and worst <= 1e-4 and elapsed < 300
    acceptance(1, ok, f"{total} coords, max rel err {worst:.2e}, {elapsed:.0f}s")
    assert ok


# 2 ---------------------------------------------------------------------------------------

def test_c02_fisher_oracle(acceptance):
    cfg = ModelConfig(vocab_size=131, num_layers=4, hidden=64, heads=2, max_len=33, ff_dim=256)
    model = Model(init_checkpoint(cfg, 1))
    samples = fisher_samples(_segments(np.random.default_rng(1), 16, 32, 131), 0.15, 0, 131)
    fisher = fisher_diagonal(model, samples)
    oracle = {n: np.zeros(p.shape) for n, p in model.params.items()}
    for b in samples:
        g = nc.backprop(mlm_forward(model, b)[0] * float(b.target_mask.sum()))
        for n in oracle:
            oracle[n] += g[n] * g[n]
    err = max(float(np.max(np.abs(fisher.values[n] - oracle[n] / 16))) for n in oracle)
    perm = np.random.default_rng(7).permutation(16)
    shuffled = fisher_diagonal(model, [samples[i] for i in perm])
    perm_err = max(float(np.max(np.abs(fisher.values[n] - shuffled.values[n]))) for n in oracle)
    ok = len(samples) == 16 and err <= 1e-10 and perm_err <= 1e-12
    acceptance(2, ok, f"oracle diff {err:.1e}, permutation diff {perm_err:.1e}")
    assert ok


# 3 ---------------------------------------------------------------------------------------

def test_c03_ewc_gradient_and_lambda_zero(acceptance):
    rng = np.random.default_rng(3)
    shapes = {"w": (7, 5), "b": (5,), "e": (3, 4, 2)}
    worst = 0.0
    for _ in range(10):
        fisher = FisherDiagonal({n: rng.exponential(size=s) for n, s in shapes.items()},
                                {n: rng.normal(size=s) for n, s in shapes.items()}, "anchor", 1)
        params = {n: nc.parameter(rng.normal(size=s), n) for n, s in shapes.items()}
        lam = float(rng.uniform(0.0, 100.0))
        grads = nc.backprop(ewc_penalty(params, fisher, lam))
        for n, p in params.items():
            expected = 2 * lam * fisher.values[n] * (p.data - fisher.anchor[n])
            worst = max(worst, float(np.max(np.abs(grads[n] - expected))))

    cfg = ModelConfig(vocab_size=131, num_layers=2, hidden=32, heads=2, max_len=33, ff_dim=64)
    ckpt = init_checkpoint(cfg, 0)
    segs = _segments(np.random.default_rng(4), 40, 32, 131)
    fisher = fisher_diagonal(Model(ckpt), fisher_samples(segs[:8], 0.15, 0, 131))
    a, log_a = train_stage(ckpt, segs, MitigationConfig(mode="none"), 30, seed=11)
    b, log_b = train_stage(ckpt, segs, MitigationConfig(mode="ewc", lam=0.0), 30, seed=11, fisher=fisher)
    identical = a.id == b.id and all(np.array_equal(a.params[n], b.params[n]) for n in a.params) \
        and np.array_equal(log_a.task_losses(), log_b.task_losses())
    ok = worst <= 1e-10 and identical
    acceptance(3, ok, f"max |grad - 2*lam*F*(theta-theta*)| {worst:.1e}, lambda=0 bit-identical: {identical}")
    assert ok


# 4 ---------------------------------------------------------------------------------------

def test_c04_forgetting_and_ewc_recovery(experiment, acceptance):
    lines, ok = [], True
    for s in SEEDS:
        none = _get(experiment, s, "none")
        ewc = _get(experiment, s, "ewc", 1.0)
        a0 = none["loss_before"]["generic"]
        a_none, a_ewc = none["loss_after"]["generic"], ewc["loss_after"]["generic"]
        forget = (a_none - a0) / a0
        recovery = (a_none - a_ewc) / (a_none - a0) if a_none > a0 else float("nan")
        b_rel = abs(ewc["loss_after"]["biomed"] - none["loss_after"]["biomed"]) / none["loss_after"]["biomed"]
        seed_ok = forget >= 0.10 and recovery >= 0.30 and b_rel <= 0.10
        ok &= seed_ok
        lines.append(f"seed {s}: forget {forget:+.1%} recovery {recovery:.1%} B {b_rel:.1%}")
    ok &= experiment["elapsed"] < 1800
    acceptance(4, ok, "; ".join(lines) + f"; run {experiment['elapsed'] / 60:.1f} min")
    assert ok


# 5 ---------------------------------------------------------------------------------------

def test_c05_lambda_monotonicity(experiment, acceptance):
    sweep = json.loads((experiment["root"] / "report.json").read_text())["lambda_sweep"]
    assert sweep["lambdas"] == LAMBDAS
    verdicts = []
    for s in SEEDS:
        forget = [_get(experiment, s, "ewc", lam)["relative_increase"]["generic"] for lam in LAMBDAS]
        target = [_get(experiment, s, "ewc", lam)["loss_after"]["biomed"] for lam in LAMBDAS]
        viol_f = int(np.sum(np.diff(forget) > 0))
        viol_t = int(np.sum(np.diff(target) < 0))
        verdicts.append((viol_f <= 1 and viol_t <= 1, viol_f, viol_t))
    majority = sum(v[0] for v in verdicts) * 2 > len(verdicts)
    ok = majority and sweep["monotone_majority"] == majority
    acceptance(5, ok, "violations (forgetting, B loss) per seed: "
               + ", ".join(f"{vf}/{vt}" for _, vf, vt in verdicts))
    assert ok


# 6 ---------------------------------------------------------------------------------------

def test_c06_lrc_geometry(experiment, acceptance):
    rates = lrc_schedule(3e-4, 2.6, 14)
    rec_err = max(abs(rates[g] - rates[g + 1] / 2.6) / rates[g] for g in range(13))
    top_err = abs(rates[0] - 3e-4 / 2.6 ** 13) / rates[0]

    root = experiment["root"]
    pre = load_checkpoint(root / "pretrain" / "seed-0" / "model.ckpt")
    domains = harness.prepare_domains(harness.ExperimentConfig.from_dict({**EXPERIMENT, "outdir": "."}), root)
    after, _ = train_stage(pre, domains[1].train, MitigationConfig(mode="lrc", rho=10.0, lr=3e-4), 1000, seed=0)
    cos = layerwise_cosine(pre, after).cosine
    ok = rec_err <= 1e-12 and top_err <= 1e-12 and cos[0] > 0.999 and cos[-1] < cos[0]
    acceptance(6, ok, f"recurrence err {rec_err:.1e}; cosine input {cos[0]:.6f} head {cos[-1]:.6f}")
    assert ok


# 7 ---------------------------------------------------------------------------------------

def test_c07_replay_mixing_and_retention(experiment, acceptance):
    rng = np.random.default_rng(0)
    current = _segments(rng, 50, 16, 131)
    fractions = {}
    for ratio in (0.2, 0.5):
        buf = build_replay_buffer(_segments(rng, 20, 16, 131), range(20), 20, ratio)
        fractions[ratio] = float(np.mean([mix_batch(current, buf, 8, rng).replay_fraction for _ in range(10_000)]))
    mix_ok = all(abs(f - r) <= 0.01 for r, f in fractions.items())
    wins = [(_get(experiment, s, "er")["loss_after"]["generic"], _get(experiment, s, "none")["loss_after"]["generic"])
            for s in SEEDS]
    ret_ok = all(er < none for er, none in wins)
    ok = mix_ok and ret_ok
    acceptance(7, ok, "replay fraction " + ", ".join(f"{r}->{f:.4f}" for r, f in fractions.items())
               + "; A loss er/none " + ", ".join(f"{a:.3f}/{b:.3f}" for a, b in wins))
    assert ok


# 8 ---------------------------------------------------------------------------------------

def test_c08_selection_semantics(acceptance):
    rng = np.random.default_rng(8)
    f = rng.exponential(size=100_000)
    n = 1000
    low = sel.select_by_strategy(f, n, "low")
    high = sel.select_by_strategy(f, n, "high")
    srt = np.sort(f)
    low_ok = np.array_equal(np.sort(f[low]), srt[:n])
    high_ok = np.array_equal(np.sort(f[high]), srt[-n:])

    # independent binning oracle: equal-width edges, right edge closed on the last bin
    bins_ok = True
    for num_bins in (5, 10, 50):
        edges = np.linspace(f.min(), f.max(), num_bins + 1)
        which = np.clip(np.searchsorted(edges, f, side="right") - 1, 0, num_bins - 1)
        nonempty = set(np.unique(which))
        picked = sel.select_by_strategy(f, len(nonempty), "uniform", num_bins=num_bins, seed=1)
        bins_ok &= set(which[picked]) == nonempty

    clusters_ok = True
    for seed in range(20):
        labels = rng.integers(0, 7, size=500)
        labels[labels == 3] = 2  # leave one cluster id empty
        k = len(np.unique(labels))
        clusters_ok &= set(labels[sel.cluster_uniform_sample(labels, k, seed)]) == set(labels)
    ok = low_ok and high_ok and bins_ok and clusters_ok
    acceptance(8, ok, f"low {low_ok}, high {high_ok}, bins {bins_ok}, clusters {clusters_ok}")
    assert ok


# 9 ---------------------------------------------------------------------------------------

def test_c09_pca_gmm_numerics(acceptance):
    rng = np.random.default_rng(9)
    X = rng.normal(size=(300, 40)) @ rng.normal(size=(40, 40))
    pca = sel.pca_fit(X, 40)
    eig = np.sort(np.linalg.eigh(np.cov(X, rowvar=False))[0])[::-1]
    pca_err = float(np.max(np.abs(pca.explained_variance - eig)))

    worst_drop = 0.0
    for seed in range(5):
        Y = np.vstack([rng.normal(c, 1.0, size=(80, 5)) for c in (0.0, 1.5, 4.0)])
        g = sel.gmm_fit(Y, 4, max_iters=100, tol=0.0, seed=seed)
        worst_drop = max(worst_drop, float(-np.min(np.diff(g.history))))

    blobs = np.vstack([rng.normal(-5, 0.5, size=(100, 3)), rng.normal(5, 0.5, size=(100, 3))])
    labels = sel.gmm_assign(sel.gmm_fit(blobs, 2, seed=0), blobs)
    separated = len(set(labels[:100])) == 1 and len(set(labels[100:])) == 1 and labels[0] != labels[-1]
    ok = pca_err <= 1e-6 and worst_drop <= 1e-9 and separated
    acceptance(9, ok, f"PCA eigen diff {pca_err:.1e}, worst EM log-lik drop {worst_drop:.1e}, "
                      f"blobs separated {separated}")
    assert ok


# 10 --------------------------------------------------------------------------------------

def test_c10_no_fisher_ablation(experiment, acceptance):
    pairs = []
    for s in SEEDS:
        full = _get(experiment, s, "ewc", 1.0)
        plain = _get(experiment, s, "ewc", 1.0, use_fisher=False)
        pairs.append((np.mean(list(plain["loss_after"].values())), np.mean(list(full["loss_after"].values()))))
    ok = all(p > f for p, f in pairs)
    acceptance(10, ok, "combined loss no-Fisher/Fisher " + ", ".join(f"{p:.3f}/{f:.3f}" for p, f in pairs))
    assert ok


# 11 --------------------------------------------------------------------------------------

TABLE1_BEFORE = {"CoLA": 57.82, "SST-2": 92.09, "MRPC": 86.74, "STS-B": 88.13, "QQP": 87.49, "MNLI": 84.01,
                 "QNLI": 90.79, "RTE": 64.98, "WNLI": 53.52}
TABLE1_AFTER = {"CoLA": 37.78, "SST-2": 89.68, "MRPC": 88.44, "STS-B": 87.40, "QQP": 86.96, "MNLI": 83.19,
                "QNLI": 89.79, "RTE": 60.29, "WNLI": 28.17}
TABLE1_DELTA = {"CoLA": 20.04, "SST-2": 2.41, "MRPC": -1.69, "STS-B": 0.73, "QQP": 0.53, "MNLI": 0.82,
                "QNLI": 1.01, "RTE": 4.69, "WNLI": 25.35}


def test_c11_report_arithmetic(acceptance):
    rep = forgetting_report(TABLE1_BEFORE, TABLE1_AFTER, decimals=2)
    mismatched = {t: (rep.delta[t], TABLE1_DELTA[t]) for t in TABLE1_DELTA if rep.delta[t] != TABLE1_DELTA[t]}
    ok = not mismatched
    detail = "all 9 deltas exact" if ok else \
        "mismatch " + ", ".join(f"{t} computed {c} table {p}" for t, (c, p) in mismatched.items())
    acceptance(11, ok, detail)
    assert ok


# 12 --------------------------------------------------------------------------------------

def test_c12_run_determinism(tmp_path, acceptance, capsys):
    config = {
        "domains": [{"name": "generic", "grammar": "newswire", "num_docs": 30, "tokens_per_doc": 300},
                    {"name": "biomed", "grammar": "biomed", "num_docs": 30, "tokens_per_doc": 300}],
        "model": {"num_layers": 2, "hidden": 32, "heads": 2, "ff_dim": 64},
        "modes": ["none", "ewc", "lrc", "er"],
        "grids": {},
        "base": {"fisher_min_samples": 16, "strategy": "gmm", "pca_dim": 8, "gmm_k": 3},
        "segment_length": 32,
        "pretrain_steps": 60,
        "stage_steps": 30,
        "probe": {"num_docs": 6, "epochs": 3},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    roots = []
    for out in ("first", "second"):
        assert main(["--outdir", str(tmp_path / out), "--log-level", "WARNING", "run", str(path), "--seed", "5"]) == 0
        roots.append(capsys.readouterr().out.strip().splitlines()[-1])
    from pathlib import Path
    a, b = Path(roots[0]), Path(roots[1])
    files = sorted(p.relative_to(a) for p in a.glob("points/*/seed-*/metrics.json")) + [Path("report.json")]
    same = [(a / f).read_bytes() == (b / f).read_bytes() for f in files]
    ok = len(files) == 5 and all(same)
    acceptance(12, ok, f"{sum(same)}/{len(files)} metric JSON files byte-identical")
    assert ok
