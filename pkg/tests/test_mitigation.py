import numpy as np
import pytest

from forgetkit import numcore as nc
from forgetkit.data import build_replay_buffer, mask_batch
from forgetkit.mitigation import (FisherDiagonal, MitigationConfig, Stage, StageError, StagePlan,
                                  build_artifacts, ewc_penalty, fisher_diagonal, fisher_samples,
                                  lrc_schedule, run_plan, train_stage)
from forgetkit.model import BOS_ID, Model, ModelConfig, init_checkpoint, mlm_forward

SMALL = ModelConfig(vocab_size=40, num_layers=2, hidden=16, heads=2, max_len=24, ff_dim=32)


def _segments(seed, n, length=12, vocab=40):
    rng = np.random.default_rng(seed)
    return [np.concatenate([[BOS_ID], rng.integers(3, vocab, size=length)]) for _ in range(n)]


def _brute_force_fisher(model, samples):
    acc = {n: np.zeros_like(p.data) for n, p in model.params.items()}
    for b in samples:
        loss = mlm_forward(model, b)[0]
        g = nc.backprop(loss * float(b.target_mask.sum()))
        for n in acc:
            acc[n] = acc[n] + g[n] ** 2
    return {n: a / len(samples) for n, a in acc.items()}


# Fisher -------------------------------------------------------------------------------

def test_fisher_matches_brute_force_and_is_order_free():
    model = Model(init_checkpoint(SMALL, 0))
    samples = fisher_samples(_segments(0, 16), 0.3, 1, 40)
    assert len(samples) == 16
    fisher = fisher_diagonal(model, samples)
    oracle = _brute_force_fisher(model, samples)
    for n in oracle:
        np.testing.assert_allclose(fisher.values[n], oracle[n], rtol=0, atol=1e-10)
    perm = np.random.default_rng(3).permutation(16)
    shuffled = fisher_diagonal(model, [samples[i] for i in perm])
    for n in oracle:
        np.testing.assert_allclose(shuffled.values[n], fisher.values[n], rtol=0, atol=1e-12)


def test_fisher_single_sample_is_squared_gradient():
    model = Model(init_checkpoint(SMALL, 1))
    b = mask_batch([_segments(1, 1)[0]], 0.3, 0, 40)
    fisher = fisher_diagonal(model, [b], reduction="mean")
    g = nc.backprop(mlm_forward(model, b)[0])
    for n in g:
        np.testing.assert_array_equal(fisher.values[n], g[n] ** 2)


def test_fisher_non_negative_and_anchor_matches_model():
    ckpt = init_checkpoint(SMALL, 2)
    fisher = fisher_diagonal(Model(ckpt), fisher_samples(_segments(2, 4), 0.3, 0, 40))
    assert all(np.all(v >= 0) for v in fisher.values.values())
    assert fisher.anchor_id == ckpt.id


def test_fisher_needs_samples():
    with pytest.raises(ValueError):
        fisher_diagonal(Model(init_checkpoint(SMALL, 0)), [])


def test_fisher_round_trip(tmp_path):
    model = Model(init_checkpoint(SMALL, 0))
    fisher = fisher_diagonal(model, fisher_samples(_segments(0, 3), 0.3, 0, 40))
    back = FisherDiagonal.load(fisher.save(tmp_path / "f.bin"))
    assert back.anchor_id == fisher.anchor_id and back.num_samples == 3
    for n in fisher.values:
        np.testing.assert_array_equal(back.values[n], fisher.values[n])
        np.testing.assert_array_equal(back.anchor[n], fisher.anchor[n])


# EWC penalty ----------------------------------------------------------------------------

def _random_fisher(rng, shapes):
    return FisherDiagonal({n: rng.exponential(size=s) for n, s in shapes.items()},
                          {n: rng.normal(size=s) for n, s in shapes.items()}, "x", 1)


@pytest.mark.parametrize("seed", range(5))
def test_ewc_penalty_gradient_is_analytic(seed):
    rng = np.random.default_rng(seed)
    shapes = {"a": (3, 4), "b": (5,)}
    fisher = _random_fisher(rng, shapes)
    params = {n: nc.parameter(rng.normal(size=s), n) for n, s in shapes.items()}
    lam = float(rng.uniform(0.1, 10))
    grads = nc.backprop(ewc_penalty(params, fisher, lam))
    for n, p in params.items():
        expected = 2 * lam * fisher.values[n] * (p.data - fisher.anchor[n])
        np.testing.assert_allclose(grads[n], expected, rtol=0, atol=1e-10)


def test_ewc_penalty_is_zero_at_anchor_and_checks_shapes():
    rng = np.random.default_rng(0)
    fisher = _random_fisher(rng, {"a": (2, 2)})
    at_anchor = {"a": nc.parameter(fisher.anchor["a"].copy(), "a")}
    assert ewc_penalty(at_anchor, fisher, 5.0).item() == 0.0
    with pytest.raises(ValueError):
        ewc_penalty({"a": nc.parameter(np.zeros(3), "a")}, fisher, 1.0)


def test_ewc_without_fisher_uses_unit_weights():
    rng = np.random.default_rng(1)
    fisher = _random_fisher(rng, {"a": (4,)})
    p = {"a": nc.parameter(rng.normal(size=4), "a")}
    expected = 2.0 * np.sum((p["a"].data - fisher.anchor["a"]) ** 2)
    assert ewc_penalty(p, fisher, 2.0, use_fisher=False).item() == pytest.approx(expected, rel=1e-14)


def test_lambda_zero_is_bit_identical_to_unmitigated():
    ckpt = init_checkpoint(SMALL, 0)
    segs = _segments(5, 20)
    fisher = fisher_diagonal(Model(ckpt), fisher_samples(segs[:4], 0.3, 0, 40))
    a, log_a = train_stage(ckpt, segs, MitigationConfig(mode="none", batch_size=4), 15, seed=9)
    b, log_b = train_stage(ckpt, segs, MitigationConfig(mode="ewc", lam=0.0, batch_size=4), 15, seed=9,
                           fisher=fisher)
    assert a.id == b.id
    assert np.array_equal(log_a.task_losses(), log_b.task_losses())


def test_huge_lambda_freezes_parameters():
    ckpt = init_checkpoint(SMALL, 0)
    segs = _segments(6, 20)
    fisher = fisher_diagonal(Model(ckpt), fisher_samples(segs[:8], 0.3, 0, 40))
    free, _ = train_stage(ckpt, segs, MitigationConfig(batch_size=4, lr=1e-3), 30, seed=1)
    held, _ = train_stage(ckpt, segs, MitigationConfig(mode="ewc", lam=1e6, batch_size=4, lr=1e-3), 30,
                          seed=1, fisher=fisher)
    drift = lambda c: sum(np.sum((c.params[n] - ckpt.params[n]) ** 2) for n in ckpt.params)
    assert drift(held) < 0.1 * drift(free)


# LRC --------------------------------------------------------------------------------------

def test_lrc_recurrence_and_endpoints():
    rates = lrc_schedule(1e-3, 2.6, 14)
    assert rates[-1] == 1e-3
    assert rates[0] == pytest.approx(1e-3 / 2.6 ** 13, rel=1e-12)
    for g in range(13):
        assert abs(rates[g] - rates[g + 1] / 2.6) <= 1e-12 * rates[g]


def test_lrc_rho_one_is_flat_and_errors():
    assert lrc_schedule(0.01, 1.0, 6) == [0.01] * 6
    with pytest.raises(ValueError):
        lrc_schedule(0.01, 0.5, 6)
    with pytest.raises(ValueError):
        lrc_schedule(0.0, 2.0, 6)


def test_lrc_training_uses_group_rates():
    ckpt = init_checkpoint(SMALL, 0)
    _, log = train_stage(ckpt, _segments(0, 10), MitigationConfig(mode="lrc", rho=4.0, lr=1e-3, batch_size=4),
                         2, seed=0)
    row = log.rows[-1]
    G = SMALL.num_groups
    assert row[f"lr_group_{G - 1}"] == 1e-3
    assert row["lr_group_0"] == pytest.approx(1e-3 / 4.0 ** (G - 1))


# ER / plans --------------------------------------------------------------------------------

def test_er_requires_buffer_and_mixes():
    ckpt = init_checkpoint(SMALL, 0)
    segs = _segments(0, 10)
    with pytest.raises(ValueError):
        train_stage(ckpt, segs, MitigationConfig(mode="er"), 2, seed=0)
    with pytest.raises(ValueError):
        train_stage(ckpt, segs, MitigationConfig(mode="ewc"), 2, seed=0)
    buf = build_replay_buffer(_segments(1, 4), range(4), 4, 0.5)
    out, _ = train_stage(ckpt, segs, MitigationConfig(mode="er", batch_size=4), 3, seed=0, buffer=buf)
    assert out.metadata["parent"] == ckpt.id


def test_build_artifacts_budget_split():
    ckpt = init_checkpoint(SMALL, 0)
    prev = [("a", _segments(0, 30)), ("b", _segments(1, 30))]
    cfg = MitigationConfig(mode="er", fisher_min_samples=10)
    art = build_artifacts(ckpt, prev, _segments(2, 30), cfg, seed=0)
    assert len(art["buffer"]) == 10
    assert all(len(v["chosen_ids"]) == 5 for v in art["selection"].values())
    art = build_artifacts(ckpt, prev, _segments(2, 30), MitigationConfig(mode="ewc", fisher_min_samples=6), 0)
    assert art["fisher"].num_samples == 6


def test_plan_chains_three_stages_and_names_failures():
    init = init_checkpoint(SMALL, 0)
    plan = StagePlan([Stage("s1", "a", _segments(0, 20), MitigationConfig(batch_size=4), 3),
                      Stage("s2", "b", _segments(1, 20), MitigationConfig(mode="ewc", fisher_min_samples=4,
                                                                           batch_size=4), 3),
                      Stage("s3", "c", _segments(2, 20), MitigationConfig(mode="er", fisher_min_samples=4,
                                                                          batch_size=4), 3)],
                     {"a": _segments(3, 5)})
    results = run_plan(plan, 0, init)
    assert [r.stage for _, r in results] == ["s1", "s2", "s3"]
    assert results[1][1].parent_id == results[0][0].id
    assert results[2][1].artifacts["buffer_size"] == 4
    bad = StagePlan([Stage("boom", "a", [], MitigationConfig(), 1)])
    with pytest.raises(StageError) as err:
        run_plan(bad, 0, init)
    assert err.value.stage == "boom"
