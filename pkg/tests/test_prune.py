import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slmkit.matcal import LayerCalibration, damp_and_factor, embed_rows, reconstruction_error, refit_support
from slmkit.prune import (
    GroupKind,
    GroupPartition,
    PruneConfig,
    brute_force_prune,
    gradual_schedule,
    obs_group_score,
    prune_groups,
    prune_heads,
    prune_mlp,
    prune_model,
)
from slmkit.toylm import ModelConfig, count_params, forward, init_model, synth_data

from conftest import random_spd


def calib_of(H):
    return LayerCalibration(dim=H.shape[0], gram=H, n_tokens=3 * H.shape[0])


def instance(seed, d=10, p=4):
    rng = np.random.default_rng(seed)
    return calib_of(random_spd(rng, d)), rng.normal(size=(d, p))


def test_partition_invariants():
    with pytest.raises(ValueError, match="disjoint"):
        GroupPartition(3, ((0,), (0, 1), (2,)))
    with pytest.raises(ValueError, match="disjoint"):
        GroupPartition(3, ((0,), (1,)))
    with pytest.raises(ValueError, match="head_dim"):
        GroupPartition(3, ((0, 1), (2,)), GroupKind.ATTN_HEAD)
    h = GroupPartition.heads(3, 4)
    assert h.rows([0, 2]) == [0, 1, 2, 3, 8, 9, 10, 11]


def test_config_validation():
    with pytest.raises(ValueError, match="n_steps"):
        PruneConfig(k_remove=2, n_steps=3).validate()
    with pytest.raises(ValueError):
        PruneConfig(lambda_rel=0).validate()


def test_obs_score_identity_and_zero():
    W = np.arange(12, dtype=float).reshape(4, 3)
    f = damp_and_factor(calib_of(np.eye(4)), 1e-12)
    assert obs_group_score(f, W, [1]) == pytest.approx(np.sum(W[1] ** 2), rel=1e-9)
    assert obs_group_score(f, W, [0]) == pytest.approx(np.sum(W[0] ** 2), rel=1e-9)  # row 0 is zero except 1,2
    W2 = W.copy()
    W2[2] = 0.0
    assert obs_group_score(f, W2, [2]) == 0.0


def test_obs_score_matches_refit_difference():
    rng = np.random.default_rng(5)
    H = random_spd(rng, 6)
    W = rng.normal(size=(6, 3))
    f = damp_and_factor(calib_of(H), 0.01)
    # in the damped metric A = H + lambda I the full support is exact, so the score is the refit error of S \ {2}
    A = calib_of(f.damped)
    S = [0, 1, 3, 4, 5]
    err = reconstruction_error(A, W, embed_rows(refit_support(A, W, S, lambda_rel=0.0), S, 6))
    assert obs_group_score(f, W, [2]) == pytest.approx(err, rel=1e-7)


def test_obs_score_head_group():
    rng = np.random.default_rng(6)
    H = random_spd(rng, 8)
    W = rng.normal(size=(8, 3))
    f = damp_and_factor(calib_of(H), 0.01)
    A = calib_of(f.damped)
    S = [0, 1, 4, 5, 6, 7]
    err = reconstruction_error(A, W, embed_rows(refit_support(A, W, S, lambda_rel=0.0), S, 8))
    assert obs_group_score(f, W, [2, 3]) == pytest.approx(err, rel=1e-7)


def test_identity_gram_drops_smallest_rows():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(6, 3))
    W[4] *= 0.01
    W[1] *= 0.02
    res = prune_groups(calib_of(np.eye(6)), W, GroupPartition.neurons(6), PruneConfig(k_remove=2))
    assert res.kept == (0, 2, 3, 5)
    assert np.allclose(res.W_hat, W[[0, 2, 3, 5]], atol=1e-12)


def test_k_zero_is_identity():
    calib, W = instance(1)
    res = prune_groups(calib, W, GroupPartition.neurons(10), PruneConfig(k_remove=0))
    assert res.kept == tuple(range(10))
    assert np.allclose(res.W_hat, W, atol=1e-10)
    assert res.objective == pytest.approx(0.0, abs=1e-10)


@given(st.integers(0, 10_000))
def test_result_consistency(seed):
    calib, W = instance(seed, d=8, p=3)
    res = prune_groups(calib, W, GroupPartition.neurons(8), PruneConfig(k_remove=3))
    assert len(res.kept) == 5
    full = embed_rows(res.W_hat, res.kept, 8)
    assert math.isclose(reconstruction_error(calib, W, full), res.objective, rel_tol=1e-8, abs_tol=1e-12)
    assert res.objective <= res.greedy_objective * (1 + 1e-12)
    swaps = [t.objective for t in res.trace if t.phase == "swap"]
    seq = [res.greedy_objective] + swaps
    # a pair exchange logs two steps with the same objective
    assert all(b <= a for a, b in zip(seq, seq[1:]))
    assert seq[-1] == res.objective


@given(st.integers(0, 10_000), st.integers(4, 8), st.integers(1, 3))
def test_identity_gram_equals_brute_force(seed, d, k):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(d, 2))
    c = calib_of(np.eye(d))
    part = GroupPartition.neurons(d)
    a = prune_groups(c, W, part, PruneConfig(k_remove=k))
    b = brute_force_prune(c, W, part, k)
    assert a.kept == b.kept
    assert a.objective == b.objective


def test_brute_force_seed13_is_optimal():
    calib, W = instance(13, d=8, p=3)
    part = GroupPartition.neurons(8)
    bf = brute_force_prune(calib, W, part, 3)
    ours = prune_groups(calib, W, part, PruneConfig(k_remove=3))
    assert bf.objective <= ours.objective * (1 + 1e-12)


def test_brute_force_single_survivor_scan():
    calib, W = instance(4, d=6, p=2)
    part = GroupPartition.neurons(6)
    bf = brute_force_prune(calib, W, part, 5)
    from slmkit.prune import _exact_objective

    errs = [_exact_objective(calib, W, part, [g], 0.01)[0] for g in range(6)]
    assert bf.kept == (int(np.argmin(errs)),)


def test_brute_force_budget():
    calib, W = instance(0, d=30, p=1)
    with pytest.raises(ValueError, match="budget"):
        brute_force_prune(calib, W, GroupPartition.neurons(30), 12)


def test_k_remove_too_large():
    calib, W = instance(0, d=4, p=1)
    with pytest.raises(ValueError):
        prune_groups(calib, W, GroupPartition.neurons(4), PruneConfig(k_remove=4))


def test_fallback_refactorization_matches():
    calib, W = instance(8, d=9, p=3)
    part = GroupPartition.neurons(9)
    a = prune_groups(calib, W, part, PruneConfig(k_remove=4, swap_iters_max=0))
    b = prune_groups(calib, W, part, PruneConfig(k_remove=4, swap_iters_max=0, exact_refit_every_step=True))
    assert a.greedy_kept == b.greedy_kept
    assert a.objective == pytest.approx(b.objective, rel=1e-9)


def test_gradual_schedule():
    assert gradual_schedule(3072, 2) == [1536, 1536]
    assert gradual_schedule(5, 1) == [5]
    assert gradual_schedule(7, 3) == [3, 2, 2]
    with pytest.raises(ValueError):
        gradual_schedule(2, 3)


@given(st.integers(1, 500), st.integers(1, 20))
def test_gradual_schedule_sums(total, steps):
    if steps > total:
        return
    s = gradual_schedule(total, steps)
    assert sum(s) == total and max(s) - min(s) <= 1 and s == sorted(s, reverse=True)


@pytest.fixture(scope="module")
def toy():
    cfg = ModelConfig(vocab_size=64, d_model=16, n_layers=2, n_heads=4, head_dim=4, d_intermediate=24,
                      max_seq_len=24)
    return init_model(cfg, 21), synth_data(0, 20, 3)


def test_prune_mlp_zero_is_noop(toy):
    m, data = toy
    out = prune_mlp(m, 0, 0, data)
    for k, v in m.tensors.items():
        assert np.linalg.norm(out.tensors[k] - v) <= 1e-6 * max(np.linalg.norm(v), 1e-12)


def test_prune_mlp_to_one_neuron(toy):
    m, data = toy
    out = prune_mlp(m, 1, 23, data)
    assert out.d_intermediate(1) == 1
    assert np.all(np.isfinite(forward(out, data.sequences[:3]).logits))


def test_prune_heads_shapes(toy):
    m, data = toy
    out = prune_heads(m, 0, 2, data)
    assert out.n_heads(0) == 2 and out.n_heads(1) == 4
    assert out.layer(0, "attn_q").shape == (16, 8)
    assert out.layer(0, "attn_o").shape == (8, 16)
    assert np.array_equal(prune_heads(m, 0, 0, data).layer(0, "attn_q"), m.layer(0, "attn_q"))


def test_pruned_model_invariants(toy):
    m, data = toy
    out, objs = prune_model(m, "mlp", 8, data)
    out, _ = prune_model(out, "heads", 1, data)
    assert len(objs) == 2 and all(o >= 0 for o in objs)
    assert count_params(out) < count_params(m)
    tok = data.sequences[0]
    full = forward(out, tok).logits
    pre = forward(out, tok[:7])
    suf = forward(out, tok[7:], cache=pre.cache).logits
    assert np.allclose(suf, full[7:], rtol=1e-6, atol=1e-12)
    tok2 = tok.copy()
    tok2[10] = (tok2[10] + 1) % 64
    assert np.array_equal(forward(out, tok2).logits[:10], full[:10])


def test_pruned_model_gradients():
    from conftest import grad_check, tiny_config

    m = init_model(tiny_config(vocab_size=64, max_seq_len=20), 3)
    out = prune_model(m, "mlp", 4, synth_data(0, 4, 2))[0]
    out = prune_model(out, "heads", 1, synth_data(0, 4, 2))[0]
    rng = np.random.default_rng(0)
    tok = rng.integers(0, 64, size=(1, 6))
    worst = grad_check(out, tok, rng.normal(size=(1, 6, 64)), n_coords=2)
    assert max(worst.values()) <= 1e-5, worst
