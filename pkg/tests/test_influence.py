from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datadrop import ihvp, model, persist
from datadrop.data import Dataset, synth_blobs
from datadrop.ihvp import IhvpConfig
from datadrop.influence import (InfluenceError, InfluenceReport, InfluenceScore, influence_column,
                                influence_pair, naive_totals, s_vector, score_all,
                                select_unfavorable, train_grads)
from datadrop.model import ModelSpec, Sample
from datadrop.trainer import train_full_batch

from conftest import make_dataset


def logistic_instance(n=20, k=5, seed=0, l2=0.01):
    spec = ModelSpec("logistic", 3, 2, l2_reg=l2)
    tr, _ = synth_blobs(n, 3, 2, 2.0, 0.1, seed)
    va, _ = synth_blobs(max(k, 2), 3, 2, 2.0, 0.0, seed + 1, center_seed=seed, id_offset=1000)
    va = va.subset(np.arange(k))
    params = train_full_batch(spec, tr, tol=1e-10).params
    return spec, params, tr, va


def report_of(totals):
    scores = [InfluenceScore(i, t) for i, t in enumerate(totals)]
    return InfluenceReport(scores, 1, np.zeros(1), IhvpConfig(), "x")


# -- influence_pair ----------------------------------------------------------------

def test_pair_arithmetic():
    assert influence_pair([1.0, 2.0], [3.0, -1.0]) == -1.0
    assert influence_pair([1.0, 2.0], [0.0, 0.0]) == 0.0
    assert influence_pair([1.0, 1.0], [1.0, -1.0]) == 0.0


def test_pair_length_mismatch():
    with pytest.raises(ValueError):
        influence_pair([1.0, 2.0], [1.0, 2.0, 3.0])


def test_column_matches_pairs_bitwise():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(12, 7))
    s = rng.normal(size=7)
    col = influence_column(s, G)
    assert all(col[i] == influence_pair(s, G[i]) for i in range(12))


# -- s_vector ---------------------------------------------------------------------

def test_s_vector_zero_when_validation_fit():
    spec = ModelSpec("linear-mse", 2, 1, fit_bias=False)
    tr = make_dataset([[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0])
    res = s_vector(spec, np.array([1.0, 2.0]), tr, Sample(np.array([2.0, 3.0]), 8.0), IhvpConfig())
    assert np.array_equal(res.solution, np.zeros(2))


def test_s_vector_identity_hessian():
    # two orthonormal rows: mean Hessian is I/2; with damping 1/2 the system is I
    spec = ModelSpec("linear-mse", 2, 1, fit_bias=False)
    tr = make_dataset([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
    w = np.array([0.3, -0.2])
    val = Sample(np.array([1.0, 2.0]), 0.5)
    g = model.per_sample_grads(spec, w, val.features[None], [val.label])[0]
    res = s_vector(spec, w, tr, val, IhvpConfig(damping=0.5))
    np.testing.assert_allclose(res.solution, g, rtol=1e-14)


def test_s_vector_matches_dense_solve():
    spec, params, tr, va = logistic_instance()
    cfg = IhvpConfig(damping=0.01)
    H = model.dense_hessian(spec, params, tr.features, tr.labels, cfg.damping)
    for j in range(len(va)):
        g = model.per_sample_grads(spec, params, va.features[j:j + 1], va.labels[j:j + 1])[0]
        ref = np.linalg.solve(H, g)
        got = s_vector(spec, params, tr, va[j], cfg).solution
        assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-5


# -- score_all -------------------------------------------------------------------

def test_single_pair_composition():
    # H + lambda*I = I, s = grad L(x_j) = [1, 0], grad L(x) = [1, 0] -> score -1
    spec = ModelSpec("linear-mse", 2, 1, fit_bias=False)
    tr = make_dataset([[1.0, 0.0]], [-1.0])
    va = make_dataset([[1.0, 0.0]], [-1.0])
    w = np.zeros(2)
    rep = score_all(spec, w, tr, va, IhvpConfig(damping=0.0))
    # the rank-one Hessian is singular along e2, but the gradient lives on e1
    assert rep.totals.tolist() == [-1.0]
    assert rep.ihvp_solve_count == 1


def test_duplicates_score_identically():
    spec, params, tr, va = logistic_instance()
    X = np.vstack([tr.features, tr.features[3:4]])
    y = np.append(tr.labels, tr.labels[3])
    dup = Dataset(X, y, np.arange(len(X)))
    rep = score_all(spec, params, dup, va, IhvpConfig())
    assert rep.totals[3] == rep.totals[-1]


def test_totals_equal_sum_of_per_validation():
    spec, params, tr, va = logistic_instance()
    rep = score_all(spec, params, tr, va, IhvpConfig())
    for s in rep.scores:
        assert abs(s.total - s.per_validation.sum()) <= 1e-12 * max(abs(s.total), 1e-300) + 1e-15
    assert sorted(rep.ids.tolist()) == tr.ids.tolist()


def test_loop_order_equivalence_is_bitwise():
    spec, params, tr, va = logistic_instance()
    rep, S = score_all(spec, params, tr, va, IhvpConfig(), return_s_vectors=True)
    G = train_grads(spec, params, tr)
    assert np.array_equal(rep.totals, naive_totals(S, G))


@pytest.mark.parametrize("k", [1, 5, 20])
def test_solve_count_equals_k(monkeypatch, k):
    spec, params, tr, va = logistic_instance(k=k)
    calls = []
    real = ihvp.solve

    def counting(*a, **kw):
        calls.append(1)
        return real(*a, **kw)

    monkeypatch.setattr(ihvp, "solve", counting)
    rep = score_all(spec, params, tr, va, IhvpConfig())
    assert len(calls) == k == rep.ihvp_solve_count == rep.k


def test_workers_and_cache_do_not_change_result():
    spec, params, tr, va = logistic_instance(k=8)
    base = score_all(spec, params, tr, va, IhvpConfig())
    for kw in (dict(workers=4), dict(cache_train_grads=False), dict(keep_per_validation=False)):
        assert np.array_equal(score_all(spec, params, tr, va, IhvpConfig(), **kw).totals, base.totals)


def test_unrecovered_divergence_aborts_with_partial_report():
    spec, params, tr, va = logistic_instance()
    cfg = IhvpConfig(method="lissa", lissa_scale=1e-3, lissa_depth=50, cg_fallback=False)
    with pytest.raises(InfluenceError) as info:
        score_all(spec, params, tr, va, cfg)
    assert info.value.report is not None and info.value.report.k >= 1


def test_lissa_divergence_recovered_by_cg():
    spec, params, tr, va = logistic_instance()
    cfg = IhvpConfig(method="lissa", lissa_scale=1e-3, lissa_depth=50)
    rep = score_all(spec, params, tr, va, cfg)
    assert set(rep.methods_used) == {"cg"}
    np.testing.assert_allclose(rep.totals, score_all(spec, params, tr, va, IhvpConfig()).totals,
                               rtol=1e-6, atol=1e-10)



def test_report_round_trip(tmp_path):
    spec, params, tr, va = logistic_instance()
    rep = score_all(spec, params, tr, va, IhvpConfig())
    path = tmp_path / "influence.jsonl"
    persist.save_report(path, rep)
    back = persist.load_report(path)
    assert np.array_equal(back.totals, rep.totals)
    assert back.ihvp_solve_count == rep.ihvp_solve_count
    assert back.model_hash == rep.model_hash and back.config_echo == rep.config_echo
    assert np.array_equal(back.scores[2].per_validation, rep.scores[2].per_validation)


# -- select_unfavorable -------------------------------------------------------------

def test_select_strict_inequality():
    assert select_unfavorable(report_of([0.5, -0.2, 0.0])) == {0}
    assert select_unfavorable(report_of([-1.0, -2.0])) == set()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40))
def test_select_matches_definition(totals):
    assert select_unfavorable(report_of(totals)) == {i for i, t in enumerate(totals) if t > 0}
