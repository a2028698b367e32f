import numpy as np
import pytest

from forge import compaction, harness, operators as ops, synth
from forge.compaction import Endpoint
from forge.errors import InvalidArgument
from forge.let import OptimizerConfig


def factor_assets(tasks, n_factors=4, seed=0, G=32):
    prob = synth.planted_factor_problem(G=G, n_factors=n_factors, tasks=tasks, n_train=400, n_eval=400,
                                        seed=seed)
    head = prob.adaptor()
    Z = head.encode(prob.operator.apply(prob.X_train))
    probes = {t: harness.fit_probe(Z, prob.labels_train[t]) for t in tasks}
    endpoints = [Endpoint(t, prob.labels_eval[t]) for t in tasks]
    return prob, head, probes, endpoints


# ---------------------------------------------------------------------------
# scan


@pytest.fixture(scope="module")
def tiny():
    return synth.generate(synth.SynthConfig(seed=4, G=16, code_dim=4, nuisance_dim=4, cells_per_stage=2,
                                            n_bench_donors=2, n_layers=12, n_heads=8, planted_heads=((2, 5),)))


def test_scan_emits_one_row_per_unit(tiny):
    rows = compaction.scan_heads(tiny.tensor, tiny.internal, tiny.external, k=4, opt=OptimizerConfig(steps=5))
    assert len(rows) == 96
    assert sorted((r.layer, r.head) for r in rows) == list(tiny.tensor.units())
    assert [r.rank for r in rows] == list(range(1, 97))


def test_duplicated_heads_tie_in_unit_order(default_data):
    W = default_data.tensor.weights.copy()
    W[3, 0] = W[1, 2]
    t = ops.WeightTensor(W)
    rows = compaction.scan_heads(t, default_data.internal, default_data.external,
                                 units=[(3, 0), (0, 0), (1, 2)])
    assert [(r.layer, r.head) for r in rows[:2]] == [(1, 2), (3, 0)]
    assert rows[0].score == rows[1].score


def test_scan_is_independent_of_worker_count(tiny):
    units = [(2, 5), (0, 0), (7, 3)]
    kw = dict(k=4, opt=OptimizerConfig(steps=50), units=units)
    a = compaction.scan_heads(tiny.tensor, tiny.internal, tiny.external, workers=1, **kw)
    b = compaction.scan_heads(tiny.tensor, tiny.internal, tiny.external, workers=3, **kw)
    assert a == b


def test_scan_rejects_dimension_mismatch(tiny, default_data):
    with pytest.raises(InvalidArgument):
        compaction.scan_heads(tiny.tensor, default_data.internal, default_data.external)


# ---------------------------------------------------------------------------
# compact weights


def test_single_unit_compact_is_the_head(default_data):
    op = compaction.fit_compact_weights(default_data.tensor, [(1, 2)], default_data.internal)
    assert list(op.meta["alphas"]) == [1.0]
    X = default_data.internal.features
    np.testing.assert_array_equal(op.apply(X), ops.single_head(default_data.tensor, 1, 2).apply(X))


def test_compact_weights_recover_even_split(default_data):
    # each head carries half the signal plus a confound that leaks nuisance into the code space;
    # only alpha_2 = 1 cancels the confound
    M, N = default_data.truth.signal_basis, default_data.truth.nuisance_basis
    E = N @ np.random.default_rng(0).normal(size=(N.shape[1], M.shape[1])) @ M.T
    W = default_data.tensor.weights.copy()
    S = W[1, 2].copy()
    W[2, 1], W[3, 3] = 0.5 * S + E, 0.5 * S - E
    op = compaction.fit_compact_weights(ops.WeightTensor(W), [(2, 1), (3, 3)], default_data.internal, k=8)
    a1, a2 = op.meta["alphas"]
    assert a1 == 1.0 and 0.5 <= a2 / a1 <= 2.0


def test_noise_head_does_not_hurt(default_data):
    t, panel = default_data.tensor, default_data.internal
    single = compaction._relative_loss(ops.single_head(t, 1, 2), panel, 8, 0, compaction.SCAN_OPT, 1e-3)
    op, trace = compaction.fit_compact_weights(t, [(1, 2), (0, 3)], panel, k=8, return_trace=True)
    assert min(v for _, v in trace) <= single + 1e-12
    assert trace[0][1] == single


def test_compact_needs_units(default_data):
    with pytest.raises(InvalidArgument):
        compaction.fit_compact_weights(default_data.tensor, [], default_data.internal)


# ---------------------------------------------------------------------------
# leave-one-out ablation


def test_dead_factor_has_no_impact():
    prob, head, probes, eps = factor_assets({"A": (0, 1)})
    s = prob.operator.arrays["s"].copy()
    s[3] = 0.0
    op = ops.FeatureOperator("low_rank", prob.operator.dim, {**prob.operator.arrays, "s": s})
    table = compaction.ablate_factors_loo(op, head, probes, prob.X_eval, eps)
    assert np.all(table.impact[3] == 0.0)


def test_single_factor_endpoint_concentrates_impact():
    prob, head, probes, eps = factor_assets({"A": (0,)}, n_factors=2)
    table = compaction.ablate_factors_loo(prob.operator, head, probes, prob.X_eval, eps)
    assert table.share([0]) >= 0.95


def test_concentration_curve_and_frozen_assets():
    prob, head, probes, eps = factor_assets({"A": (0, 1), "B": (2,)})
    digest = compaction._frozen_digest(head, probes)
    table = compaction.ablate_factors_loo(prob.operator, head, probes, prob.X_eval, eps)
    assert np.all(np.diff(table.concentration) >= 0) and table.concentration[-1] == pytest.approx(1.0)
    assert table.total_clipped.sum() >= table.total_clipped.max()
    assert table.frozen_digest == digest == compaction._frozen_digest(head, probes)
    assert {r["factor"] for r in table.rows()} == {0, 1, 2, 3}


def test_ablation_requires_factorized_operator(default_data):
    prob, head, probes, eps = factor_assets({"A": (0,)})
    dense = ops.single_head(default_data.tensor, 1, 2)
    with pytest.raises(InvalidArgument):
        compaction.ablate_factors_loo(dense, head, probes, prob.X_eval, eps)


# ---------------------------------------------------------------------------
# subset sweep and core sufficiency


def test_subset_sweep_counts_and_intact():
    prob, head, probes, eps = factor_assets({"A": (0,), "B": (1,)})
    sweep = compaction.subset_sweep(prob.operator, head, probes, [0, 1, 2, 3], prob.X_eval, eps)
    assert len(sweep.subsets) == 15
    assert sweep.values[sweep.subsets.index((0, 1, 2, 3))] == sweep.intact
    assert sweep.best["A"][0] == (0,) and sweep.best["B"][0] == (1,)


def test_subset_sweep_guard():
    prob, head, probes, eps = factor_assets({"A": (0,)}, n_factors=10)
    with pytest.raises(InvalidArgument):
        compaction.subset_sweep(prob.operator, head, probes, range(9), prob.X_eval, eps)
    with pytest.raises(InvalidArgument):
        compaction.subset_sweep(prob.operator, head, probes, [], prob.X_eval, eps)


def test_core_prefixes_are_monotone_on_additive_factors():
    prob, head, probes, eps = factor_assets({"A": (0, 1, 2)})
    chunks = np.array_split(np.arange(len(prob.X_eval)), 4)
    evals = [(prob.X_eval[c], [Endpoint("A", prob.labels_eval["A"][c])]) for c in chunks]
    rows = compaction.core_sufficiency(prob.operator, head, probes, [0, 1, 2, 3], evals)
    means = [r["A_mean"] for r in rows]
    assert all(a <= b for a, b in zip(means, means[1:]))
    assert rows[-1]["A_delta"] == 0.0
    with pytest.raises(InvalidArgument):
        compaction.core_sufficiency(prob.operator, head, probes, [], evals)


def test_factor_loadings_listing():
    prob, *_ = factor_assets({"A": (0,)})
    rows = compaction.factor_loadings(prob.operator, 0, top=5)
    assert len(rows) == 10 and {r["side"] for r in rows} == {"read", "write"}
    reads = [abs(r["loading"]) for r in rows if r["side"] == "read"]
    assert reads == sorted(reads, reverse=True)
