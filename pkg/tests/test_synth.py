import itertools

import numpy as np
import pytest

from forge import compaction, let, operators as ops, synth
from forge.errors import InvalidArgument


@pytest.fixture(scope="module")
def quiet():
    return synth.generate(synth.SynthConfig(seed=3, noise_sigma=0.0))


def test_config_invariants():
    for bad in (dict(planted_heads=()), dict(G=8), dict(noise_sigma=-1.0), dict(n_donors=1),
                dict(planted_heads=((9, 0),))):
        with pytest.raises(InvalidArgument):
            synth.SynthConfig(**bad)


def test_config_dict_round_trip():
    cfg = synth.SynthConfig(seed=5, planted_heads=((0, 1), (2, 3)))
    assert synth.SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_oracle_stage_distance_examples():
    tree = synth.build_tree(3, 3)
    assert synth.oracle_stage_distance("b0_d2", "b0_d2", tree) == 0
    assert synth.oracle_stage_distance("b1_d1", "b1_d2", tree) == 1
    assert synth.oracle_stage_distance("b0_d1", "b2_d1", tree) == 2  # siblings under the root
    assert synth.oracle_stage_distance("b0_d3", "b1_d3", tree) == 6
    with pytest.raises(InvalidArgument):
        synth.oracle_stage_distance("stem", "nowhere", tree)


def test_tree_metric_four_point_condition():
    onto = synth.tree_ontology(synth.build_tree(3, 3))
    D = onto.dist
    for i, j, k, l in itertools.combinations(range(len(D)), 4):
        s = sorted([D[i, j] + D[k, l], D[i, k] + D[j, l], D[i, l] + D[j, k]])
        assert s[1] == s[2]


def test_tree_branchpoint_count():
    assert synth.build_tree(3, 3).n_branchpoints == 1
    assert synth.build_tree(1, 4).n_branchpoints == 0


def test_same_stage_anchors_have_zero_target(default_data):
    p = default_data.internal
    D = p.d_target
    same = p.stage[:, None] == p.stage[None, :]
    assert np.all(D[same] == 0) and np.all(D[~same] > 0)


def test_cohorts_use_disjoint_donors(default_data):
    d = default_data
    internal, external, bench = set(d.internal.donor), set(d.external.donor), set(d.cells.donor)
    assert not internal & external and not internal & bench and not external & bench
    assert len(internal) == d.config.n_donors and len(external) == d.config.n_external_donors


def test_external_panel_has_an_unseen_tissue(default_data):
    assert set(default_data.external.tissue) - set(default_data.internal.tissue)


def test_regeneration_is_byte_identical():
    cfg = synth.SynthConfig(seed=11, cells_per_stage=4, n_bench_donors=2)
    a, b = synth.generate(cfg), synth.generate(cfg)
    assert a.tensor.weights.tobytes() == b.tensor.weights.tobytes()
    for name in ("cells", "internal", "external"):
        pa, pb = getattr(a, name), getattr(b, name)
        assert pa.features.tobytes() == pb.features.tobytes()
        np.testing.assert_array_equal(pa.row_id, pb.row_id)


def test_planted_head_has_planted_rank(default_data):
    l, h = default_data.truth.planted_heads[0]
    A = default_data.tensor.head(l, h)
    assert np.linalg.matrix_rank(A, tol=1e-8) == default_data.truth.planted_rank


def test_noise_free_planted_head_fits_targets(quiet):
    l, h = quiet.truth.planted_heads[0]
    op = ops.single_head(quiet.tensor, l, h)
    panel = quiet.internal.with_features(op.apply(quiet.internal.features))
    # the best fit sits near the flat limit (large beta), so the optimizer needs room to grow log_beta
    head = let.train_anchor_head(panel, k=quiet.config.code_dim, opt=let.OptimizerConfig(lr=0.1, steps=5000))
    assert head.provenance["distance_loss"] <= 1e-3 * np.sum(panel.d_target ** 2)


def test_noise_free_scan_ranks_planted_head_first(quiet):
    rows = compaction.scan_heads(quiet.tensor, quiet.internal, quiet.external, k=quiet.config.code_dim)
    assert (rows[0].layer, rows[0].head) == quiet.truth.planted_heads[0]


def test_shuffle_stages_keeps_features(default_data):
    p = synth.shuffle_stages(default_data.internal, seed=0)
    np.testing.assert_array_equal(p.features, default_data.internal.features)
    assert sorted(p.stage) == sorted(default_data.internal.stage)
    assert np.any(p.stage != default_data.internal.stage)


def test_factor_problem_labels_follow_planted_factors():
    prob = synth.planted_factor_problem(G=32, n_factors=4, n_train=200, n_eval=100, noise_sigma=0.0)
    S = prob.X_train @ prob.read_basis
    np.testing.assert_array_equal(prob.labels_train["A"], (S[:, 0] + S[:, 1] > 0).astype(int))
    with pytest.raises(InvalidArgument):
        synth.planted_factor_problem(G=16, n_factors=10)
