import numpy as np
import pytest

from forge import harness, metrics, synth
from forge.errors import InsufficientData, InvalidArgument, UndefinedTask
from forge.panel import Panel


@pytest.fixture(scope="module")
def small():
    return synth.generate(synth.SynthConfig(seed=2, n_bench_donors=4, cells_per_stage=6))


# ---------------------------------------------------------------------------
# splits


def test_splits_are_donor_disjoint_and_complete(small):
    cells = small.cells
    plans = harness.make_splits(cells, n_splits=5, n_test_donors=2, seed=1)
    assert len(plans) == 5
    for p in plans:
        assert not set(cells.donor[p.train_rows]) & set(cells.donor[p.test_rows])
        assert set(p.train_donors) | set(p.test_donors) == set(np.unique(cells.donor))
        np.testing.assert_array_equal(p.test_rows, np.flatnonzero(np.isin(cells.donor, p.test_donors)))


def test_splits_are_deterministic(small):
    a = harness.make_splits(small.cells, n_splits=3, seed=7)
    b = harness.make_splits(small.cells, n_splits=3, seed=7)
    for x, y in zip(a, b):
        assert x.test_donors == y.test_donors
        np.testing.assert_array_equal(x.train_rows, y.train_rows)


def test_split_argument_checks(small):
    with pytest.raises(InvalidArgument):
        harness.make_splits(small.cells, n_test_donors=4)
    with pytest.raises(InvalidArgument):
        harness.make_splits(small.cells, n_splits=0)


def test_train_cap_keeps_stage_proportions():
    stage = np.array(["a"] * 60 + ["b"] * 30 + ["c"] * 10)
    rows = harness.stratified_cap(stage, np.arange(100), 50, np.random.default_rng(0))
    names, counts = np.unique(stage[rows], return_counts=True)
    assert len(rows) == 50 and list(counts) == [30, 15, 5]
    assert len(np.unique(rows)) == 50


# ---------------------------------------------------------------------------
# probes


def test_linear_probe_separable(rng):
    Z = np.vstack([rng.normal(size=(50, 3)) - 3, rng.normal(size=(50, 3)) + 3])
    y = np.repeat(["neg", "pos"], 50)
    probe = harness.fit_probe(Z, y)
    assert metrics.balanced_accuracy(probe.predict(Z), y) == 1.0
    assert metrics.auroc(probe.score(Z), y == "pos") == 1.0


def test_probe_on_noise_is_near_chance(rng):
    Z_tr, Z_te = rng.normal(size=(300, 4)), rng.normal(size=(300, 4))
    y_tr, y_te = rng.integers(0, 2, 300), rng.integers(0, 2, 300)
    probe = harness.fit_probe(Z_tr, y_tr)
    assert abs(metrics.balanced_accuracy(probe.predict(Z_te), y_te) - 0.5) < 0.1


def test_mlp_solves_xor_linear_does_not(rng):
    Z = rng.uniform(-1, 1, size=(400, 2))
    Z = Z[np.min(np.abs(Z), axis=1) > 0.1]
    y = (Z[:, 0] * Z[:, 1] > 0).astype(int)
    mlp = harness.fit_probe(Z, y, "mlp2", seed=0, epochs=400)
    lin = harness.fit_probe(Z, y, "linear")
    assert metrics.balanced_accuracy(mlp.predict(Z), y) >= 0.9
    assert metrics.balanced_accuracy(lin.predict(Z), y) <= 0.7


def test_probe_determinism_and_errors(rng):
    Z, y = rng.normal(size=(40, 3)), rng.integers(0, 3, 40)
    a = harness.fit_probe(Z, y, "mlp3", seed=5, epochs=20)
    b = harness.fit_probe(Z, y, "mlp3", seed=5, epochs=20)
    assert a.to_bytes() == b.to_bytes()
    with pytest.raises(UndefinedTask):
        harness.fit_probe(Z, np.zeros(40))
    with pytest.raises(InvalidArgument):
        harness.fit_probe(Z, y, "forest")
    with pytest.raises(UndefinedTask):
        a.score(Z)


# ---------------------------------------------------------------------------
# pseudotime


def test_pseudotime_on_a_line():
    Z = np.arange(30.0)[:, None]
    pt = harness.donor_local_pseudotime(Z, np.array([0.2]), k_nn=3)
    assert pt.root == 0 and not pt.partial
    np.testing.assert_allclose(pt.values, np.arange(30.0))


def test_pseudotime_root_tie_goes_to_lower_index():
    Z = np.array([[-1.0], [1.0]] + [[v] for v in np.arange(2.0, 14.0)])
    assert harness.donor_local_pseudotime(Z, np.array([0.0]), k_nn=2).root == 0


def test_pseudotime_disconnected_component_is_flagged():
    Z = np.concatenate([np.arange(8.0), 100 + np.arange(8.0)])[:, None]
    pt = harness.donor_local_pseudotime(Z, np.array([0.0]), k_nn=2)
    assert pt.partial
    assert np.all(pt.values[8:] == 8.0)


def test_pseudotime_needs_enough_cells():
    with pytest.raises(InsufficientData):
        harness.donor_local_pseudotime(np.zeros((5, 2)), np.zeros(2), k_nn=10)


def branching_cloud(donor_seed, n_per_edge=60, D=6, sigma=0.03):
    """Stem segment then three diverging branches; depth is the unit-length segment index along the path."""
    rng = np.random.default_rng(donor_seed)
    Q = np.linalg.qr(rng.normal(size=(D, 3)))[0]
    dirs = np.array([[1.0, 0, 0], [0.5, 1, 0], [0.5, -0.5, 1], [0.5, -0.5, -1]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t = rng.uniform(0, 1, n_per_edge)
    pts, depth = [t[:, None] * dirs[0]], [np.zeros(n_per_edge)]
    for b in range(1, 4):
        for seg in (1, 2):
            t = rng.uniform(0, 1, n_per_edge)
            pts.append(dirs[0] + (seg - 1 + t[:, None]) * dirs[b])
            depth.append(np.full(n_per_edge, seg))
    P = np.vstack(pts)
    X = P @ Q.T + sigma * rng.normal(size=(len(P), D)) + rng.normal(scale=0.1, size=D)
    return X, np.concatenate(depth), Q


def test_pseudotime_follows_depth_on_branching_cloud():
    for donor in range(4):
        X, depth, Q = branching_cloud(donor)
        hint = X[depth == 0].mean(axis=0)
        pt = harness.donor_local_pseudotime(X, hint)
        assert not pt.partial
        assert abs(metrics.spearman(pt.values, depth)) >= 0.8


def test_discrete_stage_clusters_are_flagged_partial(default_data):
    # synthetic stages are tight separated clusters, so the within-donor kNN graph splits by stage
    cells = default_data.cells
    Z = cells.features @ default_data.truth.signal_basis
    hint = Z[cells.stage == synth.ROOT].mean(axis=0)
    rows = cells.donor == cells.donor[0]
    pt = harness.donor_local_pseudotime(Z[rows], hint)
    assert pt.partial
    assert np.all(pt.values[cells.stage[rows] == synth.ROOT] < pt.values.max())


# ---------------------------------------------------------------------------
# campaign


def test_self_comparison_has_zero_delta(small):
    plans = harness.make_splits(small.cells, n_splits=6, seed=0)
    methods = [harness.MethodUnderTest("a", "pca", k=5), harness.MethodUnderTest("b", "pca", k=5)]
    rep = harness.run_campaign(methods, small.cells, plans, reference="a",
                               endpoints=("stage_balanced_accuracy",))
    row = rep.paired_row("b", "stage_balanced_accuracy")
    assert row["mean_delta"] == 0.0 and row["p"] == 1.0 and row["q"] == 1.0
    assert rep.coverage()[("b", "stage_balanced_accuracy")] == 6


def test_representation_never_sees_test_rows(small):
    cells = small.cells
    plan = harness.make_splits(cells, n_splits=1, seed=3)[0]
    method = harness.MethodUnderTest("pca", "pca", k=4)
    base = harness.Representation(method).fit(cells.features[plan.train_rows]).fingerprint()
    X = cells.features.copy()
    X[plan.test_rows] += 1e3
    poisoned = cells.with_features(X)
    assert harness.Representation(method).fit(poisoned.features[plan.train_rows]).fingerprint() == base
    a = harness.evaluate_split(method, cells, plan, endpoints=("stage_balanced_accuracy",))
    b = harness.evaluate_split(method, cells, plan, endpoints=("stage_balanced_accuracy",))
    assert a == b


def test_campaign_is_deterministic_and_writes_csv(tmp_path, small):
    plans = harness.make_splits(small.cells, n_splits=2, seed=0)
    methods = [harness.MethodUnderTest("raw", "raw"), harness.MethodUnderTest("pca", "pca", k=4)]
    run = lambda: harness.run_campaign(methods, small.cells, plans, "raw",  # noqa: E731
                                       binary_tasks=small.truth.binary_tasks)
    d1 = run().write(tmp_path / "a")
    d2 = run().write(tmp_path / "b")
    assert d1 == d2 and set(d1) == {"values.csv", "paired.csv", "pooled.csv", "summary.json"}


def test_campaign_argument_checks(small):
    plans = harness.make_splits(small.cells, n_splits=1)
    m = harness.MethodUnderTest("a", "raw")
    with pytest.raises(InvalidArgument):
        harness.run_campaign([m], small.cells, plans, reference="b")
    with pytest.raises(InvalidArgument):
        harness.run_campaign([m, m], small.cells, plans, reference="a")
    with pytest.raises(InvalidArgument):
        harness.MethodUnderTest("h", "let_head")


# ---------------------------------------------------------------------------
# I/O


def test_panel_csv_round_trip(tmp_path, small):
    p = small.external
    harness.write_panel_csv(p, tmp_path / "p.csv")
    back = harness.read_panel_csv(tmp_path / "p.csv", ontology=p.ontology)
    np.testing.assert_array_equal(back.features, p.features)
    np.testing.assert_array_equal(back.stage, p.stage)
    np.testing.assert_array_equal(back.d_target, p.d_target)


def test_panel_csv_without_ontology_uses_depth_gap(tmp_path):
    p = Panel(features=np.eye(3), donor=np.array(["d"] * 3), tissue=np.array(["t"] * 3),
              branch=np.array(["b"] * 3), stage=np.array(["x", "y", "z"]), stage_depth=np.array([0, 1, 3]),
              explicit_target=np.zeros((3, 3)))
    harness.write_panel_csv(p, tmp_path / "p.csv")
    back = harness.read_panel_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.d_target, [[0, 1, 3], [1, 0, 2], [3, 2, 0]])


def test_external_latent_requires_row_id(tmp_path):
    (tmp_path / "bad.csv").write_text("id,z0\na,1\n")
    with pytest.raises(InvalidArgument):
        harness.read_external_latent(tmp_path / "bad.csv")
    (tmp_path / "ok.csv").write_text("row_id,z0,z1\na,1,2\n")
    np.testing.assert_array_equal(harness.read_external_latent(tmp_path / "ok.csv")["a"], [1.0, 2.0])
