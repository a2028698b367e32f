import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forge import let, synth
from forge.errors import InvalidArgument, ShapeError
from forge.panel import Panel


def planted_panel(n=36, k=3, D=8, beta0=1.5, seed=0):
    """Panel whose targets are exactly beta0 * arccos distances of a planted k-dim latent."""
    rng = np.random.default_rng(seed)
    Z0 = rng.normal(size=(n, k))
    Z0 /= np.linalg.norm(Z0, axis=1, keepdims=True)
    T = let.latent_distances(Z0, beta0)
    # orthonormal embedding keeps feature-space neighborhoods identical to the latent ones
    Q = np.linalg.qr(rng.normal(size=(D, k)))[0]
    X = Z0 @ Q.T + rng.normal(size=D)
    lab = lambda m: np.array([f"{m}{i % 3}" for i in range(n)])  # noqa: E731
    return Panel(features=X, donor=lab("d"), tissue=np.full(n, "t"), branch=lab("b"),
                 stage=np.array([f"s{i}" for i in range(n)]), stage_depth=np.zeros(n, int),
                 explicit_target=T), Z0


@pytest.fixture(scope="module")
def planted():
    panel, Z0 = planted_panel()
    head = let.train_anchor_head(panel, k=3, alpha=1e-3, seed=0, opt=let.OptimizerConfig(lr=2e-2, steps=3000))
    return panel, head


# ---------------------------------------------------------------------------
# latent distance


def test_latent_distance_examples():
    assert let.latent_distance([0.3, -1.2], [0.3, -1.2]) == 0.0
    assert let.latent_distance([1, 0], [0, 1], beta=2.0) == pytest.approx(np.pi)
    assert let.latent_distance([1, 1], [1, 0]) == pytest.approx(np.pi / 4)


def test_latent_distance_zero_vector():
    with pytest.raises(Exception):
        let.latent_distance([0, 0], [1, 0])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3))
def test_latent_distance_scale_equivariant(seed, c):
    z = np.random.default_rng(seed).normal(size=(2, 4))
    assert let.latent_distance(c * z[0], c * z[1]) == pytest.approx(let.latent_distance(z[0], z[1]), abs=1e-12)


# ---------------------------------------------------------------------------
# anchor training


def test_anchor_recovers_planted_latent(planted):
    panel, head = planted
    assert head.provenance["distance_loss"] <= 1e-3 * np.sum(panel.d_target ** 2)


def test_alpha_zero_disables_reconstruction(monkeypatch):
    panel, _ = planted_panel(n=12)

    def boom(*a, **k):
        raise AssertionError("reconstruction term evaluated")

    monkeypatch.setattr(let, "recon_term", boom)
    monkeypatch.setattr(let, "pinv", boom)
    head = let.train_anchor_head(panel, k=3, alpha=0.0, opt=let.OptimizerConfig(steps=50))
    assert head.provenance["recon_loss"] == 0.0


def test_anchor_training_is_deterministic():
    panel, _ = planted_panel(n=15)
    a = let.train_anchor_head(panel, k=3, seed=4, opt=let.OptimizerConfig(steps=200))
    b = let.train_anchor_head(panel, k=3, seed=4, opt=let.OptimizerConfig(steps=200))
    assert a.to_bytes() == b.to_bytes()


def test_best_so_far_loss_is_monotone():
    panel, _ = planted_panel(n=15)
    trace = []
    head = let.train_anchor_head(panel, k=3, opt=let.OptimizerConfig(lr=0.2, steps=300), trace=trace)
    assert np.all(np.diff(trace) <= 0)
    assert head.provenance["loss"] == trace[-1]


def test_anchor_argument_checks():
    panel, _ = planted_panel(n=6)
    with pytest.raises(InvalidArgument):
        let.train_anchor_head(panel, k=1)
    with pytest.raises(InvalidArgument):
        let.train_anchor_head(panel, k=5)


# ---------------------------------------------------------------------------
# cell and hybrid objectives


def test_cell_defaults_and_sweeps():
    assert let.CELL_DEFAULTS == {"w_stage": 1.0, "w_local": 0.1, "w_recon": 0.08, "w_cls": 0.4}
    assert let.CONSERVATIVE_SWEEP == {"lambda_topo": (0.005, 0.01, 0.02, 0.03), "lambda_compact": 0.0}


def test_cell_loss_reduces_to_centroid_anchor_objective(rng):
    X = rng.normal(size=(20, 6))
    stage = np.repeat(list("abcde"), 4)
    S = rng.uniform(1, 3, size=(5, 5))
    S = np.triu(S, 1) + np.triu(S, 1).T
    names = np.array(list("abcde"))
    target = lambda nm: S[np.ix_(np.searchsorted(names, nm), np.searchsorted(names, nm))]  # noqa: E731
    params = {"W": rng.normal(size=(3, 6)), "b": rng.normal(size=6), "log_beta": np.float64(0.2)}
    batch = let.Batch(X=X, stage=stage, stage_target=target)
    value, _, _ = let.cell_loss(params, batch, {"w_stage": 1.0, "w_local": 0, "w_recon": 0, "w_cls": 0})
    Z = (X - params["b"]) @ params["W"].T
    M = np.array([Z[stage == s].mean(0) for s in names])
    expect, _, _ = let.distance_term(M, S, 0.2)
    assert value == pytest.approx(expect, rel=1e-12)


def test_stage_cap_sampling():
    stage = np.array(["big"] * 700 + ["small"] * 40)
    a = let.stage_balanced_sample(stage, 500, np.random.default_rng(3))
    b = let.stage_balanced_sample(stage, 500, np.random.default_rng(3))
    assert np.sum(stage[a] == "big") == 500 and np.sum(stage[a] == "small") == 40
    np.testing.assert_array_equal(a, b)


def test_compactness_zero_at_centroids(rng):
    Z = np.repeat(rng.normal(size=(3, 4)), 5, axis=0)
    value, grad = let.compact_term(Z, np.repeat([0, 1, 2], 5))
    assert value == pytest.approx(0.0, abs=1e-24)
    assert np.allclose(grad, 0.0)


@pytest.fixture(scope="module")
def small_cells():
    d = synth.generate(synth.SynthConfig(seed=1, n_bench_donors=2, cells_per_stage=6))
    return d


def test_hybrid_with_zero_lambdas_equals_cell_head(small_cells):
    cells = small_cells.cells
    ref = let.train_anchor_head(small_cells.internal, k=4, opt=let.OptimizerConfig(steps=100)).freeze()
    kw = dict(k=4, epochs=2, batch=64, cap_per_stage=30, seed=2)
    cell = let.train_cell_head(cells, **kw)
    hybrid = let.train_hybrid_head(cells, ref, small_cells.internal, 0.0, 0.0, **kw)
    np.testing.assert_array_equal(cell.W, hybrid.W)
    np.testing.assert_array_equal(cell.b, hybrid.b)
    assert cell.log_beta == hybrid.log_beta


def test_hybrid_requires_frozen_reference(small_cells):
    ref = let.train_anchor_head(small_cells.internal, k=4, opt=let.OptimizerConfig(steps=10))
    with pytest.raises(InvalidArgument):
        let.train_hybrid_head(small_cells.cells, ref, small_cells.internal, k=4, epochs=1, batch=32)


def test_cell_training_rejects_oversized_batch(small_cells):
    with pytest.raises(InvalidArgument):
        let.train_cell_head(small_cells.cells, batch=10_000, epochs=1)


def test_selection_score_examples():
    assert let.hybrid_selection_score(1, 1, 1, 1, 0) == pytest.approx(1.90)
    assert let.hybrid_selection_score(0, 0, 0, 0, 0) == 0
    # 0.632 + 0.22775 + 0.21275 + 0.0148 - 0.0636
    assert let.hybrid_selection_score(0.632, 0.911, 0.851, 0.037, 0.318) == pytest.approx(1.0237, abs=1e-12)
    with pytest.raises(InvalidArgument):
        let.hybrid_selection_score(1, None, 1, 1, 1)


# ---------------------------------------------------------------------------
# gate and transfer


def test_gate_on_planted_panel(planted):
    panel, head = planted
    g = let.gate(head, panel, n_perm=1999)
    assert g.trustworthiness >= 0.99
    assert min(g.corr_random, g.corr_donor, g.corr_clade) >= 0.95
    assert g.blocked_p == 0.0005 and g.passed


def test_gate_is_deterministic(planted):
    panel, head = planted
    assert let.gate(head, panel, n_perm=99, seed=3) == let.gate(head, panel, n_perm=99, seed=3)


def test_gate_fails_on_shuffled_targets(planted):
    panel, head = planted
    fails = 0
    for s in range(10):
        perm = np.random.default_rng(s).permutation(panel.n)
        shuffled = panel.with_labels(explicit_target=panel.d_target[np.ix_(perm, perm)])
        fails += let.gate(head, shuffled, n_perm=199, seed=s).blocked_p > 0.05
    assert fails >= 9


def test_transfer_latent_and_order_invariance(planted):
    panel, head = planted
    frozen = head.freeze()
    Z, rep = let.transfer(frozen, panel, n_perm=199)
    np.testing.assert_array_equal(Z, head.encode(panel.features))
    perm = np.random.default_rng(0).permutation(panel.n)
    _, rep2 = let.transfer(frozen, panel.subset(perm), n_perm=199)
    assert rep == rep2


def test_transfer_requires_frozen_head_and_matching_dim(planted):
    panel, head = planted
    with pytest.raises(InvalidArgument):
        let.transfer(head, panel)
    with pytest.raises(ShapeError):
        let.transfer(head.freeze(), panel.with_features(panel.features[:, :5]))


def test_transfer_leaves_head_bytes_unchanged(planted):
    panel, head = planted
    frozen = head.freeze()
    before = frozen.to_bytes()
    for _ in range(3):
        let.transfer(frozen, panel, n_perm=19)
    assert frozen.to_bytes() == before


def test_head_round_trip(tmp_path, planted):
    panel, head = planted
    frozen = head.freeze(let.gate(head, panel, n_perm=19))
    frozen.save(tmp_path / "h.fgc")
    back = let.LetHead.load(tmp_path / "h.fgc")
    assert back.to_bytes() == frozen.to_bytes()
    assert back.gate == frozen.gate and back.frozen


def test_head_parameters_are_read_only(planted):
    _, head = planted
    with pytest.raises(ValueError):
        head.W[0, 0] = 1.0
