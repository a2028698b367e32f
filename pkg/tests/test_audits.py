import numpy as np
import pytest

from forge import audits, synth
from forge.errors import DegenerateAxis, DegenerateGeometry, InvalidArgument, NumericalError, UndefinedTask
from forge.let import LetHead


def rippled_plane(rng, n=300, span=40.0, amplitude=1.0, cycles=3.0):
    # a 2:1 rectangle pins the in-plane principal axes, so the ripple runs along PC1
    P = rng.uniform(0, span, size=(n, 2)) * [1.0, 0.5]
    z = amplitude * np.sin(2 * np.pi * cycles * P[:, 0] / span)
    return np.column_stack([P, z])


# ---------------------------------------------------------------------------
# flatness and ripple


def test_planted_ripple_on_a_plane(rng):
    rep = audits.flatness_ripple_3d(rippled_plane(rng), n_perm=199)
    assert rep.plane_var_fraction >= 0.99
    assert rep.sinusoid_r2 >= 0.9 and rep.sinusoid_p <= 0.005
    assert rep.sinusoid_cycles == pytest.approx(3.0, rel=0.1)


def test_gaussian_cloud_has_no_ripple():
    passes = sum(audits.flatness_ripple_3d(np.random.default_rng(s).normal(size=(120, 3)), n_perm=99,
                                           seed=s).sinusoid_p > 0.05 for s in range(20))
    assert passes >= 17


def test_coplanar_points_are_fully_planar(rng):
    X = np.column_stack([rng.normal(size=(50, 2)), np.zeros(50)])
    assert audits.flatness_ripple_3d(X, n_perm=9).plane_var_fraction == 1.0


def test_flatness_input_checks(rng):
    with pytest.raises(InvalidArgument):
        audits.flatness_ripple_3d(rng.normal(size=(20, 3)))
    line = np.outer(np.arange(40.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometry):
        audits.flatness_ripple_3d(line)


def test_residual_axis_scan_null_and_planted(rng):
    n = 400
    P = rng.uniform(-10, 10, size=(n, 2)) * [1.5, 1.0]
    null = np.column_stack([P, rng.normal(size=(n, 3))])
    assert not any(r["significant"] for r in audits.latent_ripple_scan(null, n_perm=199))
    ripple = 2.0 * np.sin(2 * np.pi * 3 * P[:, 0] / 30.0)
    planted = np.column_stack([P, ripple, 0.3 * rng.normal(size=(n, 2))])
    rows = audits.latent_ripple_scan(planted, n_perm=199)
    assert [r["axis"] for r in rows if r["significant"]] == [3]
    assert audits.latent_ripple_scan(P) == []


# ---------------------------------------------------------------------------
# separation lens


@pytest.fixture
def lens_data(rng):
    n = 400
    y = rng.integers(0, 2, n)
    Z = rng.normal(size=(n, 6)) * [5, 4, 3, 2, 1, 0.5]
    Z[:, 3] += 3.0 * (2 * y - 1)
    return Z, Z[:, :3].copy(), y


def test_lens_reveals_hidden_axis(lens_data):
    Z, D, y = lens_data
    res = audits.separation_lens(Z, D, y)
    assert res.auroc_after > res.auroc_before
    assert res.coords[:, :2].tobytes() == D[:, :2].tobytes()
    assert res.coords[:, 2].std() == pytest.approx(D[:, 2].std())


def test_lens_with_random_labels(lens_data, rng):
    Z, D, _ = lens_data
    res = audits.separation_lens(Z, D, rng.integers(0, 2, len(Z)))
    assert abs(res.auroc_after - 0.5) <= 0.1


def test_lens_degenerate_cases(lens_data):
    Z, D, y = lens_data
    with pytest.raises(DegenerateAxis):
        audits.separation_lens(Z, D, y, lam=1e15)
    with pytest.raises(UndefinedTask):
        audits.separation_lens(Z, D, np.zeros(len(Z)))


# ---------------------------------------------------------------------------
# interventions


@pytest.fixture
def groups_setup(rng):
    D, k = 6, 3
    centers = {"a": np.zeros(D), "b": 4.0 * np.eye(D)[0], "c": 4.0 * np.eye(D)[1]}
    X = np.vstack([c + rng.normal(size=(40, D)) for c in centers.values()])
    groups = np.repeat(list(centers), 40)
    head = LetHead(W=np.eye(k, D), b=np.zeros(D), log_beta=0.0, variant="anchor", hyper={}, frozen=True)
    return head, X, groups


def test_intervention_moves_source_to_target(groups_setup):
    head, X, groups = groups_setup
    res = audits.latent_intervention(head, X, groups, "a", "b", n_perm=999)
    assert res.rho >= 0.9 and res.p <= 0.01
    assert res.target_fraction[-1] > res.target_fraction[0]


def test_intervention_start_is_baseline_rate(groups_setup):
    head, X, groups = groups_setup
    res = audits.latent_intervention(head, X, groups, "a", "b", n_perm=9)
    rec = head.decode(head.encode(X))
    names = np.array(["a", "b", "c"])
    cents = np.array([rec[groups == g].mean(0) for g in names])
    src = rec[groups == "a"]
    assigned = names[np.argmin(((src[:, None] - cents[None]) ** 2).sum(-1), axis=1)]
    assert res.target_fraction[0] == np.mean(assigned == "b")


def test_intervention_start_ignores_target_choice(groups_setup):
    head, X, groups = groups_setup
    depth = {"a": 0, "b": 1, "c": 2}
    rb = audits.latent_intervention(head, X, groups, "a", "b", depth=depth, n_perm=9)
    rc = audits.latent_intervention(head, X, groups, "a", "c", depth=depth, n_perm=9)
    assert rb.mean_depth[0] == rc.mean_depth[0]


def test_zero_direction_is_not_significant(groups_setup):
    head, X, groups = groups_setup
    res = audits.latent_intervention(head, X, groups, "b", "b", source_group="a", n_perm=9)
    assert np.all(res.target_fraction == res.target_fraction[0])
    assert np.isnan(res.rho) and res.p == 1.0


def test_intervention_errors(groups_setup):
    head, X, groups = groups_setup
    with pytest.raises(InvalidArgument):
        audits.latent_intervention(head, X, groups, "a", "zz")
    with pytest.raises(InvalidArgument):
        audits.latent_intervention(head, X, groups, "a", "b", centroids="median")
    flat = LetHead(W=np.zeros((3, 6)), b=np.zeros(6), log_beta=0.0, variant="anchor", hyper={}, frozen=True)
    with pytest.raises(NumericalError):
        audits.latent_intervention(flat, X, groups, "a", "b")


# ---------------------------------------------------------------------------
# topology


def test_star_topology():
    Z = np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1]], dtype=float)
    rep = audits.branch_topology(Z, ["stem", "e", "w", "n", "s"], root="stem")
    assert rep.root_degree == 4 and rep.branchpoints == 1 and rep.reachability == 1.0


def test_path_topology():
    Z = np.arange(6.0)[:, None] ** 1.1
    rep = audits.branch_topology(Z, [f"s{i}" for i in range(6)], root="s0", k_nn=2)
    assert rep.branchpoints == 0 and rep.root_degree == 1


def test_synthetic_tree_branchpoints(default_data):
    cells = default_data.cells
    Z = cells.features @ default_data.truth.signal_basis
    rep = audits.branch_topology(Z, cells.stage, root=synth.ROOT, branch_of=default_data.truth.branch)
    assert abs(rep.branchpoints - default_data.truth.tree.n_branchpoints) <= 1
    assert rep.first_hop_diversity == default_data.config.n_branches


def test_topology_rigid_invariance(default_data, rng):
    cells = default_data.cells
    Z = cells.features @ default_data.truth.signal_basis
    Q = np.linalg.qr(rng.normal(size=(Z.shape[1], Z.shape[1])))[0]
    a = audits.branch_topology(Z, cells.stage, root=synth.ROOT)
    b = audits.branch_topology(Z @ Q + 3.0, cells.stage, root=synth.ROOT)
    assert a == b


def test_topology_errors():
    with pytest.raises(InvalidArgument):
        audits.branch_topology(np.zeros((2, 2)), ["a", "b"], root="a")
    with pytest.raises(InvalidArgument):
        audits.branch_topology(np.eye(3), ["a", "b", "c"], root="stem")


# ---------------------------------------------------------------------------
# dimension audit and composite axis


def test_dimension_audit_cases(rng):
    n = 300
    depth = rng.integers(0, 6, n)
    pos = rng.integers(0, 2, n).astype(bool)
    Z = rng.normal(size=(n, 5))
    Z[:, 0] = depth
    Z[:, 3] += 3.0 * pos
    out = audits.dimension_audit(Z, depth=depth, binary={"sub": (np.ones(n, bool), pos)})
    assert out["axes"][0]["abs_rho_depth"] == 1.0
    assert int(np.argmax([r["auroc_sub"] for r in out["axes"]])) == 3
    Q = np.linalg.qr(rng.normal(size=(n, 4)) - rng.normal(size=(n, 4)).mean(0))[0]
    Q -= Q.mean(0)
    Q = np.linalg.qr(Q)[0]
    assert audits.dimension_audit(Q)["offdiag_abs_corr"] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidArgument):
        audits.dimension_audit(Z[:, :1])


def standardize(v):
    return (v - v.mean()) / v.std()


def test_composite_axis_limits(rng):
    Z = rng.normal(size=(200, 4))
    t = standardize(Z @ np.array([1.0, -2.0, 0.5, 0.0]))
    res = audits.composite_axis(Z, t, depth=t, lam=1e-10, n_perm=99)
    assert res.rho_composite == pytest.approx(1.0)
    big = audits.composite_axis(Z, t, depth=t, lam=1e12, n_perm=99)
    assert np.linalg.norm(big.weights) < 1e-8
    with pytest.raises(InvalidArgument):
        audits.composite_axis(Z, t + 1.0, depth=t)


def test_distributed_depth_beats_single_axis(rng):
    n = 400
    depth = rng.integers(0, 6, n).astype(float)
    Z = np.column_stack([depth + 2.5 * rng.normal(size=n) for _ in range(3)] + [rng.normal(size=(n, 2))])
    comp = audits.composite_axis(Z, standardize(depth), depth, n_perm=199)
    best_single = max(r["abs_rho_depth"] for r in audits.dimension_audit(Z, depth=depth)["axes"])
    assert comp.rho_depth > best_single
    assert comp.p <= 0.01
