import numpy as np
import pytest

from spfactor.simulation import (
    Sim1Config,
    Sim2Config,
    generate_sim1,
    generate_sim2,
    inferior_nasal_cells,
    model_spec_for,
    run_experiment,
    visual_field_cells,
    visual_field_structure,
)


def test_lattice_has_52_cells():
    cells = visual_field_cells()
    assert len(cells) == 52
    struct = visual_field_structure()
    assert struct.m == 52
    assert np.all(struct.adjacency.sum(axis=1) >= 2)


def test_inferior_nasal_region_contiguous():
    idx = inferior_nasal_cells()
    assert idx.size == 8
    cells = visual_field_cells()
    region = [cells[i] for i in idx]
    # contiguity under king moves: single connected component
    seen = {region[0]}
    frontier = [region[0]]
    while frontier:
        r, c = frontier.pop()
        for rc in region:
            if rc not in seen and max(abs(rc[0] - r), abs(rc[1] - c)) <= 1:
                seen.add(rc)
                frontier.append(rc)
    assert seen == set(region)


def test_sim1_shapes_and_determinism():
    cfg = Sim1Config(k_true=1, T=10, n_future=3)
    t1 = generate_sim1(cfg, np.random.default_rng(5))
    t2 = generate_sim1(cfg, np.random.default_rng(5))
    assert t1.fit_data.y.shape == (10, 1, 52)
    assert np.allclose(t1.fit_data.times, np.linspace(0, 1, 10))
    assert t1.holdout_y.shape == (3, 52)
    assert t1.holdout_times[-1] == pytest.approx(1.0 + 3.0 / 9.0)
    assert np.array_equal(t1.fit_data.y, t2.fit_data.y)
    t3 = generate_sim1(cfg, np.random.default_rng(6))
    assert not np.array_equal(t1.fit_data.y, t3.fit_data.y)


def test_sim1_spatial_flag_changes_alpha_field():
    cfg_sp = Sim1Config(k_true=1, spatial=True)
    cfg_id = Sim1Config(k_true=1, spatial=False)
    a_sp = generate_sim1(cfg_sp, np.random.default_rng(2)).alpha
    a_id = generate_sim1(cfg_id, np.random.default_rng(2)).alpha
    assert not np.allclose(a_sp, a_id)
    # identity field: stick values are iid standard normal across cells
    flat = a_id.reshape(-1)
    assert abs(flat.mean()) < 4 / np.sqrt(flat.size)
    assert flat.var() == pytest.approx(1.0, rel=0.15)
    # CAR field: neighbouring cells are positively correlated
    struct = visual_field_structure()
    W = struct.adjacency
    pairs = np.argwhere(np.triu(W) > 0)
    a = a_sp[0]
    prods = np.array([a[:, i] @ a[:, j] / a.shape[0] for i, j in pairs])
    vars = (a ** 2).mean(axis=0)
    corr = prods.mean() / vars.mean()
    assert corr > 0.5


def test_sim2_truth_partition():
    truth = generate_sim2(Sim2Config(), np.random.default_rng(0))
    assert truth.labels.size == 52
    assert (truth.labels == 1).sum() == 8
    assert (truth.labels == 2).sum() == 44
    assert truth.fit_data.y.shape == (10, 1, 52)


def test_sim2_intercept_shift():
    cfg = Sim2Config(delta_beta0=6.0, delta_beta1=0.0, spatial=False)
    rng = np.random.default_rng(1)
    region_means = []
    rest_means = []
    for _ in range(300):
        truth = generate_sim2(cfg, rng)
        region_means.append(truth.intercepts[truth.labels == 1].mean())
        rest_means.append(truth.intercepts[truth.labels == 2].mean())
    assert np.mean(region_means) == pytest.approx(-2.0, abs=0.15)
    assert np.mean(rest_means) == pytest.approx(-8.0, abs=0.15)


def test_sim2_null_setting_indistinguishable():
    cfg = Sim2Config(delta_beta0=0.0, delta_beta1=0.0, delta_sigma2=0.0)
    truth = generate_sim2(cfg, np.random.default_rng(3))
    spread = np.abs(truth.intercepts[truth.labels == 1].mean()
                    - truth.intercepts[truth.labels == 2].mean())
    assert spread < 6.0  # same distribution; no systematic offset


def test_model_menu_mapping():
    s1 = model_spec_for("M1")
    assert s1.loadings_prior == "psbp-spatial" and s1.shrinkage == "mgp"
    s2 = model_spec_for("M2")
    assert s2.loadings_prior == "psbp-independent"
    s4 = model_spec_for("M4")
    assert s4.loadings_prior == "gaussian-car"
    assert s4.shrinkage == "independent-gamma"
    assert s1.rho == 0.99 and s1.a1 == 1.0 and s1.a2 == 20.0
    assert s1.L is None


def test_run_experiment_smoke():
    cfg = Sim1Config(k_true=1, T=5, n_future=3)
    rows = run_experiment("sim1", ["M5"], replicates=1, seed=3, n_iter=40,
                          burn_in=10, k_fit=2, sim1_cfg=cfg)
    assert len(rows) == 1
    assert {"design", "replicate", "model", "waic", "crps"} <= set(rows[0])
    assert np.isfinite(rows[0]["waic"])
    assert rows[0]["crps"] > 0
    with pytest.raises(ValueError):
        run_experiment("sim2", ["M4"], 1, 0)
