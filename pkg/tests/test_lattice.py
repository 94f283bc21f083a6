import numpy as np
import pytest

import starlab.cells as cells_mod
from starlab.cells import CellKind, jacobians_at
from starlab.lattice import (GradientField, LossMode, StackSpec,
                             analysis_seeds, backward_sequence, build,
                             fixed_point_grid, forward_sequence)
from starlab.numerics import Rng

ALL_KINDS = list(CellKind)


def uniform_stack(kind, width, layers, n_in=None, t_max=8):
    return StackSpec(
        n_in=n_in if n_in is not None else width,
        layers=tuple((kind, width) for _ in range(layers)),
        t_max=t_max,
    )


def test_build_heterogeneous_stack():
    spec = StackSpec(
        n_in=1,
        layers=((CellKind.LSTMWF, 128),) + tuple((CellKind.STAR, 128) for _ in range(7)),
        t_max=784,
    )
    lat = build(spec, "training", Rng(0))
    assert lat.n_layers == 8
    assert lat.cells[0].kind == CellKind.LSTMWF
    assert lat.cells[0].n_in == 1
    assert lat.cells[1].n_in == 128


def test_build_twelve_star_layers_independent_params():
    spec = uniform_stack(CellKind.STAR, 16, 12)
    lat = build(spec, "analysis", Rng(1))
    mats = [p.weights["W_h"] for p in lat.cells]
    for i in range(12):
        for j in range(i + 1, 12):
            assert not np.allclose(mats[i], mats[j])


def test_single_layer_vrnn_matches_plain_cell():
    spec = uniform_stack(CellKind.VRNN, 5, 1, t_max=1)
    lat = build(spec, "training", Rng(2))
    x = Rng(3).normals(5)
    grid = forward_sequence(lat, [x])
    h, _, _ = cells_mod.forward(lat.cells[0], x, np.zeros(5))
    assert np.allclose(grid.top_h(0)[:, 0], h, atol=0)


def test_zero_inputs_zero_grid_in_analysis_mode():
    spec = StackSpec(
        n_in=4,
        layers=((CellKind.STAR, 5), (CellKind.LSTM, 6), (CellKind.GRU, 4)),
        t_max=7,
    )
    lat = build(spec, "analysis", Rng(4))
    grid = forward_sequence(lat, np.zeros((7, 4)))
    for l in range(3):
        for t in range(7):
            assert np.abs(grid.hidden(l, t)).max() == 0.0


def test_forward_deterministic():
    spec = uniform_stack(CellKind.GRU, 6, 2)
    lat = build(spec, "training", Rng(5))
    X = Rng(6).normals(8 * 6).reshape(8, 6)
    g1 = forward_sequence(lat, X)
    g2 = forward_sequence(lat, X)
    assert np.array_equal(g1.top_h(7), g2.top_h(7))


def test_width_mismatch_rejected():
    spec = uniform_stack(CellKind.VRNN, 5, 2)
    lat = build(spec, "training", Rng(7))
    with pytest.raises(ValueError):
        forward_sequence(lat, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        forward_sequence(lat, np.zeros((9, 5)))  # exceeds t_max


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_gradient_recurrence_equivalence_2x2(kind):
    # recorded gradient at each cell equals J^T (from above) + H^T (from the
    # future); exact for c-free kinds everywhere and at the loss-adjacent
    # cells for LSTM, whose cell-state channel adds a (dc/dx)^T g_c term at
    # the interior cell
    n = 5
    spec = uniform_stack(kind, n, 2, t_max=2)
    lat = build(spec, "training", Rng(8))
    X = Rng(9).normals(2 * n).reshape(2, n)
    grid = forward_sequence(lat, X)
    sample, _ = backward_sequence(lat, grid, LossMode.FINAL_STEP)

    u = np.full((n, 1), 1.0 / np.sqrt(n))
    is_lstm = kind == CellKind.LSTM
    zero_c = np.zeros((n, 1)) if is_lstm else None

    def jac(l, t):
        c = grid.caches[l][t]
        return jacobians_at(lat.cells[l], c.x[:, 0], c.h_prev[:, 0],
                            None if c.c_prev is None else c.c_prev[:, 0])

    # gradients arriving at the two loss-adjacent cells: H^T u flows into the
    # past within the top layer, J^T u flows down into the layer below
    g11 = u[:, 0]
    gx11, gh11, gc11, _ = cells_mod.backward(lat.cells[1], grid.caches[1][1], u, zero_c)
    j11, h11 = jac(1, 1)
    g_top_left = h11.T @ g11      # arrives at (t=0, l=1)
    g_bottom_right = j11.T @ g11  # arrives at (t=1, l=0)
    assert np.abs(np.linalg.norm(g_top_left) - sample.gh_norm[1, 0]) <= 1e-10
    assert np.abs(np.linalg.norm(g_bottom_right) - sample.gh_norm[0, 1]) <= 1e-10

    # interior cell (t=0, l=0): J^T from (0, l=1) + H^T from (t=1, l=0)
    j01, _ = jac(1, 0)
    _, h10 = jac(0, 1)
    eq4 = j01.T @ g_top_left + h10.T @ g_bottom_right
    if is_lstm:
        # add the cell-state side channel: (dc/dx at (0,1))^T g_c(0,1)
        c01 = grid.caches[1][0]
        i, f, o, z = (c01.gates[k][:, 0] for k in ("i", "f", "o", "z"))
        dc_dx = (np.diag(c01.c_prev[:, 0] * f * (1 - f)) @ lat.cells[1].weights["W_xf"]
                 + np.diag(z * i * (1 - i)) @ lat.cells[1].weights["W_xi"]
                 + np.diag(i * (1 - z * z)) @ lat.cells[1].weights["W_xz"])
        g_c01 = gc11[:, 0]  # cell-state gradient flowing from (1, l=1) back to t=0
        eq4 = eq4 + dc_dx.T @ g_c01
    assert np.abs(np.linalg.norm(eq4) - sample.gh_norm[0, 0]) <= 1e-10


def test_whole_lattice_gradients_match_finite_differences():
    spec = StackSpec(n_in=3, layers=((CellKind.LSTM, 4), (CellKind.STAR, 4)), t_max=3)
    lat = build(spec, "training", Rng(11))
    X = Rng(12).normals(3 * 3 * 2).reshape(3, 3, 2)
    u = Rng(13).normals(4)
    steps, batch = 3, 2

    def loss():
        grid = forward_sequence(lat, X)
        hbar = sum(grid.top_h(t) for t in range(steps)) / steps
        return float(np.mean(u @ hbar))

    grid = forward_sequence(lat, X)
    seeds = [np.tile(u[:, None] / (steps * batch), (1, batch)) for _ in range(steps)]
    _, totals = backward_sequence(lat, grid, seeds=seeds)

    eps = 1e-5
    gscale = max(np.abs(a).max() for t in totals for _, a in t.named_arrays())
    floor = 1e-3 * gscale
    worst = 0.0
    for l, params in enumerate(lat.cells):
        gd = dict(totals[l].named_arrays())
        for name, arr in params.named_arrays():
            flat = arr.ravel()
            gflat = gd[name].ravel()
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                up = loss()
                flat[i] = keep - eps
                dn = loss()
                flat[i] = keep
                fd = (up - dn) / (2 * eps)
                worst = max(worst, abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), floor))
    assert worst < 1e-6


def test_parameter_isolation_across_layers():
    spec = uniform_stack(CellKind.LSTMWF, 5, 3)
    lat = build(spec, "training", Rng(14))
    X = Rng(15).normals(4 * 5).reshape(4, 5)
    base = forward_sequence(lat, X)
    lat.cells[1].weights["W_xz"] += 0.1
    bumped = forward_sequence(lat, X)
    # layer below the perturbed one is untouched at every step
    for t in range(4):
        assert np.array_equal(base.hidden(0, t), bumped.hidden(0, t))
    # layer above changes
    assert not np.allclose(base.hidden(2, 3), bumped.hidden(2, 3))


def test_final_vs_all_steps_seed_agreement_at_corner():
    spec = uniform_stack(CellKind.STAR, 6, 2)
    lat = build(spec, "analysis", Rng(16))
    X = Rng(17).normals(5 * 6).reshape(5, 6)
    grid = forward_sequence(lat, X)
    s_final, _ = backward_sequence(lat, grid, LossMode.FINAL_STEP)
    s_all, _ = backward_sequence(lat, grid, LossMode.ALL_STEPS)
    assert s_all.gh_norm[1, -1] == pytest.approx(s_final.gh_norm[1, -1], abs=1e-15)


def test_backward_seed_scaling_linearity():
    spec = uniform_stack(CellKind.VRNN, 5, 2)
    lat = build(spec, "analysis", Rng(18))
    X = Rng(19).normals(4 * 5).reshape(4, 5)
    grid = forward_sequence(lat, X)
    u = np.full((5, 1), 1.0 / np.sqrt(5))
    one, _ = backward_sequence(lat, grid, seeds=[None, None, None, u])
    two, _ = backward_sequence(lat, grid, seeds=[None, None, None, 2 * u])
    assert np.allclose(two.gh_norm, 2 * one.gh_norm, atol=1e-12)
    assert np.allclose(two.gparam_norm, 2 * one.gparam_norm, atol=1e-12)


def test_unit_seed_recorded_at_single_cell():
    spec = uniform_stack(CellKind.VRNN, 4, 1, t_max=1)
    lat = build(spec, "analysis", Rng(20))
    grid = forward_sequence(lat, Rng(21).normals(4).reshape(1, 4))
    sample, _ = backward_sequence(lat, grid, LossMode.FINAL_STEP)
    assert sample.gh_norm[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_mean_pool_seeds_scale():
    seeds = analysis_seeds(LossMode.MEAN_POOL, 4, 9)
    assert len(seeds) == 4
    assert np.linalg.norm(seeds[0]) == pytest.approx(0.25, abs=1e-15)


def test_fixed_point_grid_pins_states():
    spec = uniform_stack(CellKind.GRU, 6, 3, t_max=5)
    lat = build(spec, "analysis", Rng(22))
    X = Rng(23).normals(5 * 6).reshape(5, 6)
    grid = fixed_point_grid(lat, X)
    for l in range(3):
        for t in range(5):
            cache = grid.caches[l][t]
            assert np.abs(cache.h_prev).max() == 0.0
            if l > 0:
                assert np.abs(cache.x).max() == 0.0
    # layer 1 still sees the true inputs
    assert np.array_equal(grid.caches[0][2].x[:, 0], X[2])


def test_welford_merge_associativity():
    samples = []
    for s in range(12):
        r = Rng(40 + s)
        samples.append(type("S", (), {
            "gparam_norm": r.derive(0).uniforms(6).reshape(2, 3),
            "gh_norm": r.derive(1).uniforms(6).reshape(2, 3),
            "path_cosine": None,
            "layer_total_norms": r.derive(2).uniforms(2),
        })())

    def collect(idx):
        f = GradientField(2, 3)
        for i in idx:
            f.add(samples[i])
        return f

    whole = collect(range(12))
    a = collect(range(0, 5)).merge(collect(range(5, 12)))
    b = collect(range(0, 9)).merge(collect(range(9, 12)))
    c = collect(range(0, 3)).merge(collect(range(3, 6))).merge(collect(range(6, 12)))
    for other in (a, b, c):
        assert other.runs == whole.runs
        assert np.abs(other.mean_gp - whole.mean_gp).max() <= 1e-12
        assert np.abs(other.std_gp() - whole.std_gp()).max() <= 1e-12
        assert np.abs(other.mean_layer_total - whole.mean_layer_total).max() <= 1e-12


def test_field_accumulator_matches_manual_average():
    spec = uniform_stack(CellKind.STAR, 5, 2, t_max=4)
    lat1 = build(spec, "analysis", Rng(31))
    lat2 = build(spec, "analysis", Rng(32))
    X1 = Rng(33).normals(4 * 5).reshape(4, 5)
    X2 = Rng(34).normals(4 * 5).reshape(4, 5)
    f = GradientField(2, 4)
    mats = []
    for lat, X in ((lat1, X1), (lat2, X2)):
        grid = forward_sequence(lat, X)
        sample, _ = backward_sequence(lat, grid, LossMode.FINAL_STEP)
        f.add(sample)
        mats.append(sample.gparam_norm.copy())
    assert np.allclose(f.mean_gp, (mats[0] + mats[1]) / 2, atol=1e-14)
    assert f.runs == 2


def test_csv_schema_and_determinism(tmp_path):
    f = GradientField(2, 3)
    f.add(type("S", (), {
        "gparam_norm": np.arange(6).reshape(2, 3) / 7.0,
        "gh_norm": np.arange(6).reshape(2, 3) / 3.0,
        "path_cosine": None,
        "layer_total_norms": np.array([1.0, 2.0]),
    })())
    text = f.csv_text()
    lines = text.strip().split("\n")
    assert lines[0] == "layer,t,mean_gparam_norm,std_gparam_norm,mean_gh_norm,runs"
    assert len(lines) == 1 + 6
    assert lines[1].startswith("1,1,")
    assert text == f.csv_text()
    path = tmp_path / "field.csv"
    f.to_csv(path)
    assert path.read_text() == text


def test_mean_normalized_std_null_handling():
    f = GradientField(1, 2)
    f.add(type("S", (), {
        "gparam_norm": np.array([[0.0, 2.0]]),
        "gh_norm": np.zeros((1, 2)),
        "path_cosine": None,
        "layer_total_norms": np.array([1.0]),
    })())
    ns = f.mean_normalized_std_gp()
    assert np.isnan(ns[0, 0])
    assert ns[0, 1] == 0.0
