import numpy as np
import pytest

from starlab.cells import (CellKind, backward, forward, init_params,
                           jacobians_at, load_cells, param_count, save_cells)
from starlab.numerics import Rng, mean_singular_value

ALL_KINDS = list(CellKind)


def make_cell(kind, n_in=5, n_hidden=7, seed=0, analysis=False, t_max=8):
    return init_params(kind, n_in, n_hidden, t_max, Rng(seed), analysis=analysis)


def random_state(kind, params, seed=1):
    r = Rng(seed)
    x = r.derive(0).uniform_range(-1, 1, params.n_in)
    h = r.derive(1).uniform_range(-0.8, 0.8, params.n_hidden)
    c = r.derive(2).uniform_range(-0.8, 0.8, params.n_hidden) if kind == CellKind.LSTM else None
    return x, h, c


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_zero_fixed_point(kind):
    p = make_cell(kind, analysis=True)
    z = np.zeros(7)
    h, c, _ = forward(p, np.zeros(5), z, z if kind == CellKind.LSTM else None)
    assert np.array_equal(h, np.zeros(7))
    if kind == CellKind.LSTM:
        assert np.array_equal(c, np.zeros(7))


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_gate_and_state_ranges(kind):
    p = make_cell(kind, seed=3)
    x, h_prev, c_prev = random_state(kind, p, seed=4)
    h, c, cache = forward(p, 3.0 * x, h_prev, c_prev)
    sigmoid_gates = {
        CellKind.LSTM: ("i", "f", "o"), CellKind.LSTMWF: ("f",),
        CellKind.GRU: ("z", "r"), CellKind.STAR: ("k",), CellKind.VRNN: (),
    }[kind]
    for name in sigmoid_gates:
        g = cache.gates[name]
        assert g.min() > 0.0 and g.max() < 1.0
    if kind != CellKind.LSTM:
        assert h.min() > -1.0 and h.max() < 1.0
    else:
        assert np.isfinite(c).all()


def test_star_hidden_state_bounded_anywhere():
    p = make_cell(CellKind.STAR, seed=5)
    for s in range(20):
        x = Rng(s).normals(5) * 5.0
        h_prev = np.clip(Rng(100 + s).normals(7), -0.99, 0.99)
        h, _, _ = forward(p, x, h_prev)
        assert h.min() > -1.0 and h.max() < 1.0


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_backward_linearity(kind):
    p = make_cell(kind, seed=6)
    x, h_prev, c_prev = random_state(kind, p, seed=7)
    _, _, cache = forward(p, x, h_prev, c_prev)
    g = Rng(8).normals(7)
    gc = Rng(9).normals(7) if kind == CellKind.LSTM else None

    zero = backward(p, cache, np.zeros(7), np.zeros(7) if kind == CellKind.LSTM else None)
    assert np.abs(zero[0]).max() == 0.0 and np.abs(zero[1]).max() == 0.0
    for _, arr in zero[3].named_arrays():
        assert np.abs(arr).max() == 0.0

    one = backward(p, cache, g, gc)
    two = backward(p, cache, 2.0 * g, None if gc is None else 2.0 * gc)
    assert np.allclose(two[0], 2.0 * one[0], atol=1e-14)
    assert np.allclose(two[1], 2.0 * one[1], atol=1e-14)
    for (_, a), (_, b) in zip(two[3].named_arrays(), one[3].named_arrays()):
        assert np.allclose(a, 2.0 * b, atol=1e-14)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_batched_forward_backward_match_columns(kind):
    p = make_cell(kind, seed=10)
    B = 4
    X = Rng(11).normals(5 * B).reshape(5, B)
    Hp = Rng(12).uniform_range(-0.7, 0.7, 7 * B).reshape(7, B)
    Cp = Rng(13).uniform_range(-0.7, 0.7, 7 * B).reshape(7, B) if kind == CellKind.LSTM else None
    G = Rng(14).normals(7 * B).reshape(7, B)

    hb, cb, cache_b = forward(p, X, Hp, Cp)
    gx_b, ghp_b, gcp_b, grads_b = backward(p, cache_b, G)

    acc = None
    for j in range(B):
        h, c, cache = forward(p, X[:, j], Hp[:, j], None if Cp is None else Cp[:, j])
        assert np.allclose(h, hb[:, j], atol=1e-14)
        gx, ghp, gcp, grads = backward(p, cache, G[:, j])
        assert np.allclose(gx, gx_b[:, j], atol=1e-13)
        assert np.allclose(ghp, ghp_b[:, j], atol=1e-13)
        if acc is None:
            acc = grads
        else:
            acc.iadd(grads)
    for (_, a), (_, b) in zip(acc.named_arrays(), grads_b.named_arrays()):
        assert np.allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_jacobians_match_backward_basis_extraction(kind):
    # row i of J is the input gradient for a basis seed e_i (and likewise H);
    # this is the consistency check that pins the state-Jacobian derivation
    n_in = n = 6
    for trial in range(5):
        p = init_params(kind, n_in, n, 8, Rng(20 + trial))
        x, h_prev, c_prev = random_state(kind, p, seed=30 + trial)
        x = x[:6]
        jac, hmat = jacobians_at(p, x, h_prev, c_prev)
        _, _, cache = forward(p, x, h_prev, c_prev)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            g_x, g_hp, _, _ = backward(p, cache, e, np.zeros(n) if kind == CellKind.LSTM else None)
            assert np.abs(g_x - jac[i]).max() <= 1e-10
            assert np.abs(g_hp - hmat[i]).max() <= 1e-10


def test_fixed_point_jacobians_exact():
    z = np.zeros(6)
    p = init_params(CellKind.STAR, 6, 6, 2, Rng(40), analysis=True)
    jac, hmat = jacobians_at(p, z, z)
    assert np.abs(jac - 0.5 * p.weights["W_z"]).max() == 0.0
    assert np.abs(hmat - 0.5 * np.eye(6)).max() == 0.0

    p = init_params(CellKind.LSTM, 6, 6, 2, Rng(41), analysis=True)
    jac, hmat = jacobians_at(p, z, z, z)
    assert np.abs(jac - 0.25 * p.weights["W_xz"]).max() <= 1e-16
    assert np.abs(hmat - 0.25 * p.weights["W_hz"]).max() <= 1e-16

    p = init_params(CellKind.VRNN, 6, 6, 2, Rng(42), analysis=True)
    jac, hmat = jacobians_at(p, z, z)
    assert np.abs(jac - p.weights["W_x"]).max() == 0.0
    assert np.abs(hmat - p.weights["W_h"]).max() == 0.0


@pytest.mark.parametrize("kind,expected", [
    (CellKind.VRNN, 1.0), (CellKind.LSTM, 0.25), (CellKind.STAR, 0.5),
])
def test_fixed_point_mean_singular_values(kind, expected):
    n = 16
    z = np.zeros(n)
    p = init_params(kind, n, n, 2, Rng(43), analysis=True)
    jac, hmat = jacobians_at(p, z, z, z if kind == CellKind.LSTM else None)
    assert mean_singular_value(jac) == pytest.approx(expected, abs=1e-10)
    assert mean_singular_value(hmat) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_param_count_matches_enumeration(kind):
    for n_in, n_hidden in [(1, 1), (2, 3), (5, 7), (54, 128), (128, 128)]:
        p = init_params(kind, n_in, n_hidden, 4, Rng(50))
        total = sum(arr.size for _, arr in p.named_arrays())
        assert param_count(kind, n_in, n_hidden) == total


def test_footprint_ratios():
    star = param_count(CellKind.STAR, 128, 128)
    gru = param_count(CellKind.GRU, 128, 128)
    lstm = param_count(CellKind.LSTM, 128, 128)
    assert star == 49408
    assert gru == 98688
    assert lstm == 131584
    assert star / gru == pytest.approx(0.5006, abs=5e-5)
    assert star / lstm == pytest.approx(0.3755, abs=5e-5)


def test_analysis_init_shapes_and_zero_biases():
    p = init_params(CellKind.STAR, 54, 128, 784, Rng(51), analysis=True)
    assert np.abs(p.biases["b_z"]).max() == 0.0
    assert np.abs(p.biases["b_k"]).max() == 0.0
    assert p.weights["W_z"].shape == (128, 54)
    assert p.weights["W_x"].shape == (128, 54)
    assert p.weights["W_h"].shape == (128, 128)
    # semi-orthogonal columns
    for name in ("W_z", "W_x", "W_h"):
        w = p.weights[name]
        assert np.abs(w.T @ w - np.eye(w.shape[1])).max() <= 1e-12


def test_lstm_chrono_bias_range():
    p = init_params(CellKind.LSTM, 128, 128, 784, Rng(52))
    bf, bi = p.biases["b_f"], p.biases["b_i"]
    assert bf.min() >= 0.0 and bf.max() <= np.log(783.0)
    assert np.array_equal(bi, -bf)
    assert np.abs(p.biases["b_o"]).max() == 0.0


def test_shape_mismatch_raises():
    p = make_cell(CellKind.STAR)
    with pytest.raises(ValueError):
        forward(p, np.zeros(4), np.zeros(7))
    with pytest.raises(ValueError):
        forward(p, np.zeros(5), np.zeros(6))
    with pytest.raises(ValueError):
        forward(p, np.zeros(5), np.zeros(7), np.zeros(7))  # c for non-LSTM


def test_serialization_round_trip(tmp_path):
    cells = [
        init_params(CellKind.LSTMWF, 3, 4, 8, Rng(60)),
        init_params(CellKind.STAR, 4, 5, 8, Rng(61)),
    ]
    extras = {"head_W": Rng(62).normals(10).reshape(2, 5), "head_b": np.zeros(2)}
    path = tmp_path / "ckpt.bin"
    save_cells(path, cells, extras)
    loaded, loaded_extras = load_cells(path)
    assert len(loaded) == 2
    for a, b in zip(cells, loaded):
        assert a.kind == b.kind and a.n_in == b.n_in and a.n_hidden == b.n_hidden
        for (k1, v1), (k2, v2) in zip(a.named_arrays(), b.named_arrays()):
            assert k1 == k2
            assert np.array_equal(v1, v2)
    for k in extras:
        assert np.array_equal(extras[k], loaded_extras[k])


def test_serialization_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTApack" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_cells(path)
