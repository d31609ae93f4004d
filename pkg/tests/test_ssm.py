import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambajscc import ops
from mambajscc.harness.counting import count_macs_params, vs6_macs
from mambajscc.harness.gradcheck import check
from mambajscc.nn import param
from mambajscc.ssm import (DIRECTIONS, SingularDiscretizationError, VS6Params, VSSMBlock,
                           discretize_taylor, discretize_zoh_exact, flatten_batched,
                           flatten_four_directions, init_vs6_params, merge_batched,
                           merge_directions, project_parameters, scan_core_macs,
                           selective_scan, vs6_bank_forward, vs6_forward, vssm_block_forward)
from mambajscc.tensor import DimensionError, Tensor, tensor


def t(x):
    return tensor(np.asarray(x, dtype=float))


def unrolled_scan(v, Abar, Bbar, C, Dmat):
    """y_t = sum_{k<=t} C Abar^(t-k) Bbar v_k + D v_t."""
    D = len(v)
    y = np.zeros(D)
    for ti in range(D):
        acc = 0.0
        for k in range(ti + 1):
            acc += (C @ np.linalg.matrix_power(Abar, ti - k) @ Bbar).item() * v[k]
        y[ti] = acc + Dmat.item() * v[ti]
    return y


def random_scan_instance(rng, n, d):
    A = rng.standard_normal((n, n))
    A *= 0.9 / max(1e-9, np.max(np.abs(np.linalg.eigvals(A))))
    return (rng.standard_normal(d), A, rng.standard_normal((n, 1)),
            rng.standard_normal((1, n)), rng.standard_normal((1, 1)))


# ---------------------------------------------------------------- flattening

def test_flatten_hand_example():
    v1, v2, v3, v4 = flatten_four_directions(t([[1, 2], [3, 4]]))
    assert v1.data.tolist() == [1, 3, 2, 4]
    assert v2.data.tolist() == [1, 2, 3, 4]
    assert v3.data.tolist() == [4, 2, 3, 1]
    assert v4.data.tolist() == [4, 3, 2, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_flatten_reversal_pairs(h, w, seed):
    z = t(np.random.default_rng(seed).standard_normal((h, w)))
    v1, v2, v3, v4 = flatten_four_directions(z)
    np.testing.assert_array_equal(ops.reverse(v3).data, v1.data)
    np.testing.assert_array_equal(ops.reverse(v4).data, v2.data)


def test_flatten_single_element():
    vs = flatten_four_directions(t([[7.0]]))
    assert all(v.data.tolist() == [7.0] for v in vs)


def test_flatten_batched_matches_unbatched():
    z = np.random.default_rng(0).standard_normal((3, 2, 5))
    v = flatten_batched(t(z)).data
    for c in range(3):
        ref = flatten_four_directions(t(z[c]))
        for j in range(DIRECTIONS):
            np.testing.assert_array_equal(v[c * DIRECTIONS + j], ref[j].data)


# ---------------------------------------------------------------- projections

def test_project_zero_input():
    rng = np.random.default_rng(0)
    n, d = 3, 5
    delta = rng.standard_normal((n, n))
    Delta, B, C = project_parameters(t(np.zeros(d)), t(rng.standard_normal((1, n))), t(delta),
                                     *(t(rng.standard_normal((n, d))) for _ in range(3)))
    np.testing.assert_array_equal(Delta.data, delta)
    np.testing.assert_array_equal(B.data, np.zeros((n, 1)))
    np.testing.assert_array_equal(C.data, np.zeros((1, n)))


def test_project_scalar_example():
    Delta, _, _ = project_parameters(t([1, 2]), t([[2]]), t([[0.5]]), t([[1, 1]]),
                                     t([[0, 0]]), t([[0, 0]]))
    assert Delta.data.tolist() == [[6.5]]


def test_project_basis_vector_picks_column():
    rng = np.random.default_rng(1)
    H2 = rng.standard_normal((3, 4))
    _, B, C = project_parameters(t(np.eye(4)[2]), t(np.zeros((1, 3))), t(np.zeros((3, 3))),
                                 t(np.zeros((3, 4))), t(H2), t(H2))
    np.testing.assert_array_equal(B.data[:, 0], H2[:, 2])
    assert C.shape == (1, 3)


def test_project_shape_errors():
    with pytest.raises(DimensionError):
        project_parameters(t(np.zeros(3)), t(np.zeros((1, 2))), t(np.zeros((2, 2))),
                           *(t(np.zeros((2, 4))) for _ in range(3)))


# ---------------------------------------------------------------- discretization

def test_taylor_scalar_example():
    Abar, Bbar = discretize_taylor(t([[0.1]]), t([[-1.0]]), t([[1.0]]))
    assert Abar.item() == pytest.approx(math.exp(-0.1), abs=1e-6)
    assert round(Abar.item(), 6) == 0.904837
    assert Bbar.item() == pytest.approx(0.1, abs=1e-12)


def test_taylor_zero_delta_and_zero_a():
    rng = np.random.default_rng(0)
    A, B = t(rng.standard_normal((3, 3))), t(rng.standard_normal((3, 1)))
    Abar, Bbar = discretize_taylor(t(np.zeros((3, 3))), A, B)
    np.testing.assert_array_equal(Abar.data, np.ones((3, 3)))
    np.testing.assert_array_equal(Bbar.data, np.zeros((3, 1)))
    Abar, _ = discretize_taylor(t(rng.standard_normal((3, 3))), t(np.zeros((3, 3))), B)
    np.testing.assert_array_equal(Abar.data, np.ones((3, 3)))


def test_taylor_zero_a_gives_accumulation():
    Abar, Bbar = discretize_taylor(t([[0.5]]), t([[0.0]]), t([[2.0]]))
    y = selective_scan(t([1.0, 1.0, 1.0]), Abar, Bbar, t([[1.0]]), t([[0.0]]))
    np.testing.assert_allclose(y.data, [1.0, 2.0, 3.0])


def test_taylor_matrix_mode_uses_matrix_exponential():
    import scipy.linalg
    rng = np.random.default_rng(2)
    Delta, A = rng.standard_normal((3, 3)) * 0.3, rng.standard_normal((3, 3))
    Abar, _ = discretize_taylor(t(Delta), t(A), t(np.ones((3, 1))), exp_mode="matrix")
    np.testing.assert_allclose(Abar.data, scipy.linalg.expm(Delta @ A), rtol=1e-12)
    Abar0, _ = discretize_taylor(t(np.zeros((3, 3))), t(A), t(np.ones((3, 1))),
                                 exp_mode="matrix")
    np.testing.assert_allclose(Abar0.data, np.eye(3), atol=1e-15)


def test_elementwise_exp_is_clamped():
    Abar, _ = discretize_taylor(t([[10.0]]), t([[10.0]]), t([[1.0]]))
    assert Abar.item() == pytest.approx(math.exp(20.0))


def test_zoh_scalar_example():
    _, Bbar = discretize_zoh_exact(0.1, -1.0, 1.0)
    assert Bbar.item() == pytest.approx(1 - math.exp(-0.1), abs=1e-12)
    assert round(Bbar.item(), 7) == 0.0951626


def test_taylor_zoh_gap_and_order():
    gaps = []
    for d in (0.2, 0.1, 0.05):
        _, bz = discretize_zoh_exact(d, -1.0, 1.0)
        _, bt = discretize_taylor(t([[d]]), t([[-1.0]]), t([[1.0]]))
        gaps.append(abs(bt.item() - bz.item()))
    assert gaps[1] == pytest.approx(0.0048374, abs=1e-7)
    for big, small in zip(gaps, gaps[1:]):
        assert 3.5 <= big / small <= 4.5


def test_taylor_zoh_agree_in_small_delta_limit():
    _, bz = discretize_zoh_exact(1e-8, -1.0, 1.0)
    _, bt = discretize_taylor(t([[1e-8]]), t([[-1.0]]), t([[1.0]]))
    assert abs(bz.item() - bt.item()) < 1e-15


def test_zoh_singular_is_reported():
    with pytest.raises(SingularDiscretizationError):
        discretize_zoh_exact(np.zeros((2, 2)), -np.eye(2), np.ones((2, 1)))


# ---------------------------------------------------------------- scan

def test_scan_passthrough():
    y = selective_scan(t([5, 7]), t([[0]]), t([[1]]), t([[1]]), t([[0]]))
    assert y.data.tolist() == [5, 7]


def test_scan_cumulative_sum():
    y = selective_scan(t([1, 1, 1]), t([[1]]), t([[1]]), t([[1]]), t([[0]]))
    assert y.data.tolist() == [1, 2, 3]


def test_scan_matches_unrolled_oracle():
    rng = np.random.default_rng(0)
    inst = random_scan_instance(rng, 3, 6)
    y = selective_scan(*(t(a) for a in inst))
    np.testing.assert_allclose(y.data, unrolled_scan(*inst), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 16), st.integers(0, 2**31))
def test_scan_oracle_property(n, d, seed):
    inst = random_scan_instance(np.random.default_rng(seed), n, d)
    y = selective_scan(*(t(a) for a in inst))
    assert np.max(np.abs(y.data - unrolled_scan(*inst))) < 1e-10


def test_scan_batched_equals_per_sequence():
    rng = np.random.default_rng(5)
    insts = [random_scan_instance(rng, 2, 5) for _ in range(3)]
    stacked = [t(np.stack([inst[k] for inst in insts])) for k in range(5)]
    y = selective_scan(*stacked).data
    for i, inst in enumerate(insts):
        np.testing.assert_allclose(y[i], selective_scan(*(t(a) for a in inst)).data, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_scan_gradients(seed):
    rng = np.random.default_rng(seed)
    ts = [param(a) for a in random_scan_instance(rng, 3, 5)]
    w = rng.standard_normal(5)
    r = check("scan", lambda: ops.sum(ops.mul(selective_scan(*ts), Tensor._wrap(w))), ts)
    assert r.max_rel_error < 1e-6


def test_scan_shape_errors():
    with pytest.raises(DimensionError):
        selective_scan(t([1, 2]), t(np.eye(2)), t(np.ones((3, 1))), t(np.ones((1, 2))),
                       t([[0]]))


# ---------------------------------------------------------------- merging

def test_merge_all_zero():
    z = t(np.zeros((2, 3)))
    zt = t(np.zeros((3, 2)))
    np.testing.assert_array_equal(merge_directions(z, zt, z, zt).data, 0.0)


def test_merge_single_term():
    Y1 = t([[1, 0], [0, 0]])
    zero = t(np.zeros((2, 2)))
    np.testing.assert_array_equal(merge_directions(Y1, zero, zero, zero).data, Y1.data)


def _identity_round_trip(z):
    h, w = z.shape
    v1, v2, v3, v4 = flatten_four_directions(t(z))
    fold = lambda v, r, c: v.data.reshape(c, r).T  # noqa: E731  column-major
    return merge_directions(t(fold(v1, h, w)), t(fold(v2, w, h)), t(fold(v3, h, w)),
                            t(fold(v4, w, h))).data


def test_merge_identity_ssm_hand_2x2():
    z = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(_identity_round_trip(z), 4 * z)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_merge_identity_ssm_gives_four_z(h, w, seed):
    z = np.random.default_rng(seed).standard_normal((h, w))
    np.testing.assert_array_equal(_identity_round_trip(z), 4 * z)
    y = flatten_batched(t(z[None]))
    np.testing.assert_array_equal(merge_batched(y, 1, h, w).data[0], 4 * z)


def test_merge_shape_error():
    z = t(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        merge_directions(z, z, z, z)


# ---------------------------------------------------------------- V-S6

def identity_params(channels, n, d):
    """Parameters for which every direction returns its input (C = 0, D = 1)."""
    rng = np.random.default_rng(0)
    p = init_vs6_params(channels, n, d, rng)
    p.H3.data = np.zeros_like(p.H3.data)
    return p


@pytest.mark.parametrize("exp_mode", ["matrix", "elementwise"])
def test_vs6_identity_returns_four_z(exp_mode):
    z = np.random.default_rng(1).standard_normal((2, 3, 5))
    p = identity_params(2, 3, 15)
    out = vs6_bank_forward(t(z), p, exp_mode)
    np.testing.assert_array_equal(out.data, 4 * z)


def test_vs6_zero_input_zero_output():
    p = init_vs6_params(1, 3, 16, np.random.default_rng(0))
    p.delta.data = np.zeros_like(p.delta.data)
    np.testing.assert_array_equal(vs6_forward(t(np.zeros((4, 4))), p).data, 0.0)


@pytest.mark.parametrize("exp_mode", ["matrix", "elementwise"])
def test_vs6_single_pixel_hand_evaluation(exp_mode):
    rng = np.random.default_rng(3)
    p = VS6Params(G=rng.standard_normal((4, 1, 1)), delta=rng.standard_normal((4, 1, 1)),
                  H1=rng.standard_normal((4, 1, 1)), H2=rng.standard_normal((4, 1, 1)),
                  H3=rng.standard_normal((4, 1, 1)), A=rng.standard_normal((4, 1, 1)),
                  Dmat=rng.standard_normal((4, 1, 1)))
    x = 0.7
    expected = 0.0
    for j in range(4):
        g, dl, h1, h2, h3, dm = (getattr(p, k).data[j].item()
                                 for k in ("G", "delta", "H1", "H2", "H3", "Dmat"))
        Delta = h1 * x * g + dl
        expected += (h3 * x) * (Delta * h2 * x) * x + dm * x  # h_1 = Bbar v_1 from h_0 = 0
    out = vs6_forward(t([[x]]), p, exp_mode)
    assert out.item() == pytest.approx(expected, rel=1e-12)


def test_vs6_is_finite_at_init_scale():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = init_vs6_params(1, 4, 16, rng)
        for name in ("G", "delta", "H1", "H2", "H3", "A", "Dmat"):
            getattr(p, name).data = rng.normal(0.0, 0.02, size=getattr(p, name).shape)
        z = t(rng.standard_normal((4, 4)) * 3)
        for mode in ("matrix", "elementwise"):
            assert np.all(np.isfinite(vs6_forward(z, p, mode).data))


def test_vs6_shape_mismatch():
    p = init_vs6_params(1, 2, 16, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        vs6_forward(t(np.zeros((3, 3))), p)


def test_vs6_params_require_four_directions():
    with pytest.raises(DimensionError):
        VS6Params(*(np.zeros(s) for s in [(3, 1, 2), (3, 2, 2), (3, 2, 4), (3, 2, 4),
                                           (3, 2, 4), (3, 2, 2), (3, 1, 1)]))


def test_vs6_params_direction_view():
    p = init_vs6_params(2, 3, 4, np.random.default_rng(0))
    d = p.direction(5)
    assert set(d) == {"G", "delta", "H1", "H2", "H3", "A", "Dmat"}
    assert d["H1"].shape == (3, 4)
    np.testing.assert_array_equal(d["A"].data, -np.eye(3))


def test_vs6_init_values():
    p = init_vs6_params(1, 3, 8, np.random.default_rng(0))
    np.testing.assert_array_equal(p.delta.data[0], 0.1 * np.eye(3))
    np.testing.assert_array_equal(p.A.data[0], -np.eye(3))
    assert abs(p.H1.data.std() - 0.02) < 0.01


def test_vs6_scan_macs_linear_in_length():
    for n in (1, 4, 16):
        for d in (4, 16, 64):
            assert scan_core_macs(2 * d, n) == 2 * scan_core_macs(d, n)
            small, big = vs6_macs(d, n), vs6_macs(2 * d, n)
            assert 1.9 <= (big["scan"] + big["skip"]) / (small["scan"] + small["skip"]) <= 2.1


# ---------------------------------------------------------------- VSSM block

def make_block(seed=0, c=2, hw=4, n=2):
    return VSSMBlock(c, hw, hw, np.random.default_rng(seed), n_state=n)


def test_block_zero_output_projection_is_identity():
    b = make_block()
    b.out_proj.weight.data[:] = 0.0
    b.out_proj.bias.data[:] = 0.0
    x = t(np.random.default_rng(1).standard_normal((2, 4, 4)))
    np.testing.assert_array_equal(vssm_block_forward(x, b).data, x.data)


def test_block_all_projections_zero_is_identity():
    b = make_block()
    for lin in (b.in_proj, b.gate_proj, b.out_proj):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    x = t(np.random.default_rng(1).standard_normal((2, 4, 4)))
    np.testing.assert_array_equal(vssm_block_forward(x, b).data, x.data)


def test_block_gate_kill_is_identity():
    b = make_block()
    b.gate_proj.weight.data[:] = 0.0
    b.gate_proj.bias.data[:] = 0.0  # silu(0) = 0
    b.out_proj.bias.data[:] = 0.0
    x = t(np.random.default_rng(2).standard_normal((2, 4, 4)))
    np.testing.assert_array_equal(vssm_block_forward(x, b).data, x.data)


def test_block_shape_preserved_and_checked():
    b = make_block(c=3, hw=4)
    x = t(np.random.default_rng(0).standard_normal((3, 4, 4)))
    assert vssm_block_forward(x, b).shape == (3, 4, 4)
    with pytest.raises(DimensionError):
        vssm_block_forward(t(np.zeros((3, 2, 2))), b)
    with pytest.raises(DimensionError):
        vssm_block_forward(x, b, t(np.zeros(2)))


@pytest.mark.parametrize("seed", range(5))
def test_block_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    b = make_block(seed)
    for p in b.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    for lin in (b.in_proj, b.gate_proj, b.out_proj):
        lin.weight.data = rng.standard_normal(lin.weight.shape) / np.sqrt(lin.in_features)
    x = param(rng.standard_normal((2, 4, 4)))
    w = rng.standard_normal((2, 4, 4))
    r = check("block", lambda: ops.sum(ops.mul(vssm_block_forward(x, b), Tensor._wrap(w))),
              [x, *b.parameters()], samples=6, rng=rng)
    assert r.max_rel_error < 1e-4


def test_block_counts_match_parameters():
    b = make_block(c=3, hw=4, n=2)
    rep = count_macs_params(b, (4, 4))
    assert rep.params == b.num_parameters()
