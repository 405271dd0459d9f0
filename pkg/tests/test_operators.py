import numpy as np
import pytest

from _oracles import coupling_quadrature
from channelmodes import (BasisSelection, Cell, FlowConfig, build_basis)
from channelmodes.basis import SYMMETRIC
from channelmodes.operators import (CouplingTensor, LinearOperator,
                                    assemble_linear, assemble_tensor,
                                    pressure_projection_check, rhs,
                                    viscous_diagonal_quadrature)

CFG = FlowConfig(reynolds=1e4)
CELL = Cell(delta_m=1.0203, delta_k=1.0203)


def test_zero_base_flow_gives_pure_decay(mixed_basis, cfg_re1e4):
    L = assemble_linear(mixed_basis, cfg_re1e4, base_amplitude=0.0)
    dense = L.to_dense()
    lam = mixed_basis.lambdas()
    assert np.allclose(dense, -np.diag(lam), atol=0)


def test_cross_block_entries_identically_zero(mixed_basis, mixed_operators):
    L, _ = mixed_operators
    dense = L.to_dense()
    blocks = mixed_basis.blocks()
    lats = list(blocks)
    for a in range(len(lats)):
        for b in range(len(lats)):
            if a == b:
                continue
            sub = dense[np.ix_(blocks[lats[a]], blocks[lats[b]])]
            assert np.all(sub == 0.0)


def test_viscous_diagonal_in_blocks(mixed_basis, mixed_operators):
    L, _ = mixed_operators
    dense = L.to_dense()
    lam = mixed_basis.lambdas()
    # the advection couplings pair opposite phase partners, so the full
    # diagonal is exactly the viscous -lambda
    assert np.allclose(np.diag(dense), -lam, atol=1e-13)


def test_block_critical_eigenvalue_near_zero_at_orszag_point():
    cfg = FlowConfig(reynolds=5772.2)
    cell = Cell(delta_m=1.0203, delta_k=1.0203)
    basis = build_basis(cfg, cell, BasisSelection(lattice=((1, 0),), roots_2d=40))
    L = assemble_linear(basis, cfg)
    sig = np.linalg.eigvals(L.blocks[(1, 0)])
    smax = sig[np.argmax(sig.real)]
    assert abs(smax.real) < 1e-3
    assert abs(abs(smax.imag) - 0.269) < 2e-3


def test_permutation_invariance():
    sel = BasisSelection(lattice=((0, 0), (1, 0)), roots_1d=3, roots_2d=3)
    b1 = build_basis(CFG, CELL, sel)
    sel2 = BasisSelection(lattice=((1, 0), (0, 0)), roots_1d=3, roots_2d=3)
    b2 = build_basis(CFG, CELL, sel2)
    L1 = assemble_linear(b1, CFG).to_dense()
    L2 = assemble_linear(b2, CFG).to_dense()
    assert np.array_equal(L1, L2)


def test_linear_operator_npz_roundtrip(tmp_path, mixed_operators):
    L, _ = mixed_operators
    path = tmp_path / "L.npz"
    L.save_npz(path)
    L2 = LinearOperator.load_npz(path)
    assert np.array_equal(L.to_dense(), L2.to_dense())
    assert L2.basis_checksum == L.basis_checksum


# ---------------------------------------------------------------------------
# coupling tensor
# ---------------------------------------------------------------------------

def test_tensor_all_1d_triples_zero(mixed_operators, mixed_basis):
    _, T = mixed_operators
    one_d = [i for i, m in enumerate(mixed_basis) if m.key.d == 0]
    stored = set(zip(T.alpha.tolist(), T.beta.tolist(), T.gamma.tolist()))
    for a in one_d[:4]:
        for b in one_d[:4]:
            for g in one_d[:4]:
                assert (a, b, g) not in stored
                assert T.lookup(a, b, g) == 0.0


def test_tensor_diagonal_in_last_two_zero(mixed_operators):
    _, T = mixed_operators
    assert np.all(T.beta != T.gamma)
    assert T.lookup(3, 20, 20) == 0.0


def test_tensor_skew_by_construction(mixed_operators):
    _, T = mixed_operators
    for j in range(0, T.nnz, max(T.nnz // 100, 1)):
        a, b, g = int(T.alpha[j]), int(T.beta[j]), int(T.gamma[j])
        assert T.lookup(a, b, g) == -T.lookup(a, g, b)


def test_specific_entry_against_quadrature_oracle(mixed_basis, mixed_operators):
    # (alpha, beta) 2D antisymmetric at m_c, gamma = first 1D symmetric mode
    _, T = mixed_operators
    a = next(i for i, m in enumerate(mixed_basis)
             if m.key.d == 1 and m.key.s == 0 and m.key.i_m == 1
             and m.key.i_k == 0 and m.key.o_x == 0 and m.key.mu_index == 1)
    b = next(i for i, m in enumerate(mixed_basis)
             if m.key.d == 1 and m.key.s == 0 and m.key.i_m == 1
             and m.key.i_k == 0 and m.key.o_x == 1 and m.key.mu_index == 1)
    g = next(i for i, m in enumerate(mixed_basis)
             if m.key.d == 0 and m.key.s == SYMMETRIC and m.key.kappa == 0
             and m.key.mu_index == 1)
    oracle = coupling_quadrature(mixed_basis[g], mixed_basis[a],
                                 mixed_basis[b], mixed_basis.cell)
    assert oracle != 0.0
    assert T.lookup(a, b, g) == pytest.approx(oracle, abs=1e-9)


def test_random_stored_entries_match_oracle(mixed_basis, mixed_operators, rng):
    _, T = mixed_operators
    picks = rng.choice(T.nnz, size=25, replace=False)
    for j in picks:
        a, b, g = int(T.alpha[j]), int(T.beta[j]), int(T.gamma[j])
        oracle = coupling_quadrature(mixed_basis[g], mixed_basis[a],
                                     mixed_basis[b], mixed_basis.cell)
        assert T.value[j] == pytest.approx(oracle, abs=2e-11)


def test_skew_symmetry_via_independent_quadrature(mixed_basis,
                                                  mixed_operators, rng):
    _, T = mixed_operators
    picks = rng.choice(T.nnz, size=20, replace=False)
    for j in picks:
        a, b, g = int(T.alpha[j]), int(T.beta[j]), int(T.gamma[j])
        q1 = coupling_quadrature(mixed_basis[g], mixed_basis[a],
                                 mixed_basis[b], mixed_basis.cell)
        q2 = coupling_quadrature(mixed_basis[b], mixed_basis[a],
                                 mixed_basis[g], mixed_basis.cell)
        assert abs(q1 + q2) < 1e-12


def test_lateral_selection_rule(mixed_basis, mixed_operators, rng):
    _, T = mixed_operators
    n = len(mixed_basis)
    checked = 0
    while checked < 40:
        a, b, g = rng.integers(0, n, 3)
        ka = mixed_basis[int(a)].key
        kb = mixed_basis[int(b)].key
        kg = mixed_basis[int(g)].key
        ok_m = kg.i_m in (ka.i_m + kb.i_m, abs(ka.i_m - kb.i_m))
        ok_k = kg.i_k in (ka.i_k + kb.i_k, abs(ka.i_k - kb.i_k))
        if ok_m and ok_k:
            continue
        assert T.lookup(int(a), int(b), int(g)) == 0.0
        oracle = coupling_quadrature(mixed_basis[int(g)], mixed_basis[int(a)],
                                     mixed_basis[int(b)], mixed_basis.cell)
        assert abs(oracle) < 1e-12
        checked += 1


def test_nonlinear_term_energy_neutral(mixed_operators, mixed_basis, rng):
    _, T = mixed_operators
    for _ in range(100):
        c = rng.normal(0, 0.2, len(mixed_basis))
        assert abs(c @ T.contract(c)) < 1e-10


def test_tensor_active_subset(mixed_basis):
    active = np.arange(0, len(mixed_basis), 2)
    T = assemble_tensor(mixed_basis, active=active)
    allowed = set(active.tolist())
    assert set(T.alpha.tolist()) <= allowed
    assert set(T.beta.tolist()) <= allowed
    assert set(T.gamma.tolist()) <= allowed


def test_octave_filter_subset(mixed_basis, mixed_operators):
    _, T = mixed_operators
    Tf = assemble_tensor(mixed_basis, octave_filter=True)
    assert Tf.nnz <= T.nnz
    full = {(int(a), int(b), int(g)): v for a, b, g, v in
            zip(T.alpha, T.beta, T.gamma, T.value)}
    for a, b, g, v in zip(Tf.alpha, Tf.beta, Tf.gamma, Tf.value):
        assert full[(int(a), int(b), int(g))] == v


def test_tensor_serialization_roundtrip(tmp_path, mixed_operators):
    _, T = mixed_operators
    path = tmp_path / "T.npz"
    T.save_npz(path)
    T2 = CouplingTensor.load_npz(path)
    assert np.array_equal(T.value, T2.value)
    assert np.array_equal(T.gamma, T2.gamma)
    jpath = tmp_path / "T.json"
    T.save_json(jpath)
    import json
    T3 = CouplingTensor.from_json_dict(json.loads(jpath.read_text()))
    assert np.array_equal(T.value, T3.value)
    assert T3.basis_checksum == T.basis_checksum


def test_quadrature_convergence_of_assembly(mixed_basis, mixed_operators):
    # doubling the wall-normal nodes leaves every entry fixed to 1e-12
    _, T = mixed_operators
    T2 = assemble_tensor(mixed_basis, node_factor=2.0)
    assert T.nnz == T2.nnz
    assert np.max(np.abs(T.value - T2.value)) < 1e-12


# ---------------------------------------------------------------------------
# rhs
# ---------------------------------------------------------------------------

def test_rhs_fixed_point_at_zero(mixed_operators):
    L, T = mixed_operators
    c = np.zeros(L.n)
    assert np.all(rhs(c, L, T) == 0.0)


def test_rhs_single_mode_linear(mixed_operators):
    L, T = mixed_operators
    e = np.zeros(L.n)
    e[5] = 1.0
    empty = CouplingTensor(n_modes=L.n, alpha=np.empty(0, np.int32),
                           beta=np.empty(0, np.int32),
                           gamma=np.empty(0, np.int32), value=np.empty(0))
    got = rhs(e, L, empty)
    assert np.allclose(got, L.to_dense() @ e, atol=0)


def test_rhs_quadratic_energy_transfer_zero(mixed_operators, rng):
    L, T = mixed_operators
    for _ in range(20):
        c = rng.normal(0, 0.3, L.n)
        quad_part = rhs(c, L, T) - L.matvec(c)
        assert abs(c @ quad_part) < 1e-10


def test_rhs_dimension_mismatch(mixed_operators):
    L, T = mixed_operators
    with pytest.raises(ValueError):
        rhs(np.zeros(L.n + 1), L, T)


# ---------------------------------------------------------------------------
# verification paths
# ---------------------------------------------------------------------------

def test_viscous_diagonal_identity(mixed_basis, rng):
    re = mixed_basis.cfg.reynolds
    n = len(mixed_basis)
    for _ in range(40):
        g, a = rng.integers(0, n, 2)
        visc, pcorr = viscous_diagonal_quadrature(mixed_basis[int(g)],
                                                  mixed_basis[int(a)],
                                                  mixed_basis.cell, re)
        target = -mixed_basis[int(a)].lam if g == a else 0.0
        assert abs(visc - pcorr - target) < 1e-8


def test_pressure_projection_check_1d_trivial(mixed_basis, cfg_re1e4):
    one_d = next(m for m in mixed_basis if m.key.d == 0)
    other = next(m for m in mixed_basis if m.key.d == 1)
    out = pressure_projection_check(one_d, other, cfg_re1e4, mixed_basis.cell)
    assert out["projection"] == 0.0


def test_pressure_projection_check_2d(mixed_basis, cfg_re1e4):
    alphas = [m for m in mixed_basis if m.key.d == 1][:4]
    gammas = list(mixed_basis)[:: max(len(mixed_basis) // 10, 1)]
    for a in alphas:
        for g in gammas:
            out = pressure_projection_check(a, g, cfg_re1e4, mixed_basis.cell)
            assert out["projection"] < 1e-8
            assert out["ode_residual"] < 1e-9
