import numpy as np
import pytest

from channelmodes import BasisSelection, Cell, FlowConfig, build_basis

M_C = 1.0203


@pytest.fixture(scope="session")
def cell_mc():
    return Cell(delta_m=M_C, delta_k=M_C)


@pytest.fixture(scope="session")
def cfg_re1e4():
    return FlowConfig(reynolds=1e4, slip_length=0.0)


@pytest.fixture(scope="session")
def mixed_basis(cfg_re1e4, cell_mc):
    """Small basis containing every family (1D/2D/3D, both symmetries)."""
    sel = BasisSelection(lattice=((0, 0), (1, 0), (0, 1), (2, 0), (1, 1)),
                         roots_1d=6, roots_2d=3, roots_3d=2)
    return build_basis(cfg_re1e4, cell_mc, sel)


@pytest.fixture(scope="session")
def mixed_operators(mixed_basis, cfg_re1e4):
    from channelmodes.operators import assemble_linear, assemble_tensor
    return (assemble_linear(mixed_basis, cfg_re1e4),
            assemble_tensor(mixed_basis))


@pytest.fixture(scope="session")
def ledger_setup():
    """Ledger-grade system: 64 roots per 1D family, one 2D octave."""
    from channelmodes.operators import assemble_linear, assemble_tensor
    cfg = FlowConfig(reynolds=5000.0)
    cell = Cell(delta_m=M_C, delta_k=M_C)
    sel = BasisSelection(lattice=((0, 0), (1, 0)), roots_1d=64, roots_2d=6)
    basis = build_basis(cfg, cell, sel)
    return cfg, basis, assemble_linear(basis, cfg), assemble_tensor(basis)


@pytest.fixture()
def rng():
    return np.random.default_rng(20240811)
