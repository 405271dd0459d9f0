"""Inner products over the periodic cell, Gram verification, projection.

The lateral factors of every inner product are exact (full-period trig
integrals through the phase algebra in _quad); only the wall-normal
profile product is integrated numerically, with Gauss-Legendre rules
doubled until two successive levels agree to 1e-12.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _quad
from .basis import (UX, UY, UZ, BasisSet, Cell, Mode)

QUAD_TOL = 1e-12
GRAM_TOL = 1e-8


def _pair_terms(a: Mode, b: Mode, cell: Cell):
    """Nonvanishing component overlaps of two modes: (amp, prof_a, prof_b)."""
    terms = []
    for comp in (UX, UY, UZ):
        aa, ab = a.amplitude(comp), b.amplitude(comp)
        if aa == 0.0 or ab == 0.0:
            continue
        sa, fxa, fya = a.phase(comp)
        sb, fxb, fyb = b.phase(comp)
        ix = _quad.phase_integral([fxa, fxb], cell.half_length)
        if ix == 0.0:
            continue
        iy = _quad.phase_integral([fya, fyb], cell.half_width)
        if iy == 0.0:
            continue
        terms.append((aa * ab * sa * sb * ix * iy,
                      a.profile_id(comp), b.profile_id(comp)))
    return terms


def inner_product(a: Mode, b: Mode, cell: Cell, tol: float = QUAD_TOL) -> float:
    """<u_a, u_b> over the cell; exactly 0.0 when selection rules fail."""
    terms = _pair_terms(a, b, cell)
    if not terms:
        return 0.0
    # below ~1e-14 the doubling comparison only sees rounding noise
    tol = max(tol, 1e-14)
    n = _quad.gauss_level(a.key.mu + b.key.mu + max(a.nu, b.nu))
    prev = None
    while True:
        z, w = _quad.gauss_rule(n)
        total = 0.0
        for coeff, pa, pb in terms:
            total += coeff * float(np.dot(w, a.profile(pa, z) * b.profile(pb, z)))
        if prev is not None and abs(total - prev) <= tol * max(1.0, abs(total)):
            return total
        prev = total
        n *= 2
        if n > 2 ** 13:
            raise RuntimeError("inner product quadrature did not converge")


@dataclass(frozen=True)
class GramReport:
    """Orthonormality audit of a full basis."""

    max_offdiag: float
    max_diag_dev: float
    worst_pair: tuple[int, int]
    n_modes: int
    tol: float = GRAM_TOL

    @property
    def orthonormal(self) -> bool:
        return self.max_offdiag <= self.tol and self.max_diag_dev <= self.tol

    def to_dict(self) -> dict:
        return {"max_offdiag": self.max_offdiag, "max_diag_dev": self.max_diag_dev,
                "worst_pair": list(self.worst_pair), "n_modes": self.n_modes,
                "tol": self.tol, "orthonormal": self.orthonormal}


def profile_matrix(modes, prof_of, z) -> np.ndarray:
    """Rows of wall-normal profiles on the nodes; prof_of maps mode -> prof id."""
    out = np.empty((len(modes), len(z)))
    for i, mode in enumerate(modes):
        out[i] = mode.profile(prof_of(mode), z)
    return out


def gram_dense(basis: BasisSet) -> np.ndarray:
    """Full Gram matrix; off-block entries are exact zeros by construction."""
    n = len(basis)
    G = np.zeros((n, n))
    for _, idx in basis.blocks().items():
        mu_max = max(basis[i].key.mu for i in idx)
        nu_max = max(basis[i].nu for i in idx)
        nn = _quad.gauss_level(2.0 * mu_max + nu_max)
        z, w = _quad.gauss_rule(nn)
        modes = [basis[i] for i in idx]
        # f profiles feed u_x/u_y, g profiles feed u_z
        Pf = np.empty((len(modes), len(z)))
        Pg = np.empty((len(modes), len(z)))
        for r, mode in enumerate(modes):
            Pf[r] = mode.profile(0, z)
            Pg[r] = mode.profile(1, z)
        Zff = (Pf * w) @ Pf.T
        Zgg = (Pg * w) @ Pg.T
        for r, a in enumerate(modes):
            for c, b in enumerate(modes):
                if c < r:
                    continue
                val = 0.0
                for comp in (UX, UY, UZ):
                    aa, ab = a.amplitude(comp), b.amplitude(comp)
                    if aa == 0.0 or ab == 0.0:
                        continue
                    sa, fxa, fya = a.phase(comp)
                    sb, fxb, fyb = b.phase(comp)
                    ix = _quad.phase_integral([fxa, fxb], basis.cell.half_length)
                    if ix == 0.0:
                        continue
                    iy = _quad.phase_integral([fya, fyb], basis.cell.half_width)
                    if iy == 0.0:
                        continue
                    zint = Zgg[r, c] if comp == UZ else Zff[r, c]
                    val += aa * ab * sa * sb * ix * iy * zint
                G[idx[r], idx[c]] = val
                G[idx[c], idx[r]] = val
    return G


def gram_matrix(basis: BasisSet) -> GramReport:
    """Audit orthonormality; stores the report on the basis and returns it."""
    G = gram_dense(basis)
    n = len(basis)
    diag_dev = np.abs(np.diag(G) - 1.0)
    off = np.abs(G - np.diag(np.diag(G)))
    worst_flat = int(np.argmax(off))
    worst = (worst_flat // n, worst_flat % n)
    if off[worst] == 0.0:
        worst = (0, 0)
    report = GramReport(max_offdiag=float(off.max(initial=0.0)),
                        max_diag_dev=float(diag_dev.max(initial=0.0)),
                        worst_pair=worst, n_modes=n)
    basis.gram_report = report
    return report


def project_field(field, basis: BasisSet, n_lateral: int = 48,
                  n_z: int = 160, use_mass_matrix: bool = False):
    """Project a velocity field onto the basis.

    field(x, y, z) must return the (3, ...) velocity at broadcastable
    points. Lateral integrals use uniform grids over full periods
    (spectrally accurate for the periodic integrands this toolkit
    produces); the wall-normal integral uses Gauss-Legendre. Returns
    (coefficients, relative L2 reconstruction error).

    With use_mass_matrix=True the coefficients solve the Gram-weighted
    system instead of assuming orthonormality (fallback for bases whose
    Gram audit failed).
    """
    cell = basis.cell
    L, W = cell.half_length, cell.half_width
    x = -L + 2.0 * L * (np.arange(n_lateral) + 0.5) / n_lateral
    y = -W + 2.0 * W * (np.arange(n_lateral) + 0.5) / n_lateral
    z, wz = _quad.gauss_rule(n_z)
    X = x[:, None, None]
    Y = y[None, :, None]
    Z = z[None, None, :]
    F = np.asarray(field(X, Y, Z), dtype=float)
    if F.shape != (3, n_lateral, n_lateral, n_z):
        F = np.broadcast_to(F, (3, n_lateral, n_lateral, n_z)).copy()
    wxy = (2.0 * L / n_lateral) * (2.0 * W / n_lateral)
    Fz = F @ wz  # z-contracted, shape (3, nx, ny)
    field_norm_sq = wxy * float(np.einsum("cxyz,cxyz,z->", F, F, wz))

    coeffs = np.empty(len(basis))
    for i, mode in enumerate(basis):
        acc = 0.0
        for comp in (UX, UY, UZ):
            a = mode.amplitude(comp)
            if a == 0.0:
                continue
            prof = mode.profile(mode.profile_id(comp), z)
            # z first, then lateral sums against the mode's phases
            g = np.einsum("xyz,z->xy", F[comp], wz * prof)
            px = mode.phase_values(comp, x[:, None], y[None, :])
            acc += a * wxy * float(np.sum(g * px))
        coeffs[i] = acc
    if use_mass_matrix:
        G = gram_dense(basis)
        coeffs = np.linalg.solve(G, coeffs)
        recon_sq = float(coeffs @ G @ coeffs)
    else:
        recon_sq = float(coeffs @ coeffs)
    resid_sq = max(field_norm_sq - recon_sq, 0.0)
    rel = math.sqrt(resid_sq / field_norm_sq) if field_norm_sq > 0 else 0.0
    return coeffs, rel
