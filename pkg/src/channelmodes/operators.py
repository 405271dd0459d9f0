"""Reduction of the Navier-Stokes equation onto the mode basis.

The perturbation coefficients obey

    dc_g/dt = sum_a L_ga c_a - sum_ab N_abg c_a c_b

with L the block-diagonal linear operator (base-flow advection plus the
viscous diagonal -lambda) and N the sparse third-rank coupling tensor
N_abg = <u_g, (u_a . grad) u_b>, skew in its last two indices. Both are
functions of (Re, l_s) only. All lateral integrals are exact; wall-normal
integrals are Gauss-Legendre on grids sized by the largest wavevector sum.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from . import _quad
from .basis import (PROF_F, PROF_G, PROF_P, UX, UY, UZ, BasisSet, Cell,
                    FlowConfig, Mode, PoiseuilleField, f17, poiseuille)

try:  # optional accelerator for the contraction hot loop
    from numba import njit as _njit
except ImportError:  # pragma: no cover - exercised only without numba
    _njit = None

#: coordinate entries with |value| below this are not stored
TENSOR_DROP_TOL = 1e-14


if _njit is not None:
    @_njit(cache=False)
    def _contract_pairs(ha, hb, hg, hv, c, out):  # pragma: no cover - jitted
        for i in range(len(hv)):
            p = hv[i] * c[ha[i]]
            out[hg[i]] += p * c[hb[i]]
            out[hb[i]] -= p * c[hg[i]]
else:
    _contract_pairs = None


# ---------------------------------------------------------------------------
# linear operator
# ---------------------------------------------------------------------------

class LinearOperator:
    """Block-diagonal linear operator over a basis.

    blocks[(i_m, i_k)] is the dense sub-matrix acting on the coefficient
    sub-vector block_index[(i_m, i_k)]; entries between different lateral
    wavevector pairs are identically zero and never stored.
    """

    def __init__(self, n: int, block_index: dict, blocks: dict,
                 basis_checksum: str = "", meta: dict | None = None):
        self.n = n
        self.block_index = block_index
        self.blocks = blocks
        self.basis_checksum = basis_checksum
        self.meta = dict(meta or {})

    def matvec(self, c: np.ndarray) -> np.ndarray:
        out = np.zeros_like(c)
        for lat, idx in self.block_index.items():
            out[idx] = self.blocks[lat] @ c[idx]
        return out

    def to_dense(self) -> np.ndarray:
        M = np.zeros((self.n, self.n))
        for lat, idx in self.block_index.items():
            M[np.ix_(idx, idx)] = self.blocks[lat]
        return M

    def save_npz(self, path) -> None:
        arrays = {}
        for (im, ik), idx in self.block_index.items():
            arrays[f"idx_{im}_{ik}"] = idx
            arrays[f"blk_{im}_{ik}"] = self.blocks[(im, ik)]
        header = json.dumps({"n": self.n, "basis_checksum": self.basis_checksum,
                             "meta": self.meta})
        np.savez_compressed(path, __header__=np.frombuffer(header.encode(), np.uint8),
                            **arrays)

    @classmethod
    def load_npz(cls, path) -> "LinearOperator":
        data = np.load(path)
        header = json.loads(bytes(data["__header__"]).decode())
        block_index, blocks = {}, {}
        for name in data.files:
            if name.startswith("idx_"):
                _, im, ik = name.split("_")
                lat = (int(im), int(ik))
                block_index[lat] = data[name]
                blocks[lat] = data[f"blk_{im}_{ik}"]
        return cls(header["n"], block_index, blocks,
                   header["basis_checksum"], header["meta"])


def _block_nodes(modes) -> tuple[np.ndarray, np.ndarray]:
    mu_max = max(m.key.mu for m in modes)
    nu_max = max(m.nu for m in modes)
    n = _quad.gauss_level(2.0 * mu_max + nu_max + 4.0)
    return _quad.gauss_rule(n)


_SQRT2 = math.sqrt(2.0)


def _pvec(factor, sign: float) -> tuple[float, float]:
    """Phase factor as a (sin, cos) coefficient pair scaled so that the
    full-period integral of two factors is half_length * dot(v1, v2)."""
    q, kind = factor
    if kind == _quad.ONE or (kind == _quad.COS and q == 0):
        return (0.0, _SQRT2 * sign)
    if q == 0:
        return (0.0, 0.0)
    return (sign, 0.0) if kind == _quad.SIN else (0.0, sign)


def _dvec(factor, sign: float, step: float) -> tuple[float, float]:
    """(sin, cos) pair of the factor's derivative (wavenumber folded in)."""
    q, kind = factor
    w = q * step
    if kind == _quad.ONE or w == 0.0:
        return (0.0, 0.0)
    if kind == _quad.SIN:
        return (0.0, sign * w)
    return (-sign * w, 0.0)


def advection_block(basis: BasisSet, idx: np.ndarray,
                    pois: PoiseuilleField) -> np.ndarray:
    """Base-flow advection couplings A_ga = <u_g, (uP.grad)u_a + (u_a.grad)uP>
    for one lateral-wavevector block (rows/cols follow idx).

    Every lateral integral reduces to a rank-2 outer product of (sin, cos)
    coefficient pairs, so the block assembles from a handful of weighted
    profile Gram matrices and elementwise products.
    """
    modes = [basis[i] for i in idx]
    cell = basis.cell
    nb = len(modes)
    z, w = _block_nodes(modes)
    up = pois.profile(z)
    dup = pois.dprofile(z)
    Pf = np.empty((nb, len(z)))
    Pg = np.empty((nb, len(z)))
    for r, mode in enumerate(modes):
        Pf[r] = mode.profile(PROF_F, z)
        Pg[r] = mode.profile(PROF_G, z)
    Zff = (Pf * (w * up)) @ Pf.T     # <f_g uP f_a>
    Zgg = (Pg * (w * up)) @ Pg.T     # <g_g uP g_a>
    Zfg = (Pf * (w * dup)) @ Pg.T    # <f_g uP' g_a>

    A = np.zeros((nb, nb))
    L, W = cell.half_length, cell.half_width

    def phase_table(comp):
        amp = np.empty(nb)
        Px = np.empty((nb, 2))
        Py = np.empty((nb, 2))
        Dx = np.empty((nb, 2))
        for r, mode in enumerate(modes):
            amp[r] = mode.amplitude(comp)
            s, fx, fy = mode.phase(comp)
            Px[r] = _pvec(fx, s)  # phase sign carried once, on the x pair
            Py[r] = _pvec(fy, 1.0)
            Dx[r] = _dvec(fx, s, cell.delta_m)
        return amp, Px, Py, Dx

    tables = {comp: phase_table(comp) for comp in (UX, UY, UZ)}
    # T1 = <u_g, uP d/dx u_a>, component by component
    for comp in (UX, UY, UZ):
        amp, Px, Py, Dx = tables[comp]
        if not amp.any():
            continue
        IX = L * (Px @ Dx.T)
        if not IX.any():
            continue
        IY = W * (Py @ Py.T)
        Z = Zgg if comp == UZ else Zff
        A += (amp[:, None] * amp[None, :]) * IX * IY * Z
    # T2 = <(u_g)_x, (u_a)_z uP'>
    ampx, PxX, PyX, _ = tables[UX]
    ampz, PxZ, PyZ, _ = tables[UZ]
    if ampx.any() and ampz.any():
        IX = L * (PxX @ PxZ.T)
        IY = W * (PyX @ PyZ.T)
        A += (ampx[:, None] * ampz[None, :]) * IX * IY * Zfg
    return A


def assemble_linear(basis: BasisSet, cfg: FlowConfig,
                    base_amplitude: float = 1.0) -> LinearOperator:
    """L_ga = -<u_g,(uP.grad)u_a> - <u_g,(u_a.grad)uP> - lambda_a delta_ga.

    The viscous diagonal is the analytic -lambda_a (exact given the
    eigen-relation and the vanishing pressure projection); see
    viscous_diagonal_quadrature for the numerical spot-check path.
    base_amplitude scales the Poiseuille profile (0 is the pure-decay
    test hook, 1/(1+3*l_s) the constant-flow-rate slip convention).
    """
    pois = poiseuille(cfg, amplitude=base_amplitude)
    block_index = basis.blocks()
    blocks = {}
    for lat, idx in block_index.items():
        if base_amplitude == 0.0:
            A = np.zeros((len(idx), len(idx)))
        else:
            A = advection_block(basis, idx, pois)
        lam = np.asarray([basis[i].lam for i in idx])
        blocks[lat] = -A - np.diag(lam)
    return LinearOperator(len(basis), block_index, blocks,
                          basis_checksum=basis.checksum,
                          meta={"reynolds": cfg.reynolds,
                                "slip_length": cfg.slip_length,
                                "base_amplitude": base_amplitude})


# ---------------------------------------------------------------------------
# coupling tensor
# ---------------------------------------------------------------------------

def _mode_comp_specs(mode: Mode):
    """Per-component (comp, coef, fx, fy, prof_id) with signs folded in."""
    specs = []
    for comp in (UX, UY, UZ):
        a = mode.amplitude(comp)
        if a == 0.0:
            continue
        s, fx, fy = mode.phase(comp)
        specs.append((comp, a * s, fx, fy, mode.profile_id(comp)))
    return specs


def _prof_parity(mode: Mode, prof: int, deriv: int) -> int:
    """1 if the wall-normal profile is odd in z, 0 if even."""
    if prof == PROF_G:
        base = 1 if mode.key.s == 1 else 0
    else:  # PROF_F and PROF_P share the f parity
        base = 1 if mode.key.s == 0 else 0
    return (base + deriv) % 2


@dataclass
class CouplingTensor:
    """Sparse coordinate-format tensor N_abg, gamma-major, skew in (b, g)."""

    n_modes: int
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    value: np.ndarray
    basis_checksum: str = ""
    octave_filter: bool = False

    def __post_init__(self):
        order = np.lexsort((self.beta, self.alpha, self.gamma))
        self.alpha = np.ascontiguousarray(self.alpha[order], dtype=np.int32)
        self.beta = np.ascontiguousarray(self.beta[order], dtype=np.int32)
        self.gamma = np.ascontiguousarray(self.gamma[order], dtype=np.int32)
        self.value = np.ascontiguousarray(self.value[order], dtype=np.float64)
        n = np.int64(self.n_modes)
        self._flat = (self.gamma.astype(np.int64) * n
                      + self.alpha.astype(np.int64)) * n + self.beta.astype(np.int64)
        # skew-halved view for the contraction hot loop: each (b, g) pair is
        # stored once (b < g) and contributes with both orientations
        half = self.beta < self.gamma
        self._ha = np.ascontiguousarray(self.alpha[half])
        self._hb = np.ascontiguousarray(self.beta[half])
        self._hg = np.ascontiguousarray(self.gamma[half])
        self._hv = np.ascontiguousarray(self.value[half])

    @property
    def nnz(self) -> int:
        return len(self.value)

    def contract(self, c: np.ndarray) -> np.ndarray:
        """N[c]_g = sum_ab N_abg c_a c_b."""
        out = np.zeros(self.n_modes)
        if _contract_pairs is not None:
            _contract_pairs(self._ha, self._hb, self._hg, self._hv, c, out)
            return out
        p = self._hv * c[self._ha]
        out += np.bincount(self._hg, weights=p * c[self._hb],
                           minlength=self.n_modes)
        out -= np.bincount(self._hb, weights=p * c[self._hg],
                           minlength=self.n_modes)
        return out

    def lookup(self, a: int, b: int, g: int) -> float:
        n = np.int64(self.n_modes)
        key = (np.int64(g) * n + np.int64(a)) * n + np.int64(b)
        pos = np.searchsorted(self._flat, key)
        if pos < len(self._flat) and self._flat[pos] == key:
            return float(self.value[pos])
        return 0.0

    def save_npz(self, path) -> None:
        header = json.dumps({"n_modes": self.n_modes,
                             "basis_checksum": self.basis_checksum,
                             "octave_filter": self.octave_filter})
        np.savez_compressed(path, alpha=self.alpha, beta=self.beta,
                            gamma=self.gamma, value=self.value,
                            __header__=np.frombuffer(header.encode(), np.uint8))

    @classmethod
    def load_npz(cls, path) -> "CouplingTensor":
        data = np.load(path)
        header = json.loads(bytes(data["__header__"]).decode())
        return cls(n_modes=header["n_modes"], alpha=data["alpha"],
                   beta=data["beta"], gamma=data["gamma"], value=data["value"],
                   basis_checksum=header["basis_checksum"],
                   octave_filter=header["octave_filter"])

    def to_json_dict(self) -> dict:
        return {"format": "channelmodes.tensor/1",
                "n_modes": self.n_modes,
                "basis_checksum": self.basis_checksum,
                "octave_filter": self.octave_filter,
                "entries": [[int(a), int(b), int(g), f17(v)]
                            for a, b, g, v in zip(self.alpha, self.beta,
                                                  self.gamma, self.value)]}

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CouplingTensor":
        ent = doc["entries"]
        return cls(n_modes=doc["n_modes"],
                   alpha=np.asarray([e[0] for e in ent], np.int32),
                   beta=np.asarray([e[1] for e in ent], np.int32),
                   gamma=np.asarray([e[2] for e in ent], np.int32),
                   value=np.asarray([float(e[3]) for e in ent]),
                   basis_checksum=doc.get("basis_checksum", ""),
                   octave_filter=doc.get("octave_filter", False))


def _octave_axis_ok(a: int, b: int) -> bool:
    if a == 0 or b == 0 or a == b:
        return True
    lo, hi = min(a, b), max(a, b)
    return hi == 2 * lo


def coupling_value(alpha: Mode, beta: Mode, gamma: Mode, cell: Cell,
                   z: np.ndarray, w: np.ndarray,
                   pvals=None, idx: tuple | None = None) -> float:
    """<u_g, (u_a . grad) u_b> on the given wall-normal quadrature rule.

    pvals/idx allow callers to share cached profile node values keyed by
    (mode position, prof id, deriv).
    """
    L, W = cell.half_length, cell.half_width

    def prof(which: int, mode: Mode, pid: int, deriv: int) -> np.ndarray:
        if pvals is None:
            return mode.profile(pid, z, deriv)
        key = (idx[which], pid, deriv)
        arr = pvals.get(key)
        if arr is None:
            arr = mode.profile(pid, z, deriv)
            pvals[key] = arr
        return arr

    total = 0.0
    for compj, cg, fxg, fyg, pidg in _mode_comp_specs(gamma):
        for compi, ca, fxa, fya, pida in _mode_comp_specs(alpha):
            # (u_a)_i d_i (u_b)_j
            cb0 = beta.amplitude(compj)
            if cb0 == 0.0:
                continue
            sb, fxb, fyb = beta.phase(compj)
            cb = cb0 * sb
            pidb = beta.profile_id(compj)
            if compi == UX:
                dscale, fxb_d = _quad.phase_derivative(fxb, cell.delta_m)
                if dscale == 0.0:
                    continue
                fxB, fyB, derb = fxb_d, fyb, 0
                coeff = cb * dscale
            elif compi == UY:
                dscale, fyb_d = _quad.phase_derivative(fyb, cell.delta_k)
                if dscale == 0.0:
                    continue
                fxB, fyB, derb = fxb, fyb_d, 0
                coeff = cb * dscale
            else:
                fxB, fyB, derb = fxb, fyb, 1
                coeff = cb
            ix = _quad.phase_integral([fxg, fxa, fxB], L)
            if ix == 0.0:
                continue
            iy = _quad.phase_integral([fyg, fya, fyB], W)
            if iy == 0.0:
                continue
            if (_prof_parity(gamma, pidg, 0) + _prof_parity(alpha, pida, 0)
                    + _prof_parity(beta, pidb, derb)) % 2:
                continue
            pg = prof(2, gamma, pidg, 0)
            pa = prof(0, alpha, pida, 0)
            pb = prof(1, beta, pidb, derb)
            total += cg * ca * coeff * ix * iy * float(np.dot(w, pg * pa * pb))
    return total


def assemble_tensor(basis: BasisSet, active: np.ndarray | None = None,
                    octave_filter: bool = False,
                    drop_tol: float = TENSOR_DROP_TOL,
                    node_factor: float = 1.0) -> CouplingTensor:
    """All selection-rule-allowed couplings over the active index set.

    Skew symmetry in the last two indices is enforced by construction: one
    orientation is integrated, both are emitted with opposite signs.
    octave_filter restricts couplings to the doubling cascade (per lateral
    axis the indices must be equal, contain zero, or sit in ratio 2).
    """
    n = len(basis)
    if active is None:
        active = np.arange(n)
    active = np.asarray(sorted(set(int(i) for i in active)))
    if len(active) and (active[0] < 0 or active[-1] >= n):
        raise IndexError("active indices outside the basis")
    groups: dict[tuple[int, int], list[int]] = {}
    for i in active:
        key = basis[i].key
        groups.setdefault((key.i_m, key.i_k), []).append(int(i))

    mu_max = max((basis[i].key.mu for i in active), default=1.0)
    nu_max = max((basis[i].nu for i in active), default=1.0)
    nq = _quad.gauss_level(node_factor * (3.0 * mu_max + nu_max))
    z, w = _quad.gauss_rule(nq)
    pvals: dict = {}

    out_a, out_b, out_g, out_v = [], [], [], []
    lats = sorted(groups)
    lat_set = set(lats)
    for lat_a in lats:
        for lat_b in lats:
            cands = set()
            for sm in (lat_a[0] + lat_b[0], abs(lat_a[0] - lat_b[0])):
                for sk in (lat_a[1] + lat_b[1], abs(lat_a[1] - lat_b[1])):
                    if (sm, sk) in lat_set:
                        cands.add((sm, sk))
            for lat_g in sorted(cands):
                if octave_filter:
                    if not (_octave_axis_ok(lat_a[0], lat_b[0])
                            and _octave_axis_ok(lat_a[1], lat_b[1])):
                        continue
                for ia in groups[lat_a]:
                    ma = basis[ia]
                    for ib in groups[lat_b]:
                        mb = basis[ib]
                        for ig in groups[lat_g]:
                            if ig <= ib:
                                continue
                            mg = basis[ig]
                            n1d = (ma.key.d == 0) + (mb.key.d == 0) + (mg.key.d == 0)
                            if n1d >= 2:
                                continue
                            v = coupling_value(ma, mb, mg, basis.cell, z, w,
                                               pvals, (ia, ib, ig))
                            if abs(v) <= drop_tol:
                                continue
                            out_a += [ia, ia]
                            out_b += [ib, ig]
                            out_g += [ig, ib]
                            out_v += [v, -v]
    return CouplingTensor(n_modes=n,
                          alpha=np.asarray(out_a, np.int32),
                          beta=np.asarray(out_b, np.int32),
                          gamma=np.asarray(out_g, np.int32),
                          value=np.asarray(out_v, np.float64),
                          basis_checksum=basis.checksum,
                          octave_filter=octave_filter)


def rhs(c: np.ndarray, linop: LinearOperator, tensor: CouplingTensor | None) -> np.ndarray:
    """dc/dt = L c - N[c]."""
    if len(c) != linop.n or (tensor is not None and tensor.n_modes != linop.n):
        raise ValueError("dimension mismatch between c, L and N")
    out = linop.matvec(c)
    if tensor is not None and tensor.nnz:
        out -= tensor.contract(c)
    return out


# ---------------------------------------------------------------------------
# verification paths
# ---------------------------------------------------------------------------

def viscous_diagonal_quadrature(gamma: Mode, alpha: Mode, cell: Cell,
                                reynolds: float) -> tuple[float, float]:
    """((1/Re) <u_g, lap u_a>, <u_g, grad p_a>) by quadrature.

    Their difference must equal -lambda_a * delta_ga: the analytic viscous
    diagonal used by assemble_linear.
    """
    n = _quad.gauss_level(2.0 * max(gamma.key.mu, alpha.key.mu)
                          + max(gamma.nu, alpha.nu))
    z, w = _quad.gauss_rule(n)
    L, W = cell.half_length, cell.half_width
    nu2 = alpha.nu ** 2
    visc = 0.0
    for comp in (UX, UY, UZ):
        ag, aa = gamma.amplitude(comp), alpha.amplitude(comp)
        if ag == 0.0 or aa == 0.0:
            continue
        sg, fxg, fyg = gamma.phase(comp)
        sa, fxa, fya = alpha.phase(comp)
        ix = _quad.phase_integral([fxg, fxa], L)
        if ix == 0.0:
            continue
        iy = _quad.phase_integral([fyg, fya], W)
        if iy == 0.0:
            continue
        pid = alpha.profile_id(comp)
        lap = alpha.profile(pid, z, 2) - nu2 * alpha.profile(pid, z)
        pg = gamma.profile(gamma.profile_id(comp), z)
        visc += ag * aa * sg * sa * ix * iy * float(np.dot(w, pg * lap))
    visc /= reynolds
    return visc, pressure_gradient_projection(gamma, alpha, cell)


def pressure_gradient_projection(gamma: Mode, alpha: Mode, cell: Cell) -> float:
    """<u_g, grad p_a> with the closed-form mode pressure (0 for 1D alpha)."""
    if alpha.key.d == 0:
        return 0.0
    n = _quad.gauss_level(2.0 * max(gamma.key.mu, alpha.key.mu)
                          + max(gamma.nu, alpha.nu))
    z, w = _quad.gauss_rule(n)
    L, W = cell.half_length, cell.half_width
    sp, fxp, fyp = alpha.phase(UZ)  # pressure shares u_z's lateral phase
    ap = alpha.norm_constant * sp
    total = 0.0
    for comp, dax in ((UX, "x"), (UY, "y"), (UZ, "z")):
        ag = gamma.amplitude(comp)
        if ag == 0.0:
            continue
        sg, fxg, fyg = gamma.phase(comp)
        if dax == "x":
            dscale, fxd = _quad.phase_derivative(fxp, cell.delta_m)
            if dscale == 0.0:
                continue
            fx2, fy2, der = fxd, fyp, 0
        elif dax == "y":
            dscale, fyd = _quad.phase_derivative(fyp, cell.delta_k)
            if dscale == 0.0:
                continue
            fx2, fy2, der = fxp, fyd, 0
        else:
            dscale, fx2, fy2, der = 1.0, fxp, fyp, 1
        ix = _quad.phase_integral([fxg, fx2], L)
        if ix == 0.0:
            continue
        iy = _quad.phase_integral([fyg, fy2], W)
        if iy == 0.0:
            continue
        pg = gamma.profile(gamma.profile_id(comp), z)
        pp = alpha.profile(PROF_P, z, der)
        total += ag * ap * sg * dscale * ix * iy * float(np.dot(w, pg * pp))
    return total


def pressure_projection_check(alpha: Mode, gamma: Mode, cfg: FlowConfig,
                              cell: Cell, base_amplitude: float = 1.0,
                              n_nodes: int = 2048) -> dict:
    """Solve the advection pressure-Poisson problem for alpha and verify
    that its gradient projects to zero on gamma.

    The advection field w = -(uP.grad)u_a - (u_a.grad)uP induces a pressure
    p with lap p = div-free correction source 4*A*z*d(u_a)_z/dx and
    homogeneous Neumann walls (w_z vanishes there). Returns the projection
    magnitude plus the finite-difference residual of the solved ODE.
    """
    if alpha.key.d == 0:
        return {"projection": 0.0, "ode_residual": 0.0, "n_nodes": n_nodes}
    nu2 = alpha.nu ** 2
    az = alpha.amplitude(UZ)
    sz, fxz, fyz = alpha.phase(UZ)
    dscale, fxp = _quad.phase_derivative(fxz, cell.delta_m)
    fyp = fyz
    if dscale == 0.0:
        return {"projection": 0.0, "ode_residual": 0.0, "n_nodes": n_nodes}

    def solve(n):
        zg = np.linspace(-1.0, 1.0, n)
        h = zg[1] - zg[0]
        rhs_prof = (4.0 * base_amplitude * zg * az * sz * dscale
                    * alpha.profile(PROF_G, zg))
        # tridiagonal (p'' - nu^2 p = rhs) with ghost-node Neumann p'(+-1) = 0
        ab = np.zeros((3, n))
        ab[0, 1:] = 1.0 / h ** 2
        ab[1, :] = -2.0 / h ** 2 - nu2
        ab[2, :-1] = 1.0 / h ** 2
        ab[0, 1] = 2.0 / h ** 2
        ab[2, -2] = 2.0 / h ** 2
        try:
            phat = solve_banded((1, 1), ab, rhs_prof)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
            raise RuntimeError("pressure-Poisson solve failed") from exc
        res = np.abs((phat[:-2] - 2 * phat[1:-1] + phat[2:]) / h ** 2
                     - nu2 * phat[1:-1] - rhs_prof[1:-1]).max()
        return zg, phat, res

    # second-order solves on nested grids, Richardson-combined to O(h^4)
    zg, p_coarse, ode_res = solve(n_nodes if n_nodes % 2 else n_nodes + 1)
    _, p_fine, _ = solve(2 * len(zg) - 1)
    phat = (4.0 * p_fine[::2] - p_coarse) / 3.0

    from scipy.integrate import simpson
    L, W = cell.half_length, cell.half_width
    total = 0.0
    for comp, dax in ((UX, "x"), (UY, "y"), (UZ, "z")):
        ag = gamma.amplitude(comp)
        if ag == 0.0:
            continue
        sg, fxg, fyg = gamma.phase(comp)
        if dax == "x":
            ds2, fx2 = _quad.phase_derivative(fxp, cell.delta_m)
            fy2 = fyp
            pg = gamma.profile(gamma.profile_id(comp), zg)
        elif dax == "y":
            ds2, fy2 = _quad.phase_derivative(fyp, cell.delta_k)
            fx2 = fxp
            pg = gamma.profile(gamma.profile_id(comp), zg)
        else:
            # integral of g_gamma * p' by parts: g_gamma(+-1) = 0 exactly,
            # so no boundary term and no numerical differentiation of p
            ds2, fx2, fy2 = -1.0, fxp, fyp
            pg = gamma.profile(gamma.profile_id(comp), zg, deriv=1)
        if ds2 == 0.0:
            continue
        ix = _quad.phase_integral([fxg, fx2], L)
        if ix == 0.0:
            continue
        iy = _quad.phase_integral([fyg, fy2], W)
        if iy == 0.0:
            continue
        total += ag * sg * ds2 * ix * iy * float(simpson(pg * phat, x=zg))
    scale = max(np.abs(phat).max(), 1.0)
    return {"projection": abs(total), "ode_residual": float(ode_res / scale),
            "n_nodes": n_nodes}
