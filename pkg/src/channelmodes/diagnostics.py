"""Physical observables of evolved trajectories.

Net flow rate, the energy-conservation ledger dE/dt = W_p - W_d, the
counter-flow profile carried by the 1D symmetric modes, force accounting
in units of the applied-pressure force F0, and gridded field export.

Closure caveat: the ledger and the force identity are written in the
coefficients w of the total field, whose base-flow part is the truncated
1D-symmetric expansion of the exact profile used inside the operators.
Their residuals therefore shrink with the 1D symmetric root count; bases
meant for quantitative ledger work should carry >= 48 roots per 1D family.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import (PROF_F, SYMMETRIC, UX, X_BRANCH, BasisSet, FlowConfig,
                    PoiseuilleField, expand_poiseuille, mode_flow_rate,
                    poiseuille)
from .operators import CouplingTensor, LinearOperator, rhs

#: ledger residual bound, relative to max(W_p, W_d, |dE/dt|)
LEDGER_RTOL = 1e-6


class LedgerViolation(RuntimeError):
    """Energy ledger residual exceeded tolerance."""


def flow_rate_vector(basis: BasisSet) -> np.ndarray:
    """Per-mode net flow rates q_a; zero except for 1D symmetric x modes."""
    return np.asarray([mode_flow_rate(m, basis.cell) for m in basis])


def net_flow_rate(c: np.ndarray, basis: BasisSet,
                  pois: PoiseuilleField) -> float:
    """Q = Q^P + sum over 1D symmetric modes of c_a q_a."""
    return float(pois.flow_rate + flow_rate_vector(basis) @ c)


def onedim_symmetric_indices(basis: BasisSet) -> np.ndarray:
    return np.asarray([i for i, m in enumerate(basis)
                       if m.key.d == 0 and m.key.s == SYMMETRIC
                       and m.key.kappa == X_BRANCH], dtype=np.intp)


FAMILY_NAMES = ("1d-antisym", "1d-sym", "2d-antisym", "2d-sym",
                "3d-antisym", "3d-sym")


def family_energy_shares(c: np.ndarray, basis: BasisSet) -> dict[str, float]:
    """Fractions of the perturbation energy 0.5*sum(c^2) per mode family."""
    total = float(c @ c)
    shares = dict.fromkeys(FAMILY_NAMES, 0.0)
    if total == 0.0:
        return shares
    for i, mode in enumerate(basis):
        shares[mode.key.family] += float(c[i] ** 2) / total
    return shares


@dataclass
class EnergyLedger:
    """Discrete energy-conservation statement of one sampled trajectory."""

    times: np.ndarray
    e_kin: np.ndarray
    dedt: np.ndarray          # centered differences (one-sided at the ends)
    w_p: np.ndarray
    w_d: np.ndarray
    residual: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.maximum.reduce([self.w_p, self.w_d, np.abs(self.dedt)])

    def max_relative_residual(self) -> float:
        return float(np.max(np.abs(self.residual) / np.maximum(self.scale, 1e-300)))

    def integrated_mismatch(self) -> float:
        """|Delta E - trapezoid integral of (W_p - W_d)|, relative."""
        de = self.e_kin - self.e_kin[0]
        integ = np.concatenate(
            [[0.0], np.cumsum(np.diff(self.times)
                              * 0.5 * ((self.w_p - self.w_d)[1:]
                                       + (self.w_p - self.w_d)[:-1]))])
        denom = max(np.max(np.abs(de)), np.max(np.abs(integ)), 1e-300)
        return float(np.max(np.abs(de - integ)) / denom)

    def check(self, rtol: float = LEDGER_RTOL) -> None:
        worst = self.max_relative_residual()
        if worst > rtol:
            raise LedgerViolation(
                f"ledger residual {worst:.3e} exceeds {rtol:.1e} "
                "(dt too large, cadence too coarse, or a broken tensor)")


def energy_ledger(times: np.ndarray, coefficients: np.ndarray,
                  basis: BasisSet, cfg: FlowConfig,
                  base_amplitude: float = 1.0) -> EnergyLedger:
    """Ledger series over a sampled trajectory window.

    w adds the Poiseuille projection onto the 1D symmetric modes to the
    perturbation coefficients; E = 0.5 |w|^2, W_d = sum lambda_a w_a^2,
    W_p = |dP0/dx| * 4LW * sum over 1D symmetric modes of w_a q_a, and
    dE/dt uses centered differences of E on the sample grid.
    """
    pois = poiseuille(cfg, amplitude=base_amplitude)
    b, _ = expand_poiseuille(pois, basis)
    q = flow_rate_vector(basis)
    lam = basis.lambdas()
    W = coefficients + b[None, :]
    e_kin = 0.5 * np.einsum("ij,ij->i", W, W)
    w_d = W ** 2 @ lam
    w_p = abs(pois.pressure_gradient) * basis.cell.area * (W @ q)
    dedt = np.gradient(e_kin, times, edge_order=2)
    residual = dedt - (w_p - w_d)
    return EnergyLedger(times=np.asarray(times), e_kin=e_kin, dedt=dedt,
                        w_p=w_p, w_d=w_d, residual=residual)


def counter_flow_profile(c: np.ndarray, basis: BasisSet,
                         z: np.ndarray) -> dict:
    """Streamwise counter-flow v_x^c(z): the 1D symmetric content of c.

    Returns the profile on z, the per-mode decomposition, and the analytic
    wall slopes (the finite-difference cross-check lives in the tests).
    """
    z = np.asarray(z, dtype=float)
    idx = onedim_symmetric_indices(basis)
    v = np.zeros_like(z)
    slopes = {1.0: 0.0, -1.0: 0.0}
    decomposition = []
    for i in idx:
        mode = basis[i]
        amp = c[i] * mode.amplitude(UX)
        v += amp * mode.profile(PROF_F, z)
        for wall in (1.0, -1.0):
            slopes[wall] += float(amp * mode.profile(PROF_F, np.array([wall]),
                                                     deriv=1)[0])
        decomposition.append({"index": int(i), "mu": mode.key.mu,
                              "coefficient": float(c[i]),
                              "amplitude": float(amp)})
    return {"z": z, "v_x": v, "slope_top": slopes[1.0],
            "slope_bottom": slopes[-1.0], "modes": decomposition}


@dataclass
class ForceReport:
    """Inertial vs boundary force series in units of F0 = volume * |dP0/dx|."""

    times: np.ndarray
    f_inertial: np.ndarray
    f_boundary: np.ndarray
    slope_top: np.ndarray
    slope_bottom: np.ndarray
    f0: float

    def window_averages(self) -> dict[str, float]:
        return {"f_inertial": float(np.mean(self.f_inertial)),
                "f_boundary": float(np.mean(self.f_boundary)),
                "slope_top": float(np.mean(self.slope_top)),
                "slope_bottom": float(np.mean(self.slope_bottom))}

    def max_identity_gap(self) -> float:
        return float(np.max(np.abs(self.f_inertial - self.f_boundary)))


def force_accounting(times: np.ndarray, coefficients: np.ndarray,
                     basis: BasisSet, cfg: FlowConfig,
                     linop: LinearOperator, tensor: CouplingTensor | None,
                     base_amplitude: float = 1.0) -> ForceReport:
    """Two independent computations of the net streamwise force from the
    counter flow, in F0 units.

    f_inertial is d/dt of the represented volume momentum, evaluated
    exactly as 4LW * q . (dc/dt) through the assembled operators;
    f_boundary is the wall friction (1/Re) * 4LW * ([dv/dz]_{+1} -
    [dv/dz]_{-1}) from the analytic wall slopes of the counter flow.
    Their agreement is an operator-consistency identity.
    """
    pois = poiseuille(cfg, amplitude=base_amplitude)
    area = basis.cell.area
    f0 = 2.0 * area * abs(pois.pressure_gradient)  # volume * |dP0/dx|
    q = flow_rate_vector(basis)
    idx = onedim_symmetric_indices(basis)
    slope_coeff = np.zeros((2, len(basis)))
    for i in idx:
        mode = basis[i]
        a = mode.amplitude(UX)
        slope_coeff[0, i] = a * mode.profile(PROF_F, np.array([1.0]), deriv=1)[0]
        slope_coeff[1, i] = a * mode.profile(PROF_F, np.array([-1.0]), deriv=1)[0]

    n = len(times)
    f_in = np.empty(n)
    top = coefficients @ slope_coeff[0]
    bot = coefficients @ slope_coeff[1]
    for j in range(n):
        dcdt = rhs(coefficients[j], linop, tensor)
        f_in[j] = area * float(q @ dcdt)
    f_bd = (area / cfg.reynolds) * (top - bot)
    return ForceReport(times=np.asarray(times), f_inertial=f_in / f0,
                       f_boundary=f_bd / f0, slope_top=top, slope_bottom=bot,
                       f0=f0)


def field_grid_export(c: np.ndarray, basis: BasisSet, x: np.ndarray,
                      y: np.ndarray, z: np.ndarray,
                      pois: PoiseuilleField | None = None,
                      include_pressure: bool = False) -> dict:
    """Gridded total velocity and vorticity: sum_a c_a u_a (+ base flow).

    Vorticity comes from the analytic curl of each mode (plus -2Az of the
    base profile), never from finite differences. Arrays are indexed
    (x, y, z); pass pois=None for the perturbation field alone.
    """
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    z = np.atleast_1d(np.asarray(z, float))
    X, Y, Z = x[:, None, None], y[None, :, None], z[None, None, :]
    shape = (len(x), len(y), len(z))
    u = np.zeros((3,) + shape)
    w = np.zeros((3,) + shape)
    p = np.zeros(shape) if include_pressure else None
    live = np.flatnonzero(np.abs(c) > 0)
    for i in live:
        mode = basis[i]
        u += c[i] * mode.evaluate(X, Y, Z)
        w += c[i] * mode.curl(X, Y, Z)
        if include_pressure:
            p += c[i] * mode.pressure(X, Y, Z)
    if pois is not None:
        u[0] += pois.profile(Z)
        w[1] += pois.dprofile(Z)
    out = {"x": x, "y": y, "z": z, "u": u, "vorticity": w}
    if include_pressure:
        out["pressure"] = p
    return out


def trajectory_observables(times: np.ndarray, coefficients: np.ndarray,
                           basis: BasisSet, cfg: FlowConfig,
                           base_amplitude: float = 1.0) -> dict:
    """Standard per-sample series: flow rate, ledger columns, norm, shares."""
    pois = poiseuille(cfg, amplitude=base_amplitude)
    ledger = energy_ledger(times, coefficients, basis, cfg, base_amplitude)
    q = flow_rate_vector(basis)
    out = {
        "t": np.asarray(times),
        "Q": pois.flow_rate + coefficients @ q,
        "Q_rel": (pois.flow_rate + coefficients @ q) / pois.flow_rate,
        "E_kin": ledger.e_kin,
        "W_p": ledger.w_p,
        "W_d": ledger.w_d,
        "residual": ledger.residual,
        "c_norm": np.linalg.norm(coefficients, axis=1),
    }
    shares = [family_energy_shares(coefficients[j], basis)
              for j in range(len(times))]
    for fam in FAMILY_NAMES:
        out[f"share_{fam}"] = np.asarray([s[fam] for s in shares])
    return out
