"""Hydrodynamic-mode basis for incompressible channel flow with Navier slip.

The channel occupies |z| <= 1 between two walls, is periodic over
x in [-L, L], y in [-W, W], and carries a laminar base flow
u_x = 1 - z^2 + 2*l_s driven by a constant pressure gradient -2/Re.

Every basis element ("mode") is an eigenfunction of the linearized
problem, decaying like exp(-lambda*t) with lambda = (mu^2 + nu^2)/Re,
where nu = sqrt(m^2 + k^2) collects the lateral wavevectors and the
wall-normal wavevector mu solves a transcendental dispersion relation
fixed by the slip length. Modes are classified by five indices:

    s      0 antisymmetric (u_x, u_y odd in z), 1 symmetric (even)
    kappa  0 x-branch, 1 y-branch (which lateral component a 1D/2D mode carries)
    d      0 for 1D modes (m = k = 0), 1 for 2D/3D modes
    o_x    0 sin(m x) phase of u_x, 1 cos(m x)
    o_y    0 sin(k y) phase of u_x, 1 cos(k y)

plus the ordinal mu_index of the dispersion root. 2D x-branch modes have
k = 0, o_y = 1; 2D y-branch modes have m = 0, o_x = 0 (the surviving
phase choices); 1D modes carry no lateral phase at all.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _quad
from ._quad import COS, ONE, SIN

ANTISYMMETRIC = 0
SYMMETRIC = 1
X_BRANCH = 0
Y_BRANCH = 1

#: scaled residual bound a solved dispersion root must satisfy
DISPERSION_TOL = 1e-12
#: |cos mu| (antisym) or |sin mu| (sym) below this is a degenerate profile
DEGENERATE_TOL = 1e-14


class DispersionError(RuntimeError):
    """Base class for dispersion-root failures."""


class BracketError(DispersionError):
    """A root could not be isolated inside its scan interval."""


class ConvergenceError(DispersionError):
    """The root refinement did not converge."""


class DegenerateDenominatorError(RuntimeError):
    """A dispersion root coincides with a profile singularity."""


class DomainError(ValueError):
    """Evaluation requested outside |z| <= 1."""


def f17(x: float) -> str:
    """Decimal form with 17 significant digits; round-trips bit-faithfully."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# configuration / geometry / base flow
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowConfig:
    """Reynolds number and slip length (in units of the half gap)."""

    reynolds: float
    slip_length: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.reynolds) and self.reynolds > 0):
            raise ValueError(f"reynolds must be finite and positive, got {self.reynolds}")
        if not (math.isfinite(self.slip_length) and self.slip_length >= 0):
            raise ValueError(f"slip_length must be finite and >= 0, got {self.slip_length}")


@dataclass(frozen=True)
class Cell:
    """Periodic lateral domain: x in [-L, L], y in [-W, W], z in [-1, 1].

    The fundamental wavenumber steps satisfy L = pi/delta_m, W = pi/delta_k;
    every lateral wavevector in a basis is an integer multiple of the step.
    """

    delta_m: float
    delta_k: float

    def __post_init__(self):
        if not (math.isfinite(self.delta_m) and self.delta_m > 0):
            raise ValueError(f"delta_m must be positive, got {self.delta_m}")
        if not (math.isfinite(self.delta_k) and self.delta_k > 0):
            raise ValueError(f"delta_k must be positive, got {self.delta_k}")

    @property
    def half_length(self) -> float:
        return math.pi / self.delta_m

    @property
    def half_width(self) -> float:
        return math.pi / self.delta_k

    @property
    def area(self) -> float:
        return 4.0 * self.half_length * self.half_width

    @property
    def volume(self) -> float:
        return 2.0 * self.area

    @classmethod
    def from_half_lengths(cls, half_length: float, half_width: float) -> "Cell":
        return cls(delta_m=math.pi / half_length, delta_k=math.pi / half_width)


@dataclass(frozen=True)
class PoiseuilleField:
    """Laminar base profile a*(1 - z^2 + 2*l_s) and its bookkeeping.

    amplitude != 1 supports the constant-flow-rate slip convention (the
    profile is rescaled so the rate stays at its nonslip value) and the
    u^P == 0 test hook.
    """

    slip_length: float
    reynolds: float
    amplitude: float = 1.0

    @property
    def flow_rate(self) -> float:
        """Rate per unit lateral area, integral of u_x over the gap."""
        return self.amplitude * 4.0 * (1.0 / 3.0 + self.slip_length)

    @property
    def pressure_gradient(self) -> float:
        return -2.0 * self.amplitude / self.reynolds

    def profile(self, z):
        return self.amplitude * (1.0 - np.asarray(z) ** 2 + 2.0 * self.slip_length)

    def dprofile(self, z):
        return -2.0 * self.amplitude * np.asarray(z)


def poiseuille(cfg: FlowConfig, amplitude: float = 1.0) -> PoiseuilleField:
    """Base flow for cfg; see PoiseuilleField for the amplitude hook."""
    return PoiseuilleField(slip_length=cfg.slip_length, reynolds=cfg.reynolds,
                           amplitude=amplitude)


# ---------------------------------------------------------------------------
# dispersion relations
# ---------------------------------------------------------------------------
#
# Pole-free forms (original relation multiplied by cos mu, resp. sin mu;
# the multiplier is provably nonzero wherever it vanishes on a root-free
# point, so the root sets are unchanged):
#
#   s=0, d=0:  sin(mu) + l_s*mu*cos(mu) = 0
#   s=1, d=0:  cos(mu) - l_s*mu*sin(mu) = 0
#   s=0, d=1:  A*cos(mu) + mu*(l_s*mu*cos(mu) + sin(mu)) = 0,  A = nu*(l_s*nu + tanh(nu))
#   s=1, d=1:  B*sin(mu) + mu*(l_s*mu*sin(mu) - cos(mu)) = 0,  B = nu*(l_s*nu + coth(nu))
#
# Each relation has exactly one root per scan interval and the pole-free
# form changes sign across it, so bisection brackets are guaranteed.

def _relation(s: int, d: int, nu: float, ls: float):
    """Return (F, dF, interval, scale) for the family's pole-free relation."""
    if d == 1 and not nu > 0:
        raise ValueError("2D/3D families require nu > 0")
    if s == ANTISYMMETRIC:
        A = nu * (ls * nu + math.tanh(nu)) if d == 1 else 0.0

        def F(mu):
            return A * math.cos(mu) + mu * (ls * mu * math.cos(mu) + math.sin(mu))

        def dF(mu):
            c, sn = math.cos(mu), math.sin(mu)
            return (-A * sn + 2.0 * ls * mu * c - ls * mu * mu * sn + sn + mu * c)

        def interval(n):
            return ((n - 0.5) * math.pi, (n + 0.5) * math.pi)

        def scale(mu):
            return max(1.0, abs(A) + mu * (1.0 + ls * mu))

    else:
        if d == 1:
            B = nu * (ls * nu + 1.0 / math.tanh(nu))

            def F(mu):
                return B * math.sin(mu) + mu * (ls * mu * math.sin(mu) - math.cos(mu))

            def dF(mu):
                c, sn = math.cos(mu), math.sin(mu)
                return (B * c + 2.0 * ls * mu * sn + ls * mu * mu * c - c + mu * sn)

            def interval(n):
                return (n * math.pi, (n + 1) * math.pi)

            def scale(mu):
                return max(1.0, abs(B) + mu * (1.0 + ls * mu))

        else:
            def F(mu):
                return math.cos(mu) - ls * mu * math.sin(mu)

            def dF(mu):
                return -math.sin(mu) - ls * (math.sin(mu) + mu * math.cos(mu))

            def interval(n):
                return ((n - 1) * math.pi, n * math.pi)

            def scale(mu):
                return max(1.0, 1.0 + ls * mu)

    return F, dF, interval, scale


def _solve_interval(F, dF, lo: float, hi: float, max_iter: int = 200) -> float:
    flo, fhi = F(lo), F(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0.0:
        raise BracketError(
            f"no sign change in ({lo:.6g}, {hi:.6g}); "
            "slip length or wavevector outside the supported regime")
    a, b = lo, hi
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        fm = F(mid)
        if fm == 0.0 or (b - a) < 1e-13 * max(1.0, mid):
            a = b = mid
            break
        if flo * fm < 0.0:
            b = mid
        else:
            a, flo = mid, fm
    else:
        raise ConvergenceError(f"bisection did not converge in ({lo:.6g}, {hi:.6g})")
    # Newton polish inside the bracket; bisected start is already ~1e-13
    mu = 0.5 * (a + b)
    for _ in range(12):
        f, df = F(mu), dF(mu)
        if df == 0.0:
            break
        step = f / df
        nxt = mu - step
        if not (lo < nxt < hi):
            break
        if nxt == mu:
            break
        mu = nxt
        if abs(step) < 1e-15 * max(1.0, mu):
            break
    return mu


def dispersion_residual(s: int, d: int, mu: float, nu: float, ls: float) -> float:
    """Scaled residual of the family's pole-free dispersion relation."""
    F, _, _, scale = _relation(s, d, nu, ls)
    return abs(F(mu)) / scale(mu)


def dispersion_roots(s: int, d: int, m: float = 0.0, k: float = 0.0,
                     ls: float = 0.0, n_roots: int = 1) -> np.ndarray:
    """First n_roots positive wall-normal wavevectors mu, ascending.

    (s, d) selects the family; for d = 1 the lateral wavevectors (m, k)
    enter only through nu = sqrt(m^2 + k^2), for d = 0 both must be zero.
    Each returned root satisfies its pole-free relation to a scaled
    residual below DISPERSION_TOL; root n lives in the n-th monotone
    branch interval of the relation, so the ordinal is stable.
    """
    if n_roots < 1:
        raise ValueError("n_roots must be >= 1")
    if s not in (0, 1) or d not in (0, 1):
        raise ValueError(f"invalid family (s={s}, d={d})")
    for name, val in (("m", m), ("k", k), ("ls", ls)):
        if not math.isfinite(val) or val < 0:
            raise ValueError(f"{name} must be finite and >= 0, got {val}")
    if d == 0 and (m != 0.0 or k != 0.0):
        raise ValueError("1D families require m = k = 0")
    nu = math.hypot(m, k)
    F, dF, interval, scale = _relation(s, d, nu, ls)
    roots = np.empty(n_roots)
    for n in range(1, n_roots + 1):
        lo, hi = interval(n)
        mu = _solve_interval(F, dF, lo, hi)
        res = abs(F(mu)) / scale(mu)
        if res > DISPERSION_TOL:
            raise ConvergenceError(
                f"root {n} of family (s={s}, d={d}, nu={nu:.6g}, ls={ls:.6g}) "
                f"has residual {res:.3e} > {DISPERSION_TOL}")
        roots[n - 1] = mu
    return roots


# ---------------------------------------------------------------------------
# mode keys and modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModeKey:
    """Identity of one hydrodynamic mode.

    Identity (equality/hash) is carried by the integer fields only; the
    float wavevectors are payload so that keys survive tolerance changes
    in the root solve. i_m, i_k are lattice indices: m = i_m*delta_m.
    """

    s: int
    kappa: int
    d: int
    o_x: int
    o_y: int
    i_m: int
    i_k: int
    mu_index: int
    m: float = field(compare=False, default=0.0)
    k: float = field(compare=False, default=0.0)
    mu: float = field(compare=False, default=0.0)

    def __post_init__(self):
        for name in ("s", "kappa", "d", "o_x", "o_y"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1")
        if self.mu_index < 1:
            raise ValueError("mu_index is 1-based")
        if self.i_m < 0 or self.i_k < 0:
            raise ValueError("lattice indices must be >= 0")
        if self.d == 0:
            if self.i_m or self.i_k or self.m or self.k:
                raise ValueError("1D modes require m = k = 0")
            if self.o_x or self.o_y:
                raise ValueError("1D modes use canonical phases o_x = o_y = 0")
        else:
            if self.i_m == 0 and self.i_k == 0:
                raise ValueError("2D/3D modes require a nonzero lateral wavevector")
            if self.i_k == 0 and (self.o_y != 1 or self.kappa != X_BRANCH):
                raise ValueError("2D x-branch modes require o_y = 1, kappa = 0")
            if self.i_m == 0 and (self.o_x != 0 or self.kappa != Y_BRANCH):
                raise ValueError("2D y-branch modes require o_x = 0, kappa = 1")
            if self.i_m > 0 and self.i_k > 0 and self.kappa != 0:
                raise ValueError("3D modes use canonical kappa = 0")

    @property
    def nu(self) -> float:
        return math.hypot(self.m, self.k)

    @property
    def identity(self) -> tuple:
        return (self.d, self.i_m, self.i_k, self.s, self.kappa,
                self.o_x, self.o_y, self.mu_index)

    @property
    def family(self) -> str:
        dim = "1d" if self.d == 0 else ("2d" if (self.i_m == 0 or self.i_k == 0) else "3d")
        sym = "sym" if self.s == SYMMETRIC else "antisym"
        return f"{dim}-{sym}"


# component ids
UX, UY, UZ = 0, 1, 2
# profile ids
PROF_F, PROF_G, PROF_P = 0, 1, 2


def _shexp(nu, z):
    """sinh(nu*z)*exp(-nu), overflow-free for large nu."""
    z = np.asarray(z, dtype=float)
    return 0.5 * (np.exp(nu * (z - 1.0)) - np.exp(-nu * (z + 1.0)))


def _chexp(nu, z):
    """cosh(nu*z)*exp(-nu)."""
    z = np.asarray(z, dtype=float)
    return 0.5 * (np.exp(nu * (z - 1.0)) + np.exp(-nu * (z + 1.0)))


@dataclass(frozen=True)
class Mode:
    """One normalized hydrodynamic mode over a given cell.

    The wall-normal profiles are
        antisymmetric: f = sin(mu z) - q*sh(nu z),  g = gc*cos(mu z) - q*ch(nu z)
        symmetric:     f = cos(mu z) + q*ch(nu z),  g = gc*sin(mu z) + q*sh(nu z)
    with sh, ch the exp(-nu)-scaled hyperbolics and q, gc the precomputed
    slip-dependent shape coefficients (q = gc = 0 for 1D modes). u_x and
    u_y share f, u_z uses g, and g' = nu*f holds on the dispersion root,
    which is what makes the mode divergence-free.
    """

    key: ModeKey
    reynolds: float
    slip_length: float
    lam: float
    q: float
    gc: float
    norm_constant: float = 1.0

    # -- structure ----------------------------------------------------------

    @property
    def nu(self) -> float:
        return self.key.nu

    def amplitude(self, comp: int) -> float:
        """Signed prefactor of a velocity component (norm included)."""
        key = self.key
        if key.d == 0:
            base = {UX: 1.0 if key.kappa == X_BRANCH else 0.0,
                    UY: 1.0 if key.kappa == Y_BRANCH else 0.0,
                    UZ: 0.0}[comp]
            return self.norm_constant * base
        base = {UX: key.m, UY: key.k, UZ: self.nu}[comp]
        return self.norm_constant * base

    def phase(self, comp: int) -> tuple[float, tuple[int, int], tuple[int, int]]:
        """(sign, x-factor, y-factor) of a component's lateral phase."""
        key = self.key
        if key.d == 0:
            return 1.0, (0, ONE), (0, ONE)
        sc = (SIN, COS)
        if comp == UX:
            return 1.0, (key.i_m, sc[key.o_x]), (key.i_k, sc[key.o_y])
        if comp == UY:
            sx, fx = (-1.0, (key.i_m, COS)) if key.o_x == 0 else (1.0, (key.i_m, SIN))
            sy, fy = (1.0, (key.i_k, COS)) if key.o_y == 0 else (-1.0, (key.i_k, SIN))
            return sx * sy, fx, fy
        # UZ: x like UY, y like UX
        sx, fx = (-1.0, (key.i_m, COS)) if key.o_x == 0 else (1.0, (key.i_m, SIN))
        return sx, fx, (key.i_k, sc[key.o_y])

    def profile_id(self, comp: int) -> int:
        return PROF_G if comp == UZ else PROF_F

    # -- z profiles ----------------------------------------------------------

    def profile(self, prof: int, z, deriv: int = 0) -> np.ndarray:
        """Wall-normal profile (PROF_F, PROF_G or PROF_P) or a derivative."""
        z = np.asarray(z, dtype=float)
        mu, nu = self.key.mu, self.nu
        s = self.key.s
        if prof == PROF_P:
            # pressure profile: antisym -lam*q*sh, sym +lam*q*ch (2D/3D only)
            if self.key.d == 0:
                return np.zeros_like(z)
            hyp = (_shexp, _chexp) if s == ANTISYMMETRIC else (_chexp, _shexp)
            sgn = -1.0 if s == ANTISYMMETRIC else 1.0
            c = sgn * self.lam * self.q * nu ** deriv
            return c * (hyp[deriv % 2])(nu, z)
        if self.key.d == 0:
            if prof == PROF_G:
                return np.zeros_like(z)
            w = mu ** deriv
            if s == ANTISYMMETRIC:
                fn = (np.sin, np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t))
            else:
                fn = (np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t), np.sin)
            return w * fn[deriv % 4](mu * z)
        if s == ANTISYMMETRIC:
            if prof == PROF_F:
                trig = (np.sin, np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t))
                hyp = (_shexp, _chexp)
                return (mu ** deriv * trig[deriv % 4](mu * z)
                        - self.q * nu ** deriv * hyp[deriv % 2](nu, z))
            trig = (np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t), np.sin)
            hyp = (_chexp, _shexp)
            return (self.gc * mu ** deriv * trig[deriv % 4](mu * z)
                    - self.q * nu ** deriv * hyp[deriv % 2](nu, z))
        if prof == PROF_F:
            trig = (np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t), np.sin)
            hyp = (_chexp, _shexp)
            return (mu ** deriv * trig[deriv % 4](mu * z)
                    + self.q * nu ** deriv * hyp[deriv % 2](nu, z))
        trig = (np.sin, np.cos, lambda t: -np.sin(t), lambda t: -np.cos(t))
        hyp = (_shexp, _chexp)
        return (self.gc * mu ** deriv * trig[deriv % 4](mu * z)
                + self.q * nu ** deriv * hyp[deriv % 2](nu, z))

    # -- point evaluation -----------------------------------------------------

    def _check_domain(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(np.abs(z) > 1.0 + 1e-15):
            raise DomainError("mode evaluation requires |z| <= 1")
        return z

    def phase_values(self, comp: int, x, y, dx: int = 0, dy: int = 0):
        """Lateral phase of a component, optionally differentiated."""
        sign, fx, fy = self.phase(comp)
        m = self.key.m if self.key.d else 0.0
        k = self.key.k if self.key.d else 0.0
        vx, vy = np.asarray(x, float), np.asarray(y, float)

        def ev(factor, wav, v, n):
            q, kind = factor
            scale = 1.0
            for _ in range(n):
                if kind == ONE:
                    return 0.0 * v, 0.0
                if kind == SIN:
                    scale, kind = scale * wav, COS
                else:
                    scale, kind = -scale * wav, SIN
            if kind == ONE:
                return np.ones_like(v), scale
            fn = np.sin if kind == SIN else np.cos
            return fn(wav * v), scale

        px, sx = ev(fx, m, vx, dx)
        py, sy = ev(fy, k, vy, dy)
        return sign * sx * sy * px * py

    def evaluate(self, x, y, z) -> np.ndarray:
        """Velocity (3, ...) of the normalized mode at broadcastable points."""
        z = self._check_domain(z)
        comps = []
        for comp in (UX, UY, UZ):
            a = self.amplitude(comp)
            if a == 0.0:
                comps.append(np.zeros(np.broadcast(np.asarray(x, float),
                                                   np.asarray(y, float), z).shape))
                continue
            comps.append(a * self.phase_values(comp, x, y)
                         * self.profile(self.profile_id(comp), z))
        return np.stack(np.broadcast_arrays(*comps))

    def divergence(self, x, y, z) -> np.ndarray:
        """Analytic divergence (machine-small on a converged root)."""
        z = self._check_domain(z)
        out = 0.0
        for comp, (dx, dy, dz) in ((UX, (1, 0, 0)), (UY, (0, 1, 0)), (UZ, (0, 0, 1))):
            a = self.amplitude(comp)
            if a == 0.0:
                continue
            out = out + a * self.phase_values(comp, x, y, dx, dy) \
                * self.profile(self.profile_id(comp), z, deriv=dz)
        return out

    def vector_laplacian(self, x, y, z) -> np.ndarray:
        """(3, ...) values of lap(u); phases are eigenfunctions of the
        lateral Laplacian so each component is (p'' - nu^2 p) * phase."""
        z = self._check_domain(z)
        nu2 = self.nu ** 2
        comps = []
        for comp in (UX, UY, UZ):
            a = self.amplitude(comp)
            if a == 0.0:
                comps.append(np.zeros(np.broadcast(np.asarray(x, float),
                                                   np.asarray(y, float), z).shape))
                continue
            pid = self.profile_id(comp)
            prof = self.profile(pid, z, deriv=2) - nu2 * self.profile(pid, z)
            comps.append(a * self.phase_values(comp, x, y) * prof)
        return np.stack(np.broadcast_arrays(*comps))

    def pressure(self, x, y, z) -> np.ndarray:
        """Mode pressure; the gauge constant of 1D modes is fixed to 0."""
        z = self._check_domain(z)
        if self.key.d == 0:
            return np.zeros(np.broadcast(np.asarray(x, float),
                                         np.asarray(y, float), z).shape)
        # the derived pressure phase coincides with u_z's lateral phase
        return (self.norm_constant * self.phase_values(UZ, x, y)
                * self.profile(PROF_P, z))

    def pressure_gradient(self, x, y, z) -> np.ndarray:
        z = self._check_domain(z)
        if self.key.d == 0:
            shape = np.broadcast(np.asarray(x, float), np.asarray(y, float), z).shape
            return np.zeros((3,) + shape)
        n = self.norm_constant
        gx = n * self.phase_values(UZ, x, y, dx=1) * self.profile(PROF_P, z)
        gy = n * self.phase_values(UZ, x, y, dy=1) * self.profile(PROF_P, z)
        gz = n * self.phase_values(UZ, x, y) * self.profile(PROF_P, z, deriv=1)
        return np.stack(np.broadcast_arrays(gx, gy, gz))

    def curl(self, x, y, z) -> np.ndarray:
        """Analytic vorticity (3, ...) of the normalized mode."""
        z = self._check_domain(z)

        def term(comp, dx, dy, dz):
            a = self.amplitude(comp)
            if a == 0.0:
                return 0.0
            return a * self.phase_values(comp, x, y, dx, dy) \
                * self.profile(self.profile_id(comp), z, deriv=dz)

        wx = term(UZ, 0, 1, 0) - term(UY, 0, 0, 1)
        wy = term(UX, 0, 0, 1) - term(UZ, 1, 0, 0)
        wz = term(UY, 1, 0, 0) - term(UX, 0, 1, 0)
        shape = np.broadcast(np.asarray(x, float), np.asarray(y, float), z).shape
        return np.stack([np.broadcast_to(np.asarray(w, float), shape) for w in (wx, wy, wz)])


def _shape_coefficients(key: ModeKey, ls: float) -> tuple[float, float]:
    """(q, gc) of the mode profiles; raises on degenerate denominators."""
    if key.d == 0:
        return 0.0, 0.0
    mu, nu = key.mu, key.nu
    e2 = math.exp(-2.0 * nu)
    if key.s == ANTISYMMETRIC:
        cmu = math.cos(mu)
        if abs(cmu) < DEGENERATE_TOL:
            raise DegenerateDenominatorError(
                f"cos(mu) = {cmu:.3e} at mu = {mu!r}: antisymmetric profile singular")
        rn = ls * mu * cmu + math.sin(mu)
        den = 0.5 * (ls * nu * (1.0 + e2) + (1.0 - e2))
        q = rn / den
        gc = q * 0.5 * (1.0 + e2) / cmu
    else:
        smu = math.sin(mu)
        if abs(smu) < DEGENERATE_TOL:
            raise DegenerateDenominatorError(
                f"sin(mu) = {smu:.3e} at mu = {mu!r}: symmetric profile singular")
        rn = ls * mu * smu - math.cos(mu)
        den = 0.5 * (ls * nu * (1.0 - e2) + (1.0 + e2))
        q = rn / den
        gc = -q * 0.5 * (1.0 - e2) / smu
    return q, gc


def mode_norm_sq(mode: Mode, cell: Cell, tol: float = 1e-12) -> float:
    """<u, u> over the cell for the mode with norm_constant as stored."""
    tol = max(tol, 1e-14)
    total_prev = None
    n = _quad.gauss_level(2.0 * max(mode.key.mu, mode.nu))
    while True:
        z, w = _quad.gauss_rule(n)
        total = 0.0
        for comp in (UX, UY, UZ):
            a = mode.amplitude(comp)
            if a == 0.0:
                continue
            sign, fx, fy = mode.phase(comp)
            ix = _quad.phase_integral([fx, fx], cell.half_length)
            iy = _quad.phase_integral([fy, fy], cell.half_width)
            if ix == 0.0 or iy == 0.0:
                continue
            prof = mode.profile(mode.profile_id(comp), z)
            total += (a * sign) ** 2 * ix * iy * float(np.dot(w, prof * prof))
        if total_prev is not None and abs(total - total_prev) <= tol * max(1.0, abs(total)):
            return total
        total_prev = total
        n *= 2
        if n > 2 ** 13:
            raise ConvergenceError("mode normalization quadrature did not converge")


def build_mode(key: ModeKey, cfg: FlowConfig, cell: Cell) -> Mode:
    """Construct a normalized Mode; key.mu must be a verified dispersion root."""
    ls = cfg.slip_length
    res = dispersion_residual(key.s, key.d, key.mu, key.nu, ls)
    if res > DISPERSION_TOL:
        raise DispersionError(
            f"mu = {key.mu!r} is not a dispersion root of family (s={key.s}, d={key.d}, "
            f"nu={key.nu:.6g}): scaled residual {res:.3e}")
    lam = (key.mu ** 2 + key.nu ** 2) / cfg.reynolds
    q, gc = _shape_coefficients(key, ls)
    mode = Mode(key=key, reynolds=cfg.reynolds, slip_length=ls,
                lam=lam, q=q, gc=gc, norm_constant=1.0)
    nsq = mode_norm_sq(mode, cell)
    if not nsq > 0:
        raise RuntimeError(f"mode {key} has nonpositive norm {nsq}")
    return replace(mode, norm_constant=1.0 / math.sqrt(nsq))


def mode_eval(mode: Mode, x, y, z) -> np.ndarray:
    """Velocity 3-vector of the mode at (x, y, z)."""
    return mode.evaluate(x, y, z)


def mode_pressure_eval(mode: Mode, x, y, z) -> np.ndarray:
    """Pressure of the mode at (x, y, z); identically 0 for 1D modes."""
    return mode.pressure(x, y, z)


def mode_flow_rate(mode: Mode, cell: Cell) -> float:
    """Streamwise flow rate per unit lateral area, (1/4LW) * integral(u_x)."""
    a = mode.amplitude(UX)
    if a == 0.0:
        return 0.0
    sign, fx, fy = mode.phase(UX)
    ix = _quad.phase_integral([fx], cell.half_length)
    iy = _quad.phase_integral([fy], cell.half_width)
    if ix == 0.0 or iy == 0.0:
        return 0.0
    n = _quad.gauss_level(mode.key.mu)
    z, w = _quad.gauss_rule(n)
    zint = float(np.dot(w, mode.profile(PROF_F, z)))
    return a * sign * ix * iy * zint / cell.area


# ---------------------------------------------------------------------------
# basis selection and assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BasisSelection:
    """Which modes to build: a lattice of (i_m, i_k) indices plus per-family
    root counts. 1D modes can be restricted to one lateral branch."""

    lattice: tuple[tuple[int, int], ...]
    roots_1d: int = 0
    roots_2d: int = 0
    roots_3d: int = 0
    onedim_branches: tuple[str, ...] = ("x", "y")
    symmetries: tuple[int, ...] = (ANTISYMMETRIC, SYMMETRIC)

    def __post_init__(self):
        for br in self.onedim_branches:
            if br not in ("x", "y"):
                raise ValueError(f"unknown 1D branch {br!r}")
        for pt in self.lattice:
            if len(pt) != 2 or pt[0] < 0 or pt[1] < 0:
                raise ValueError(f"bad lattice point {pt!r}")

    @classmethod
    def octaves(cls, n_octaves: int, roots_1d: int, roots_2d: int,
                roots_3d: int = 0, include_3d: bool = False,
                onedim_branches: tuple[str, ...] = ("x", "y")) -> "BasisSelection":
        """Doubling lattice {2^i : i < n_octaves} on both axes, origin included.

        include_3d adds all (2^i, 2^j) pairs; otherwise the lattice holds
        only axis points (2D modes) plus the origin (1D modes).
        """
        octs = [2 ** i for i in range(n_octaves)]
        pts = [(0, 0)] + [(o, 0) for o in octs] + [(0, o) for o in octs]
        if include_3d:
            pts += [(a, b) for a in octs for b in octs]
        return cls(lattice=tuple(pts), roots_1d=roots_1d, roots_2d=roots_2d,
                   roots_3d=roots_3d, onedim_branches=onedim_branches)

    def count(self) -> int:
        """Closed-form mode count of this selection."""
        total = 0
        for im, ik in sorted(set(self.lattice)):
            if im == 0 and ik == 0:
                total += len(self.symmetries) * len(self.onedim_branches) * self.roots_1d
            elif im == 0 or ik == 0:
                total += len(self.symmetries) * 2 * self.roots_2d
            else:
                total += len(self.symmetries) * 4 * self.roots_3d
        return total


class BasisSet:
    """Ordered, deduplicated, normalized mode collection over one cell."""

    def __init__(self, cfg: FlowConfig, cell: Cell, modes: list[Mode]):
        self.cfg = cfg
        self.cell = cell
        order = sorted(range(len(modes)), key=lambda i: modes[i].key.identity)
        self.modes: tuple[Mode, ...] = tuple(modes[i] for i in order)
        self.index: dict[tuple, int] = {}
        for i, mode in enumerate(self.modes):
            ident = mode.key.identity
            if ident in self.index:
                raise ValueError(f"duplicate mode {ident}")
            self.index[ident] = i
        self.gram_report = None

    def __len__(self) -> int:
        return len(self.modes)

    def __iter__(self):
        return iter(self.modes)

    def __getitem__(self, i: int) -> Mode:
        return self.modes[i]

    def position(self, key: ModeKey) -> int:
        return self.index[key.identity]

    def blocks(self) -> dict[tuple[int, int], np.ndarray]:
        """Global indices grouped by lateral wavevector pair (i_m, i_k)."""
        groups: dict[tuple[int, int], list[int]] = {}
        for i, mode in enumerate(self.modes):
            groups.setdefault((mode.key.i_m, mode.key.i_k), []).append(i)
        return {lat: np.asarray(ix, dtype=np.intp) for lat, ix in groups.items()}

    def family_indices(self, family: str) -> np.ndarray:
        return np.asarray([i for i, m in enumerate(self.modes)
                           if m.key.family == family], dtype=np.intp)

    def lambdas(self) -> np.ndarray:
        return np.asarray([m.lam for m in self.modes])

    # -- serialization -------------------------------------------------------

    def mode_records(self) -> list[dict]:
        recs = []
        for mode in self.modes:
            key = mode.key
            recs.append({
                "s": key.s, "kappa": key.kappa, "d": key.d,
                "o_x": key.o_x, "o_y": key.o_y,
                "i_m": key.i_m, "i_k": key.i_k, "mu_index": key.mu_index,
                "m": f17(key.m), "k": f17(key.k), "mu": f17(key.mu),
                "lambda": f17(mode.lam), "norm_constant": f17(mode.norm_constant),
            })
        return recs

    @property
    def checksum(self) -> str:
        payload = json.dumps(self.mode_records(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    def to_json_dict(self) -> dict:
        from . import __version__
        header = {
            "format": "channelmodes.basis/1",
            "version": __version__,
            "config": {"reynolds": self.cfg.reynolds,
                       "slip_length": self.cfg.slip_length},
            "cell": {"delta_m": self.cell.delta_m, "delta_k": self.cell.delta_k},
            "tolerances": {"dispersion_residual": DISPERSION_TOL,
                           "quadrature": 1e-12},
            "n_modes": len(self.modes),
            "checksum": self.checksum,
        }
        if self.gram_report is not None:
            header["gram"] = self.gram_report.to_dict()
        return {**header, "modes": self.mode_records()}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "BasisSet":
        cfg = FlowConfig(**doc["config"])
        cell = Cell(**doc["cell"])
        modes = []
        for rec in doc["modes"]:
            key = ModeKey(s=rec["s"], kappa=rec["kappa"], d=rec["d"],
                          o_x=rec["o_x"], o_y=rec["o_y"],
                          i_m=rec["i_m"], i_k=rec["i_k"], mu_index=rec["mu_index"],
                          m=float(rec["m"]), k=float(rec["k"]), mu=float(rec["mu"]))
            q, gc = _shape_coefficients(key, cfg.slip_length)
            modes.append(Mode(key=key, reynolds=cfg.reynolds,
                              slip_length=cfg.slip_length,
                              lam=float(rec["lambda"]), q=q, gc=gc,
                              norm_constant=float(rec["norm_constant"])))
        return cls(cfg, cell, modes)

    @classmethod
    def load(cls, path) -> "BasisSet":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def build_basis(cfg: FlowConfig, cell: Cell, selection: BasisSelection) -> BasisSet:
    """Build the deduplicated, ordered, normalized basis for a selection."""
    ls = cfg.slip_length
    modes: list[Mode] = []
    root_cache: dict[tuple, np.ndarray] = {}

    def roots_for(s: int, d: int, m: float, k: float, n: int) -> np.ndarray:
        key = (s, d, round(m, 15), round(k, 15))
        if key not in root_cache or len(root_cache[key]) < n:
            root_cache[key] = dispersion_roots(s, d, m, k, ls, n)
        return root_cache[key][:n]

    for im, ik in sorted(set(selection.lattice)):
        m, k = im * cell.delta_m, ik * cell.delta_k
        if im == 0 and ik == 0:
            if selection.roots_1d == 0:
                continue
            for s in selection.symmetries:
                mus = roots_for(s, 0, 0.0, 0.0, selection.roots_1d)
                for branch in selection.onedim_branches:
                    kappa = X_BRANCH if branch == "x" else Y_BRANCH
                    for n, mu in enumerate(mus, start=1):
                        key = ModeKey(s=s, kappa=kappa, d=0, o_x=0, o_y=0,
                                      i_m=0, i_k=0, mu_index=n, mu=float(mu))
                        modes.append(build_mode(key, cfg, cell))
        elif ik == 0:
            for s in selection.symmetries:
                mus = roots_for(s, 1, m, 0.0, selection.roots_2d)
                for o_x in (0, 1):
                    for n, mu in enumerate(mus, start=1):
                        key = ModeKey(s=s, kappa=X_BRANCH, d=1, o_x=o_x, o_y=1,
                                      i_m=im, i_k=0, mu_index=n,
                                      m=m, k=0.0, mu=float(mu))
                        modes.append(build_mode(key, cfg, cell))
        elif im == 0:
            for s in selection.symmetries:
                mus = roots_for(s, 1, 0.0, k, selection.roots_2d)
                for o_y in (0, 1):
                    for n, mu in enumerate(mus, start=1):
                        key = ModeKey(s=s, kappa=Y_BRANCH, d=1, o_x=0, o_y=o_y,
                                      i_m=0, i_k=ik, mu_index=n,
                                      m=0.0, k=k, mu=float(mu))
                        modes.append(build_mode(key, cfg, cell))
        else:
            for s in selection.symmetries:
                mus = roots_for(s, 1, m, k, selection.roots_3d)
                for o_x in (0, 1):
                    for o_y in (0, 1):
                        for n, mu in enumerate(mus, start=1):
                            key = ModeKey(s=s, kappa=0, d=1, o_x=o_x, o_y=o_y,
                                          i_m=im, i_k=ik, mu_index=n,
                                          m=m, k=k, mu=float(mu))
                            modes.append(build_mode(key, cfg, cell))
    return BasisSet(cfg, cell, modes)


def expand_poiseuille(pois: PoiseuilleField, basis: BasisSet,
                      tol: float = 1e-4) -> tuple[np.ndarray, float]:
    """Projection coefficients of the base flow onto the basis.

    Only 1D symmetric x-branch modes receive nonzero coefficients. Returns
    (coefficients over the full basis, relative L2 residual); warns when
    the residual exceeds tol, which signals too few 1D symmetric roots.
    """
    coeffs = np.zeros(len(basis))
    cell = basis.cell
    norm_sq = 0.0
    n = 256
    z, w = _quad.gauss_rule(n)
    up = pois.profile(z)
    norm_sq = cell.area * float(np.dot(w, up * up))
    for i, mode in enumerate(basis):
        key = mode.key
        if key.d != 0 or key.s != SYMMETRIC or key.kappa != X_BRANCH:
            continue
        nq = _quad.gauss_level(key.mu, base=n)
        zq, wq = _quad.gauss_rule(nq)
        prof = mode.profile(PROF_F, zq)
        upq = pois.profile(zq)
        coeffs[i] = mode.amplitude(UX) * cell.area * float(np.dot(wq, prof * upq))
    resid_sq = max(norm_sq - float(np.dot(coeffs, coeffs)), 0.0)
    residual = math.sqrt(resid_sq / norm_sq) if norm_sq > 0 else 0.0
    if residual > tol and pois.amplitude != 0.0:
        warnings.warn(
            f"Poiseuille expansion residual {residual:.2e} exceeds {tol:.1e}; "
            "increase the 1D symmetric root count", stacklevel=2)
    return coeffs, residual
