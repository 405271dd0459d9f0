"""Shared quadrature and exact lateral-phase integral helpers.

The wall-normal (z) direction uses cached Gauss-Legendre rules on [-1, 1].
The lateral (x, y) directions never use numerical quadrature: every mode
phase is sin/cos at an integer multiple of the cell's fundamental
wavenumber, so products integrate in closed form over full periods. The
closed form is evaluated through a complex-exponential convolution whose
coefficients are dyadic rationals, which makes selection-rule zeroes exact
in floating point.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

# Phase-factor kinds: a factor is (index, kind) with wavenumber index*step.
ONE = 0
SIN = 1
COS = 2


@lru_cache(maxsize=None)
def gauss_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def gauss_level(max_freq: float, base: int = 64) -> int:
    """Smallest power-of-two-ish node count resolving oscillation max_freq.

    max_freq is the largest |d/dz phase| of any integrand factor product;
    Gauss-Legendre enters its spectral regime near max_freq/2 points per
    half-wave, so we pad generously and round up to the cached ladder.
    """
    need = int(0.75 * max_freq) + 48
    n = base
    while n < need:
        n *= 2
    return n


@lru_cache(maxsize=None)
def _zero_mode_coeff(factors: tuple[tuple[int, int], ...]) -> float:
    """Mean value (frequency-zero coefficient) of a product of phase factors.

    Each factor (q, kind) stands for sin(q*s*t) / cos(q*s*t) / 1 on a full
    period; the product's zero-frequency coefficient is built by convolving
    the exponential representations. All coefficients are dyadic, so the
    result is exact, including exact 0.0 for selection-rule violations.
    """
    acc: dict[int, complex] = {0: 1.0 + 0.0j}
    for q, kind in factors:
        if kind == ONE:
            continue
        if kind == SIN:
            parts = ((q, -0.5j), (-q, 0.5j))
        elif kind == COS:
            parts = ((q, 0.5 + 0.0j), (-q, 0.5 + 0.0j))
        else:
            raise ValueError(f"unknown phase kind {kind}")
        new: dict[int, complex] = {}
        for freq, coeff in acc.items():
            for dq, pc in parts:
                nf = freq + dq
                new[nf] = new.get(nf, 0.0 + 0.0j) + coeff * pc
        acc = new
    c0 = acc.get(0, 0.0 + 0.0j)
    return c0.real


def phase_integral(factors, half_length: float) -> float:
    """Exact integral of a product of phase factors over [-L, L].

    factors: iterable of (index, kind); the wavenumber of a factor is
    index*pi/half_length, so every factor completes full periods.
    """
    return 2.0 * half_length * _zero_mode_coeff(tuple(factors))


def phase_derivative(factor: tuple[int, int], step: float) -> tuple[float, tuple[int, int]]:
    """d/dx of a phase factor; returns (scale, new_factor).

    step is the fundamental wavenumber, so the factor's wavenumber is
    index*step. Differentiating ONE gives scale 0.
    """
    q, kind = factor
    if kind == ONE:
        return 0.0, factor
    w = q * step
    if kind == SIN:
        return w, (q, COS)
    return -w, (q, SIN)
