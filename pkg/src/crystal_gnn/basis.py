"""Radial Bessel and Fourier expansions of bond lengths and angles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import AtomGraph, BondGraph, GraphBatch, serial_geometry
from .tensor import DimensionError, Value, affine, columns, make_op


class DomainError(ValueError):
    """An argument lies outside the function's domain."""


@dataclass(frozen=True)
class BasisConfig:
    n_radial: int = 31
    n_angular: int = 31
    p: int = 8
    r_cut_atom: float = 6.0
    r_cut_bond: float = 3.0

    def __post_init__(self):
        if self.n_radial < 1 or self.n_angular < 1:
            raise ValueError("basis sizes must be positive")
        if self.p < 2:
            raise ValueError("envelope exponent must be at least 2")
        if self.r_cut_atom <= 0 or self.r_cut_bond <= 0:
            raise ValueError("cutoffs must be positive")


def _check_unit_interval(xi: np.ndarray) -> np.ndarray:
    if np.any(xi < 0.0) or np.any(xi > 1.0 + 1e-9):
        raise DomainError("envelope argument must lie in [0, 1]")
    return np.minimum(xi, 1.0)


def envelope(xi, p: int = 8):
    """Smooth cutoff polynomial with u(0)=1, u(1)=0, u'(1)=0.

    Factored so the power ``xi**p`` is evaluated once::

        u = 1 - xi^p * [(p+1)(p+2)/2 - p(p+2) xi + p(p+1)/2 xi^2]
    """
    xi = _check_unit_interval(np.asarray(xi, dtype=np.float64))
    c0 = (p + 1) * (p + 2) / 2.0
    c1 = p * (p + 2.0)
    c2 = p * (p + 1) / 2.0
    return 1.0 - xi**p * (c0 - xi * (c1 - c2 * xi))


def envelope_expanded(xi, p: int = 8):
    xi = _check_unit_interval(np.asarray(xi, dtype=np.float64))
    return (
        1.0
        - (p + 1) * (p + 2) / 2.0 * xi**p
        + p * (p + 2.0) * xi ** (p + 1)
        - p * (p + 1) / 2.0 * xi ** (p + 2)
    )


def envelope_derivative(xi, p: int = 8):
    xi = _check_unit_interval(np.asarray(xi, dtype=np.float64))
    a = p * (p + 1.0) * (p + 2.0) / 2.0
    return -a * xi ** (p - 1) * (1.0 - xi) ** 2


def initial_frequencies(n_radial: int) -> np.ndarray:
    return np.pi * np.arange(1, n_radial + 1, dtype=np.float64)


def srbf(bond_len, frequencies: Value, r_cut: float = 6.0, p: int = 8) -> Value:
    """``u(r/r_cut) * sqrt(2/r_cut) * sin(f_n r / r_cut) / r`` per edge and frequency.

    Gradients flow to the trainable ``frequencies``; bond lengths are data.
    """
    r = np.asarray(bond_len, dtype=np.float64).reshape(-1)
    if np.any(r <= 0.0):
        raise DomainError("bond lengths must be positive")
    xi = r / r_cut
    prefactor = (envelope(xi, p) * math.sqrt(2.0 / r_cut))[:, None]
    phase = np.outer(xi, frequencies.data)
    out = prefactor * np.sin(phase) / r[:, None]

    def backward(g):
        # d/df_n sin(f_n r/rc)/r = cos(f_n r/rc)/rc
        return ((g * prefactor * np.cos(phase)).sum(axis=0) / r_cut,)

    return make_op(out, (frequencies,), backward)


def fourier(theta, n_angular: int = 31) -> np.ndarray:
    """``[1/sqrt(2pi), cos(t)/sqrt(pi), sin(t)/sqrt(pi), cos(2t)/sqrt(pi), ...]`` truncated."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    out = np.empty((theta.shape[0], n_angular))
    out[:, 0] = 1.0 / math.sqrt(2.0 * math.pi)
    inv = 1.0 / math.sqrt(math.pi)
    for m in range(1, n_angular):
        k = (m + 1) // 2
        out[:, m] = (np.cos if m % 2 else np.sin)(k * theta) * inv
    return out


def fused_bond_projection(features: Value, weights: Value) -> tuple[Value, Value, Value]:
    """One product against ``[W_e0 | W_ea | W_eb]`` (bias row last), split into thirds."""
    width = weights.shape[1]
    if width % 3:
        raise DimensionError(f"fused projection width {width} is not divisible by 3")
    d = width // 3
    out = affine(features, weights)
    return columns(out, 0, d), columns(out, d, 2 * d), columns(out, 2 * d, 3 * d)


def batched_basis(batch: GraphBatch, frequencies: Value, cfg: BasisConfig):
    """Radial features for every edge and angular features for every angle of a batch."""
    radial = srbf(batch.bond_len, frequencies, cfg.r_cut_atom, cfg.p)
    angular = fourier(batch.theta, cfg.n_angular)
    return radial, angular


def serial_basis(
    samples: Sequence[tuple[AtomGraph, BondGraph]], frequencies: Value, cfg: BasisConfig
):
    """Sample-by-sample basis computation concatenated at the end."""
    radial, angular = [], []
    for sample in samples:
        _, bond_len, theta = serial_geometry([sample])
        radial.append(srbf(bond_len, frequencies, cfg.r_cut_atom, cfg.p).data)
        if theta.size:
            angular.append(fourier(theta, cfg.n_angular))
    radial = np.concatenate(radial) if radial else np.zeros((0, cfg.n_radial))
    angular = np.concatenate(angular) if angular else np.zeros((0, cfg.n_angular))
    return radial, angular
