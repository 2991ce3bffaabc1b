"""Double Fourier series on nested toroidal surfaces.

Fields on a flux surface are expanded in the combined angle
``m*theta - n*n_fp*zeta`` with poloidal modes ``m = 0..M-1`` and toroidal
modes ``n = -N..N``.  Under stellarator symmetry R keeps only cosine terms
while lambda and Z keep only sine terms, and at ``m = 0`` the negative-n
entries are linearly dependent on the positive-n ones and are dropped,
leaving ``M*(2N+1) - N`` coefficients per field.

Synthesis and all angular derivatives are evaluated by direct summation
against precomputed trigonometric tables; the mode counts of interest are
far too small for FFTs to pay off.  Coefficient arrays may be numpy arrays
or autodiff variables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad

__all__ = [
    "ModeSet",
    "SurfaceCoefficients",
    "SynthesizedField",
    "TrigTables",
    "build_mode_set",
    "mode_set_pair",
    "fourier_angle",
    "trig_tables",
    "synthesize",
    "project",
    "spectral_width",
    "default_angles",
]

COSINE = "cos"
SINE = "sin"


@dataclass(frozen=True)
class ModeSet:
    """Ordered index set of stellarator-symmetric Fourier modes."""

    M: int
    N: int
    n_fp: int
    parity: str
    m: np.ndarray
    n: np.ndarray

    @property
    def size(self) -> int:
        return int(self.m.size)

    @property
    def fixed_mask(self) -> np.ndarray:
        """True where the coefficient is pinned to zero (sine (0,0))."""
        if self.parity == SINE:
            return (self.m == 0) & (self.n == 0)
        return np.zeros(self.size, dtype=bool)

    def index_of(self, m: int, n: int) -> int:
        hits = np.nonzero((self.m == m) & (self.n == n))[0]
        if hits.size == 0:
            raise KeyError(f"mode (m={m}, n={n}) not in set")
        return int(hits[0])


def build_mode_set(M: int, N: int, n_fp: int, parity: str) -> ModeSet:
    """All (m, n) with m ascending then n ascending; m=0 keeps only n >= 0."""
    if M < 1:
        raise ValueError("M must be at least 1")
    if N < 0:
        raise ValueError("N must be non-negative")
    if n_fp < 1:
        raise ValueError("n_fp must be a positive integer")
    if parity not in (COSINE, SINE):
        raise ValueError(f"parity must be '{COSINE}' or '{SINE}'")
    ms, ns = [], []
    for m in range(M):
        lo = 0 if m == 0 else -N
        for n in range(lo, N + 1):
            ms.append(m)
            ns.append(n)
    mode_set = ModeSet(M, N, n_fp, parity, np.asarray(ms), np.asarray(ns))
    assert mode_set.size == M * (2 * N + 1) - N
    return mode_set


def mode_set_pair(M: int, N: int, n_fp: int) -> tuple[ModeSet, ModeSet]:
    """(cosine, sine) mode sets sharing one resolution, for (R) and (lambda, Z)."""
    return build_mode_set(M, N, n_fp, COSINE), build_mode_set(M, N, n_fp, SINE)


def fourier_angle(m: int, n: int, n_fp: int, theta, zeta):
    """Combined angle m*theta - n*n_fp*zeta."""
    return m * theta - n * n_fp * zeta


@dataclass
class SurfaceCoefficients:
    """Coefficients of one field on one surface, optionally with radial slopes."""

    mode_set: ModeSet
    values: np.ndarray
    d_rho: Optional[np.ndarray] = None
    d_rho2: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mode_set.size,):
            raise ValueError(
                f"expected {self.mode_set.size} coefficients, got {self.values.shape}"
            )
        for name in ("d_rho", "d_rho2"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=float)
                if arr.shape != self.values.shape:
                    raise ValueError(f"{name} shape {arr.shape} does not match values")
                setattr(self, name, arr)
        fixed = self.mode_set.fixed_mask
        if fixed.any() and not np.all(self.values[fixed] == 0.0):
            raise ValueError("sine-parity (0,0) coefficient must be exactly 0")


@dataclass(frozen=True)
class TrigTables:
    """Basis functions and their angular derivatives on a flattened grid.

    Each table has shape (n_modes, n_theta * n_zeta); synthesis of any field
    or derivative is one matrix product against these constants.
    """

    value: np.ndarray
    dt: np.ndarray
    dz: np.ndarray
    dtt: np.ndarray
    dtz: np.ndarray
    dzz: np.ndarray
    n_theta: int
    n_zeta: int


def trig_tables(mode_set: ModeSet, theta: np.ndarray, zeta: np.ndarray) -> TrigTables:
    theta = np.asarray(theta, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if theta.size == 0 or zeta.size == 0:
        raise ValueError("angular grid must have at least one node")
    angle = (
        mode_set.m[:, None, None] * theta[None, :, None]
        - (mode_set.n * mode_set.n_fp)[:, None, None] * zeta[None, None, :]
    )
    angle = angle.reshape(mode_set.size, theta.size * zeta.size)
    m = mode_set.m.astype(float)[:, None]
    nf = (mode_set.n * mode_set.n_fp).astype(float)[:, None]
    c, s = np.cos(angle), np.sin(angle)
    if mode_set.parity == COSINE:
        val, dt, dz = c, -m * s, nf * s
        dtt, dtz, dzz = -m * m * c, m * nf * c, -nf * nf * c
    else:
        val, dt, dz = s, m * c, -nf * c
        dtt, dtz, dzz = -m * m * s, m * nf * s, -nf * nf * s
    return TrigTables(val, dt, dz, dtt, dtz, dzz, theta.size, zeta.size)


@dataclass
class SynthesizedField:
    """Real-space field with partial derivatives on a (theta, zeta) grid."""

    value: np.ndarray
    d_theta: np.ndarray
    d_zeta: np.ndarray
    d_theta_theta: np.ndarray
    d_theta_zeta: np.ndarray
    d_zeta_zeta: np.ndarray
    d_rho: Optional[np.ndarray] = None
    d_rho_theta: Optional[np.ndarray] = None
    d_rho_zeta: Optional[np.ndarray] = None
    d_rho_rho: Optional[np.ndarray] = None


def synthesize(coeffs: SurfaceCoefficients, theta, zeta) -> SynthesizedField:
    """Direct evaluation of the series and its exact angular derivatives.

    Radial derivative fields appear when `coeffs` carries d_rho / d_rho2;
    both come from differentiating the trigonometric basis analytically,
    never from finite differences.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    tables = trig_tables(coeffs.mode_set, theta, zeta)
    shape = (theta.size, zeta.size)

    def mix(row: np.ndarray, table: np.ndarray) -> np.ndarray:
        return ad.matmul(row[None, :], table).reshape(shape)

    c = coeffs.values
    out = SynthesizedField(
        value=mix(c, tables.value),
        d_theta=mix(c, tables.dt),
        d_zeta=mix(c, tables.dz),
        d_theta_theta=mix(c, tables.dtt),
        d_theta_zeta=mix(c, tables.dtz),
        d_zeta_zeta=mix(c, tables.dzz),
    )
    if coeffs.d_rho is not None:
        out.d_rho = mix(coeffs.d_rho, tables.value)
        out.d_rho_theta = mix(coeffs.d_rho, tables.dt)
        out.d_rho_zeta = mix(coeffs.d_rho, tables.dz)
    if coeffs.d_rho2 is not None:
        out.d_rho_rho = mix(coeffs.d_rho2, tables.value)
    return out


def project(values: np.ndarray, mode_set: ModeSet, theta, zeta) -> np.ndarray:
    """Recover coefficients from grid values by trapezoid quadrature.

    On uniform endpoint-exclusive angular grids the trapezoid rule reduces to
    the plain mean; resolving modes up to (M-1, N) without aliasing of the
    quadratic products needs at least 2(2M+1) poloidal and 2(2N+1) toroidal
    nodes.
    """
    theta = np.asarray(theta, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    tables = trig_tables(mode_set, theta, zeta)
    flat = np.asarray(values, dtype=float).reshape(-1)
    means = tables.value @ flat / flat.size
    weight = np.where((mode_set.m == 0) & (mode_set.n == 0), 1.0, 2.0)
    if mode_set.parity == SINE:
        weight = np.where(mode_set.fixed_mask, 0.0, weight)
    return weight * means


def spectral_width(r_coeffs: SurfaceCoefficients, z_coeffs: SurfaceCoefficients) -> float:
    """Poloidal power spectrum sum m^2 (R_mn^2 + Z_mn^2); diagnostic only."""
    if r_coeffs.mode_set.size != z_coeffs.mode_set.size or not np.array_equal(
        r_coeffs.mode_set.m, z_coeffs.mode_set.m
    ):
        raise ValueError("R and Z coefficient sets must share (m, n) layout")
    m2 = r_coeffs.mode_set.m.astype(float) ** 2
    return float(np.sum(m2 * (r_coeffs.values**2 + z_coeffs.values**2)))


def default_angles(M: int, N: int, n_fp: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform endpoint-exclusive grids, 4x oversampled against the mode count.

    theta spans the full poloidal circle; zeta spans one field period.
    """
    n_theta = 4 * M
    n_zeta = max(1, 4 * N)
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    zeta = 2.0 * np.pi * np.arange(n_zeta) / (n_fp * n_zeta)
    return theta, zeta
