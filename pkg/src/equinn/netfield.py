"""Radial mode profiles from small multilayer perceptrons.

Each cylindrical coordinate (R, lambda, Z) gets one two-layer tanh MLP that
maps the radial coordinate rho in (0, 1), through the rescaled input
``f(rho) = 2 rho^2 - 1``, to the full vector of Fourier coefficients.  The
raw network output is composed with

* the prescribed boundary coefficients, imposed exactly through the
  distance factor ``(1 - rho^2)`` which vanishes at the boundary, and
* the factor ``rho^m`` which keeps ``X_mn / rho^m`` bounded at the axis,
  as required of poloidal harmonics of smooth fields on the unit disc.

R and Z carry the boundary term; the poloidal renormalization stream
function lambda is unconstrained apart from its pinned (0,0) sine mode.
First and second radial derivatives of every profile are propagated
exactly with second-order jets, never by finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import autodiff as ad
from . import spectral
from ._geom import polygon_self_intersects
from .autodiff import Jet2
from .spectral import ModeSet, SurfaceCoefficients

__all__ = [
    "MU0",
    "MLPCoefficients",
    "NetParams",
    "EquilibriumInput",
    "ModeProfiles",
    "ProfileStack",
    "ProfileConstants",
    "input_map",
    "mlp_forward",
    "init_params",
    "mode_profiles",
    "profile_stack",
    "stack_profiles",
    "padded_boundary",
    "params_to_vector",
    "vector_to_params",
]

MU0 = 4.0e-7 * math.pi


@dataclass
class MLPCoefficients:
    """Weights and biases of one two-layer tanh network."""

    w0: np.ndarray  # (n, 1)
    b0: np.ndarray  # (n,)
    w1: np.ndarray  # (n, n)
    b1: np.ndarray  # (n,)
    w2: np.ndarray  # (K, n)
    b2: np.ndarray  # (K,)

    def arrays(self) -> tuple:
        return (self.w0, self.b0, self.w1, self.b1, self.w2, self.b2)

    @property
    def width(self) -> int:
        return int(ad.value_of(self.b0).shape[0])

    @property
    def n_out(self) -> int:
        return int(ad.value_of(self.b2).shape[0])


@dataclass
class NetParams:
    """The three coordinate networks plus their shared mode layout."""

    r: MLPCoefficients
    lam: MLPCoefficients
    z: MLPCoefficients
    modes_cos: ModeSet
    modes_sin: ModeSet

    def __post_init__(self):
        widths = {self.r.width, self.lam.width, self.z.width}
        outs = {self.r.n_out, self.lam.n_out, self.z.n_out}
        if len(widths) != 1 or len(outs) != 1:
            raise ValueError("all three networks must share width and mode count")
        if self.r.n_out != self.modes_cos.size:
            raise ValueError("network output size does not match the mode set")

    @property
    def width(self) -> int:
        return self.r.width

    @property
    def n_modes(self) -> int:
        return self.r.n_out

    @property
    def n_parameters(self) -> int:
        return sum(ad.value_of(a).size for net in (self.r, self.lam, self.z) for a in net.arrays())


def params_to_vector(params: NetParams) -> np.ndarray:
    """Flatten into the canonical layout: per net (R, lambda, Z), arrays
    W0, b0, W1, b1, W2, b2 in row-major order."""
    chunks = []
    for net in (params.r, params.lam, params.z):
        for arr in net.arrays():
            chunks.append(np.asarray(arr, dtype=float).ravel())
    return np.concatenate(chunks)


def vector_to_params(vec, template: NetParams) -> NetParams:
    """Rebuild NetParams from a flat vector (or Var) in the canonical layout."""
    n = template.width
    k = template.n_modes
    shapes = [(n, 1), (n,), (n, n), (n,), (k, n), (k,)]
    nets = []
    offset = 0
    for _ in range(3):
        arrays = []
        for shape in shapes:
            size = int(np.prod(shape))
            arrays.append(ad.reshape(vec[offset : offset + size], shape))
            offset += size
        nets.append(MLPCoefficients(*arrays))
    return NetParams(nets[0], nets[1], nets[2], template.modes_cos, template.modes_sin)


def input_map(rho):
    """Network input f(rho) = 2 rho^2 - 1, mapping (0,1) into (-1,1)."""
    return 2.0 * rho * rho - 1.0


def _affine(x: Jet2, w_t, b) -> Jet2:
    return Jet2(
        ad.matmul(x.value, w_t) + b,
        ad.matmul(x.d1, w_t),
        ad.matmul(x.d2, w_t),
    )


def _mlp_jet(net: MLPCoefficients, f: Jet2) -> Jet2:
    """Network output as a jet in the same seed variable as ``f``."""
    h = _affine(f, ad.transpose(net.w0), net.b0).tanh()
    h = _affine(h, ad.transpose(net.w1), net.b1).tanh()
    return _affine(h, ad.transpose(net.w2), net.b2)


def mlp_forward(net: MLPCoefficients, f: float):
    """Output vector and its first/second derivatives with respect to f."""
    seed = Jet2(np.array([[float(f)]]), np.array([[1.0]]), np.array([[0.0]]))
    out = _mlp_jet(net, seed)
    return out.value[0].copy(), out.d1[0].copy(), out.d2[0].copy()


# -- equilibrium problem definition ------------------------------------------


@dataclass
class EquilibriumInput:
    """Fixed-boundary equilibrium problem: boundary harmonics, profiles, flux.

    ``pressure`` and ``iota`` are polynomial coefficients in the normalized
    flux s = rho^2 (ascending powers); pressure in pascals, iota
    dimensionless.  ``psi_b`` is the enclosed toroidal flux divided by 2 pi,
    in webers.
    """

    boundary_r: SurfaceCoefficients
    boundary_z: SurfaceCoefficients
    pressure: np.ndarray
    iota: np.ndarray
    psi_b: float
    n_fp: int
    M: int
    N: int
    axis_r: Optional[np.ndarray] = None
    axis_z: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pressure = np.atleast_1d(np.asarray(self.pressure, dtype=float))
        self.iota = np.atleast_1d(np.asarray(self.iota, dtype=float))
        for name in ("axis_r", "axis_z"):
            arr = getattr(self, name)
            if arr is not None:
                setattr(self, name, np.atleast_1d(np.asarray(arr, dtype=float)))

    # profile evaluation, exact polynomial derivatives
    def pressure_at(self, s):
        return npoly.polyval(s, self.pressure)

    def pressure_prime(self, s):
        return npoly.polyval(s, npoly.polyder(self.pressure))

    def iota_at(self, s):
        return npoly.polyval(s, self.iota)

    def iota_prime(self, s):
        return npoly.polyval(s, npoly.polyder(self.iota))

    @property
    def boundary_M(self) -> int:
        return self.boundary_r.mode_set.M

    @property
    def boundary_N(self) -> int:
        return self.boundary_r.mode_set.N

    def validate(self) -> None:
        if self.boundary_r.mode_set.parity != spectral.COSINE:
            raise ValueError("boundary R coefficients must have cosine parity")
        if self.boundary_z.mode_set.parity != spectral.SINE:
            raise ValueError("boundary Z coefficients must have sine parity")
        if self.boundary_M > self.M or self.boundary_N > self.N:
            raise ValueError(
                f"boundary harmonics ({self.boundary_M}, {self.boundary_N}) exceed "
                f"the spectral resolution ({self.M}, {self.N})"
            )
        if self.boundary_z.mode_set.M > self.M or self.boundary_z.mode_set.N > self.N:
            raise ValueError("boundary Z harmonics exceed the spectral resolution")
        if self.n_fp < 1:
            raise ValueError("n_fp must be a positive integer")
        if self.psi_b == 0.0:
            raise ValueError("psi_b must be nonzero")
        for name in ("axis_r", "axis_z"):
            arr = getattr(self, name)
            if arr is not None and arr.size > self.N + 1:
                raise ValueError(f"{name} has more entries than toroidal modes")
        theta = 2.0 * np.pi * np.arange(4 * self.M) / (4 * self.M)
        rb = spectral.synthesize(self.boundary_r, theta, np.zeros(1)).value[:, 0]
        zb = spectral.synthesize(self.boundary_z, theta, np.zeros(1)).value[:, 0]
        if polygon_self_intersects(np.column_stack([rb, zb])):
            raise ValueError("boundary cross-section at zeta=0 is self-intersecting")


def padded_boundary(coeffs: SurfaceCoefficients, target: ModeSet) -> np.ndarray:
    """Boundary coefficients embedded in a (possibly larger) mode set."""
    src = coeffs.mode_set
    if src.M > target.M or src.N > target.N:
        raise ValueError("boundary mode set exceeds the target resolution")
    out = np.zeros(target.size)
    for i in range(src.size):
        out[target.index_of(int(src.m[i]), int(src.n[i]))] = coeffs.values[i]
    return out


def _axis_targets(input: EquilibriumInput, mode_set: ModeSet, boundary_vec: np.ndarray, axis: Optional[np.ndarray]) -> np.ndarray:
    """Per-mode shift X_a0n - X_b0n applied to the m=0 entries."""
    target = np.zeros(mode_set.size)
    m0 = mode_set.m == 0
    if axis is None:
        return target
    for i in np.nonzero(m0)[0]:
        n = int(mode_set.n[i])
        if n < axis.size:
            target[i] = axis[n] - boundary_vec[i]
    if mode_set.parity == spectral.SINE:
        target[mode_set.fixed_mask] = 0.0
    return target


def init_params(
    mode_sets: tuple[ModeSet, ModeSet],
    width: int,
    seed: int,
    input: EquilibriumInput,
) -> NetParams:
    """Draw fresh network parameters and anchor the initial surfaces.

    Weights are sampled from N(0, 0.01^2) with a seeded generator (one
    spawned stream per coordinate network, draw order W0, W1, W2); hidden
    biases start at zero.  The last bias is then corrected so that at rho=0
    the m=0 profiles hit the axis guess exactly and every other raw network
    output vanishes, which makes the initial surfaces the linear-in-s
    interpolation between axis guess and boundary.

    Without an axis guess the m=0 boundary coefficients stand in for it,
    which is safe for convex boundaries.
    """
    if width < 1:
        raise ValueError("width must be at least 1")
    modes_cos, modes_sin = mode_sets
    if modes_cos.size != modes_sin.size:
        raise ValueError("cosine and sine mode sets must have equal size")
    k = modes_cos.size

    rb = padded_boundary(input.boundary_r, modes_cos)
    zb = padded_boundary(input.boundary_z, modes_sin)
    if input.axis_r is None and rb[modes_cos.index_of(0, 0)] == 0.0:
        raise ValueError("no axis guess and the boundary has no (0,0) R mode")

    streams = np.random.SeedSequence(seed).spawn(3)
    nets = []
    targets = [
        _axis_targets(input, modes_cos, rb, input.axis_r),
        np.zeros(k),
        _axis_targets(input, modes_sin, zb, input.axis_z),
    ]
    for stream, target in zip(streams, targets):
        rng = np.random.default_rng(stream)
        w0 = rng.normal(0.0, 0.01, size=(width, 1))
        w1 = rng.normal(0.0, 0.01, size=(width, width))
        w2 = rng.normal(0.0, 0.01, size=(k, width))
        net = MLPCoefficients(w0, np.zeros(width), w1, np.zeros(width), w2, np.zeros(k))
        raw, _, _ = mlp_forward(net, input_map(0.0))
        net.b2 = target - raw
        nets.append(net)
    return NetParams(nets[0], nets[1], nets[2], modes_cos, modes_sin)


# -- composed profiles ---------------------------------------------------------


@dataclass
class ModeProfiles:
    """Profiles of every Fourier coefficient at one radius."""

    rho: float
    r: SurfaceCoefficients
    lam: SurfaceCoefficients
    z: SurfaceCoefficients


@dataclass
class ProfileStack:
    """Profile values and radial derivatives for a whole radius batch.

    Arrays have shape (n_rho, n_modes) and may be numpy arrays or autodiff
    variables; this is the hand-off format consumed by the field kernel.
    """

    rho: np.ndarray
    modes_cos: ModeSet
    modes_sin: ModeSet
    r: Jet2
    lam: Jet2
    z: Jet2


def _rho_power_jet(rho: np.ndarray, mode_set: ModeSet) -> Jet2:
    """Jets of rho^m for every mode, exact for all m >= 0 (rho > 0)."""
    rho = rho[:, None]
    m = mode_set.m.astype(float)[None, :]
    p0 = rho ** mode_set.m[None, :]
    p1 = rho ** np.maximum(mode_set.m[None, :] - 1, 0)
    p2 = rho ** np.maximum(mode_set.m[None, :] - 2, 0)
    return Jet2(p0, m * p1, m * (m - 1.0) * p2)


@dataclass
class ProfileConstants:
    """Radius- and boundary-dependent constants of the profile composition.

    Everything here is parameter-independent, so the solver builds it once
    per grid and reuses it for every loss evaluation.
    """

    rho: np.ndarray
    f: Jet2
    phi: Jet2
    pow_cos: Jet2
    pow_sin: Jet2
    rb: np.ndarray
    zb: np.ndarray
    live: np.ndarray

    @classmethod
    def build(
        cls,
        input: "EquilibriumInput",
        modes_cos: ModeSet,
        modes_sin: ModeSet,
        rho: np.ndarray,
    ) -> "ProfileConstants":
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        if np.any(rho <= 0.0) or np.any(rho >= 1.0):
            raise ValueError("rho must lie strictly inside (0, 1)")
        col = rho[:, None]
        return cls(
            rho=rho,
            f=Jet2(input_map(col), 4.0 * col, np.full_like(col, 4.0)),
            phi=Jet2(1.0 - col * col, -2.0 * col, np.full_like(col, -2.0)),
            pow_cos=_rho_power_jet(rho, modes_cos),
            pow_sin=_rho_power_jet(rho, modes_sin),
            rb=padded_boundary(input.boundary_r, modes_cos)[None, :],
            zb=padded_boundary(input.boundary_z, modes_sin)[None, :],
            live=np.where(modes_sin.fixed_mask, 0.0, 1.0)[None, :],
        )


def profile_stack(
    params: NetParams,
    input: EquilibriumInput,
    rho,
    constants: Optional[ProfileConstants] = None,
) -> ProfileStack:
    """Composed mode profiles with exact first/second rho-derivatives.

    Accepts network parameters holding numpy arrays or autodiff variables;
    the radial grid must lie strictly inside (0, 1).
    """
    c = constants or ProfileConstants.build(
        input, params.modes_cos, params.modes_sin, rho
    )
    nn_r = _mlp_jet(params.r, c.f)
    nn_l = _mlp_jet(params.lam, c.f)
    nn_z = _mlp_jet(params.z, c.f)

    r = c.pow_cos * (c.phi * nn_r + c.rb)
    lam = c.pow_sin * nn_l * c.live
    z = c.pow_sin * (c.phi * nn_z + c.zb) * c.live
    return ProfileStack(c.rho, params.modes_cos, params.modes_sin, r, lam, z)


def mode_profiles(params: NetParams, input: EquilibriumInput, rho: float) -> ModeProfiles:
    """Profiles and radial derivatives of every coefficient at one radius."""
    stack = profile_stack(params, input, [float(rho)])

    def row(jet: Jet2, modes: ModeSet) -> SurfaceCoefficients:
        return SurfaceCoefficients(
            modes,
            ad.value_of(jet.value)[0],
            d_rho=ad.value_of(jet.d1)[0],
            d_rho2=ad.value_of(jet.d2)[0],
        )

    return ModeProfiles(
        rho=float(rho),
        r=row(stack.r, params.modes_cos),
        lam=row(stack.lam, params.modes_sin),
        z=row(stack.z, params.modes_sin),
    )


def stack_profiles(profiles: Sequence[ModeProfiles]) -> ProfileStack:
    """Bundle per-surface profiles into the batch format the kernel expects."""
    if not profiles:
        raise ValueError("need at least one surface")
    rho = np.array([p.rho for p in profiles])

    def gather(pick) -> Jet2:
        return Jet2(
            np.stack([pick(p).values for p in profiles]),
            np.stack([pick(p).d_rho for p in profiles]),
            np.stack([pick(p).d_rho2 for p in profiles]),
        )

    first = profiles[0]
    return ProfileStack(
        rho,
        first.r.mode_set,
        first.lam.mode_set,
        gather(lambda p: p.r),
        gather(lambda p: p.lam),
        gather(lambda p: p.z),
    )
