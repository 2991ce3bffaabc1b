"""Geometry, magnetic field, current and force residual on a collocation grid.

Works in the inverse map from magnetic coordinates (s, theta, zeta) to
cylindrical coordinates, with s = rho^2 the normalized toroidal flux.  The
covariant basis vectors in the cylindrical frame are

    e_s = (ds R, 0, ds Z),  e_theta = (dt R, 0, dt Z),  e_zeta = (dz R, R, dz Z)

giving the Jacobian sqrt(g) = e_s . (e_theta x e_zeta) = R (dt R ds Z - ds R dt Z)
and the metric g_ij = di R dj R + R^2 di phi dj phi + di Z dj Z.

With nested flux surfaces the field has no contravariant s component:

    B^theta = psi_b (iota - dz lambda) / sqrt(g)
    B^zeta  = psi_b (1 + dt lambda) / sqrt(g)
    B_i     = B^theta g_{i theta} + B^zeta g_{i zeta}

The current follows from Ampere's law, J^i = (dj B_k - dk B_j) / (mu0 sqrt(g))
for cyclic (i, j, k), which needs second derivatives of (R, lambda, Z); the
radial ones enter through the profile jets, the angular ones through the
trigonometric basis.  Nothing in this module is finite-differenced.

The force residual F = (curl B) x B - mu0 grad p splits into a flux-surface
normal and a helical part,

    F = F_s e^s + F_h e^h,      e^h = sqrt(g) (B^zeta e^theta - B^theta e^zeta)
    F_s = mu0 [ sqrt(g) (J^theta B^zeta - J^zeta B^theta) - p'(s) ]
    F_h = -mu0 J^s

and the reported magnitude is ||F|| = sqrt(F_s^2 (e^s.e^s) + F_h^2 (e^h.e^h)).

All field arrays are shaped (n_rho, n_theta * n_zeta) and may be plain numpy
arrays or autodiff variables; the same code path produces the training loss
and the diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import autodiff as ad
from . import spectral
from .netfield import MU0, ProfileStack

__all__ = [
    "CollocationGrid",
    "FieldState",
    "JacobianSignError",
    "geometry",
    "magnetic_field",
    "current",
    "force",
    "grad_B2_magnitude",
    "gradient_magnitude",
    "volume",
    "volume_average",
    "surface_average",
    "surface_average_profile",
    "f_norm",
    "contravariant_basis",
]


class JacobianSignError(RuntimeError):
    """sqrt(g) vanished, changed sign or went non-finite: surfaces overlap."""

    def __init__(self, message: str, node: Optional[tuple] = None):
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class CollocationGrid:
    """Interior radial nodes and uniform endpoint-exclusive angular nodes."""

    rho: np.ndarray
    theta: np.ndarray
    zeta: np.ndarray
    n_fp: int

    def __post_init__(self):
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "zeta", np.asarray(self.zeta, dtype=float))
        if self.rho.size == 0 or self.theta.size == 0 or self.zeta.size == 0:
            raise ValueError("grid must have at least one node per direction")
        if np.any(self.rho <= 0.0) or np.any(self.rho >= 1.0):
            raise ValueError("rho nodes must lie strictly inside (0, 1)")
        if np.any(np.diff(self.rho) <= 0.0):
            raise ValueError("rho nodes must be strictly increasing")
        if self.n_fp < 1:
            raise ValueError("n_fp must be a positive integer")

    @classmethod
    def build(
        cls,
        n_rho: int,
        M: int,
        N: int,
        n_fp: int,
        n_theta: int = 0,
        n_zeta: int = 0,
    ) -> "CollocationGrid":
        """Midpoint radial nodes with 4x oversampled angular grids."""
        rho = (np.arange(n_rho) + 0.5) / n_rho
        if n_theta <= 0:
            n_theta = 4 * M
        if n_zeta <= 0:
            n_zeta = max(1, 4 * N)
        theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
        zeta = 2.0 * np.pi * np.arange(n_zeta) / (n_fp * n_zeta)
        return cls(rho, theta, zeta, n_fp)

    @property
    def n_rho(self) -> int:
        return self.rho.size

    @property
    def n_angular(self) -> int:
        return self.theta.size * self.zeta.size

    @property
    def n_nodes(self) -> int:
        return self.n_rho * self.n_angular

    @property
    def rho_weights(self) -> np.ndarray:
        """Midpoint-rule cell widths, with edge cells reaching 0 and 1."""
        edges = np.concatenate(
            [[0.0], 0.5 * (self.rho[1:] + self.rho[:-1]), [1.0]]
        )
        return np.diff(edges)

    def node_index(self, flat: int) -> tuple[int, int, int]:
        per_surface = self.n_angular
        i = flat // per_surface
        rem = flat % per_surface
        return (i, rem // self.zeta.size, rem % self.zeta.size)


@dataclass
class FieldState:
    """Per-node geometric and magnetic quantities, filled in stages.

    Suffix convention: _s, _t, _z are partial derivatives with respect to
    s, theta, zeta; bsup/bsub are contra-/covariant field components.
    """

    grid: CollocationGrid = None
    psi_b: float = 0.0

    # coordinate map and partials
    R: object = None
    R_s: object = None
    R_t: object = None
    R_z: object = None
    R_ss: object = None
    R_st: object = None
    R_sz: object = None
    R_tt: object = None
    R_tz: object = None
    R_zz: object = None
    Z_s: object = None
    Z_t: object = None
    Z_z: object = None
    Z_ss: object = None
    Z_st: object = None
    Z_sz: object = None
    Z_tt: object = None
    Z_tz: object = None
    Z_zz: object = None
    Z: object = None
    lam: object = None
    L_t: object = None
    L_z: object = None
    L_st: object = None
    L_sz: object = None
    L_tt: object = None
    L_tz: object = None
    L_zz: object = None

    # Jacobian and metric
    sqrtg: object = None
    sqrtg_s: object = None
    sqrtg_t: object = None
    sqrtg_z: object = None
    g_ss: object = None
    g_st: object = None
    g_sz: object = None
    g_tt: object = None
    g_tz: object = None
    g_zz: object = None
    gu_ss: object = None
    gu_st: object = None
    gu_sz: object = None
    gu_tt: object = None
    gu_tz: object = None
    gu_zz: object = None

    # magnetic field
    iota: object = None
    iota_prime: object = None
    bsup_t: object = None
    bsup_z: object = None
    bsup_t_s: object = None
    bsup_t_t: object = None
    bsup_t_z: object = None
    bsup_z_s: object = None
    bsup_z_t: object = None
    bsup_z_z: object = None
    bsub_s: object = None
    bsub_t: object = None
    bsub_z: object = None
    B2: object = None
    Bmag: object = None

    # covariant-component derivatives and current
    bsub_s_t: object = None
    bsub_s_z: object = None
    bsub_t_s: object = None
    bsub_t_t: object = None
    bsub_t_z: object = None
    bsub_z_s: object = None
    bsub_z_t: object = None
    bsub_z_z: object = None
    jsup_s: object = None
    jsup_t: object = None
    jsup_z: object = None

    # force residual
    p_prime: object = None
    F_s: object = None
    F_h: object = None
    ehh: object = None
    F_mag: object = None


def _check_jacobian(sqrtg, grid: CollocationGrid) -> None:
    vals = ad.value_of(sqrtg)
    bad = ~np.isfinite(vals)
    if bad.any():
        flat = int(np.argmax(bad))
        raise JacobianSignError(
            f"non-finite Jacobian at node {grid.node_index(flat)}",
            node=grid.node_index(flat),
        )
    ref = np.sign(vals.flat[0])
    offending = (np.sign(vals) != ref) | (vals == 0.0)
    if offending.any():
        flat = int(np.argmax(offending))
        raise JacobianSignError(
            "Jacobian vanished or changed sign at node "
            f"{grid.node_index(flat)}: flux surfaces overlap",
            node=grid.node_index(flat),
        )


def geometry(
    profiles: ProfileStack,
    grid: CollocationGrid,
    cos_tables=None,
    sin_tables=None,
) -> FieldState:
    """Synthesize the map, Jacobian and both metric forms on the grid.

    Radial derivatives arrive as d/d rho in the profile jets and convert to
    flux derivatives through d/ds = d/drho / (2 rho).  Trigonometric tables
    depend only on (mode set, grid) and may be passed in precomputed.
    """
    cos_tabs = cos_tables or spectral.trig_tables(profiles.modes_cos, grid.theta, grid.zeta)
    sin_tabs = sin_tables or spectral.trig_tables(profiles.modes_sin, grid.theta, grid.zeta)

    rho = profiles.rho[:, None]
    alpha = 1.0 / (2.0 * rho)

    def synth(jet, tabs):
        mm = ad.matmul
        out = {
            "v": mm(jet.value, tabs.value),
            "t": mm(jet.value, tabs.dt),
            "z": mm(jet.value, tabs.dz),
            "tt": mm(jet.value, tabs.dtt),
            "tz": mm(jet.value, tabs.dtz),
            "zz": mm(jet.value, tabs.dzz),
            "r": mm(jet.d1, tabs.value),
            "rt": mm(jet.d1, tabs.dt),
            "rz": mm(jet.d1, tabs.dz),
            "rr": mm(jet.d2, tabs.value),
        }
        return out

    r = synth(profiles.r, cos_tabs)
    z = synth(profiles.z, sin_tabs)
    lam = synth(profiles.lam, sin_tabs)

    st = FieldState(grid=grid)
    st.R, st.R_t, st.R_z = r["v"], r["t"], r["z"]
    st.R_tt, st.R_tz, st.R_zz = r["tt"], r["tz"], r["zz"]
    st.R_s = alpha * r["r"]
    st.R_st = alpha * r["rt"]
    st.R_sz = alpha * r["rz"]
    st.R_ss = alpha * alpha * (r["rr"] - r["r"] / rho)

    st.Z, st.Z_t, st.Z_z = z["v"], z["t"], z["z"]
    st.Z_tt, st.Z_tz, st.Z_zz = z["tt"], z["tz"], z["zz"]
    st.Z_s = alpha * z["r"]
    st.Z_st = alpha * z["rt"]
    st.Z_sz = alpha * z["rz"]
    st.Z_ss = alpha * alpha * (z["rr"] - z["r"] / rho)

    st.lam = lam["v"]
    st.L_t, st.L_z = lam["t"], lam["z"]
    st.L_tt, st.L_tz, st.L_zz = lam["tt"], lam["tz"], lam["zz"]
    st.L_st = alpha * lam["rt"]
    st.L_sz = alpha * lam["rz"]

    w = st.R_t * st.Z_s - st.R_s * st.Z_t
    w_s = st.R_st * st.Z_s + st.R_t * st.Z_ss - st.R_ss * st.Z_t - st.R_s * st.Z_st
    w_t = st.R_tt * st.Z_s + st.R_t * st.Z_st - st.R_st * st.Z_t - st.R_s * st.Z_tt
    w_z = st.R_tz * st.Z_s + st.R_t * st.Z_sz - st.R_sz * st.Z_t - st.R_s * st.Z_tz
    st.sqrtg = st.R * w
    _check_jacobian(st.sqrtg, grid)
    st.sqrtg_s = st.R_s * w + st.R * w_s
    st.sqrtg_t = st.R_t * w + st.R * w_t
    st.sqrtg_z = st.R_z * w + st.R * w_z

    st.g_ss = st.R_s * st.R_s + st.Z_s * st.Z_s
    st.g_st = st.R_s * st.R_t + st.Z_s * st.Z_t
    st.g_sz = st.R_s * st.R_z + st.Z_s * st.Z_z
    st.g_tt = st.R_t * st.R_t + st.Z_t * st.Z_t
    st.g_tz = st.R_t * st.R_z + st.Z_t * st.Z_z
    st.g_zz = st.R_z * st.R_z + st.R * st.R + st.Z_z * st.Z_z

    det = st.sqrtg * st.sqrtg
    st.gu_ss = (st.g_tt * st.g_zz - st.g_tz * st.g_tz) / det
    st.gu_st = (st.g_sz * st.g_tz - st.g_st * st.g_zz) / det
    st.gu_sz = (st.g_st * st.g_tz - st.g_sz * st.g_tt) / det
    st.gu_tt = (st.g_ss * st.g_zz - st.g_sz * st.g_sz) / det
    st.gu_tz = (st.g_sz * st.g_st - st.g_ss * st.g_tz) / det
    st.gu_zz = (st.g_ss * st.g_tt - st.g_st * st.g_st) / det
    return st


def magnetic_field(state: FieldState, iota_coeffs, psi_b: float) -> FieldState:
    """Fill contravariant and covariant field components and their partials.

    ``iota_coeffs`` are the rotational-transform polynomial coefficients in
    s (ascending); the flux normalization makes d psi / ds = psi_b.
    """
    s = (state.grid.rho**2)[:, None]
    iota_coeffs = np.atleast_1d(np.asarray(iota_coeffs, dtype=float))
    state.iota = npoly.polyval(s, iota_coeffs)
    state.iota_prime = npoly.polyval(s, npoly.polyder(iota_coeffs))
    state.psi_b = float(psi_b)

    u = (state.iota - state.L_z) * psi_b
    v = (1.0 + state.L_t) * psi_b
    u_s = (state.iota_prime - state.L_sz) * psi_b
    u_t = state.L_tz * (-psi_b)
    u_z = state.L_zz * (-psi_b)
    v_s = state.L_st * psi_b
    v_t = state.L_tt * psi_b
    v_z = state.L_tz * psi_b

    g = state.sqrtg
    state.bsup_t = u / g
    state.bsup_z = v / g
    state.bsup_t_s = (u_s - state.bsup_t * state.sqrtg_s) / g
    state.bsup_t_t = (u_t - state.bsup_t * state.sqrtg_t) / g
    state.bsup_t_z = (u_z - state.bsup_t * state.sqrtg_z) / g
    state.bsup_z_s = (v_s - state.bsup_z * state.sqrtg_s) / g
    state.bsup_z_t = (v_t - state.bsup_z * state.sqrtg_t) / g
    state.bsup_z_z = (v_z - state.bsup_z * state.sqrtg_z) / g

    state.bsub_s = state.bsup_t * state.g_st + state.bsup_z * state.g_sz
    state.bsub_t = state.bsup_t * state.g_tt + state.bsup_z * state.g_tz
    state.bsub_z = state.bsup_t * state.g_tz + state.bsup_z * state.g_zz
    state.B2 = state.bsup_t * state.bsub_t + state.bsup_z * state.bsub_z
    state.Bmag = ad.sqrt(state.B2)
    return state


def current(state: FieldState) -> FieldState:
    """Contravariant current from the curl of the covariant field."""
    st = state
    g_st_s = st.R_ss * st.R_t + st.R_s * st.R_st + st.Z_ss * st.Z_t + st.Z_s * st.Z_st
    g_st_t = st.R_st * st.R_t + st.R_s * st.R_tt + st.Z_st * st.Z_t + st.Z_s * st.Z_tt
    g_st_z = st.R_sz * st.R_t + st.R_s * st.R_tz + st.Z_sz * st.Z_t + st.Z_s * st.Z_tz
    g_sz_s = st.R_ss * st.R_z + st.R_s * st.R_sz + st.Z_ss * st.Z_z + st.Z_s * st.Z_sz
    g_sz_t = st.R_st * st.R_z + st.R_s * st.R_tz + st.Z_st * st.Z_z + st.Z_s * st.Z_tz
    g_sz_z = st.R_sz * st.R_z + st.R_s * st.R_zz + st.Z_sz * st.Z_z + st.Z_s * st.Z_zz
    g_tt_s = 2.0 * (st.R_t * st.R_st + st.Z_t * st.Z_st)
    g_tt_t = 2.0 * (st.R_t * st.R_tt + st.Z_t * st.Z_tt)
    g_tt_z = 2.0 * (st.R_t * st.R_tz + st.Z_t * st.Z_tz)
    g_tz_s = st.R_st * st.R_z + st.R_t * st.R_sz + st.Z_st * st.Z_z + st.Z_t * st.Z_sz
    g_tz_t = st.R_tt * st.R_z + st.R_t * st.R_tz + st.Z_tt * st.Z_z + st.Z_t * st.Z_tz
    g_tz_z = st.R_tz * st.R_z + st.R_t * st.R_zz + st.Z_tz * st.Z_z + st.Z_t * st.Z_zz
    g_zz_s = 2.0 * (st.R_z * st.R_sz + st.Z_z * st.Z_sz + st.R * st.R_s)
    g_zz_t = 2.0 * (st.R_z * st.R_tz + st.Z_z * st.Z_tz + st.R * st.R_t)
    g_zz_z = 2.0 * (st.R_z * st.R_zz + st.Z_z * st.Z_zz + st.R * st.R_z)

    bt, bz = st.bsup_t, st.bsup_z
    st.bsub_s_t = st.bsup_t_t * st.g_st + bt * g_st_t + st.bsup_z_t * st.g_sz + bz * g_sz_t
    st.bsub_s_z = st.bsup_t_z * st.g_st + bt * g_st_z + st.bsup_z_z * st.g_sz + bz * g_sz_z
    st.bsub_t_s = st.bsup_t_s * st.g_tt + bt * g_tt_s + st.bsup_z_s * st.g_tz + bz * g_tz_s
    st.bsub_t_t = st.bsup_t_t * st.g_tt + bt * g_tt_t + st.bsup_z_t * st.g_tz + bz * g_tz_t
    st.bsub_t_z = st.bsup_t_z * st.g_tt + bt * g_tt_z + st.bsup_z_z * st.g_tz + bz * g_tz_z
    st.bsub_z_s = st.bsup_t_s * st.g_tz + bt * g_tz_s + st.bsup_z_s * st.g_zz + bz * g_zz_s
    st.bsub_z_t = st.bsup_t_t * st.g_tz + bt * g_tz_t + st.bsup_z_t * st.g_zz + bz * g_zz_t
    st.bsub_z_z = st.bsup_t_z * st.g_tz + bt * g_tz_z + st.bsup_z_z * st.g_zz + bz * g_zz_z

    denom = st.sqrtg * MU0
    st.jsup_s = (st.bsub_z_t - st.bsub_t_z) / denom
    st.jsup_t = (st.bsub_s_z - st.bsub_z_s) / denom
    st.jsup_z = (st.bsub_t_s - st.bsub_s_t) / denom
    return st


def force(state: FieldState, p_prime) -> FieldState:
    """Force residual components and the per-node magnitude.

    ``p_prime`` is dp/ds in pascals per unit s, one value per surface (or a
    scalar).  The residual keeps the single mu0 factor of the momentum
    balance written in terms of curl B.
    """
    st = state
    pp = np.asarray(p_prime, dtype=float)
    if pp.ndim == 1:
        pp = pp[:, None]
    st.p_prime = pp
    st.F_s = (st.sqrtg * (st.jsup_t * st.bsup_z - st.jsup_z * st.bsup_t) - pp) * MU0
    st.F_h = st.jsup_s * (-MU0)
    det = st.sqrtg * st.sqrtg
    st.ehh = det * (
        st.bsup_z * st.bsup_z * st.gu_tt
        - 2.0 * (st.bsup_t * st.bsup_z * st.gu_tz)
        + st.bsup_t * st.bsup_t * st.gu_zz
    )
    st.F_mag = ad.sqrt(st.F_s * st.F_s * st.gu_ss + st.F_h * st.F_h * st.ehh)
    return st


def gradient_magnitude(state: FieldState, dq_s, dq_t, dq_z):
    """|grad q| from the contravariant metric, given the partials of q."""
    quad = (
        dq_s * dq_s * state.gu_ss
        + dq_t * dq_t * state.gu_tt
        + dq_z * dq_z * state.gu_zz
        + 2.0 * (dq_s * dq_t * state.gu_st)
        + 2.0 * (dq_s * dq_z * state.gu_sz)
        + 2.0 * (dq_t * dq_z * state.gu_tz)
    )
    return ad.sqrt(quad)


def grad_B2_magnitude(state: FieldState):
    """Magnetic-pressure gradient magnitude |grad |B|^2| / (2 mu0) per node."""
    st = state
    b2_s = (
        st.bsup_t_s * st.bsub_t
        + st.bsup_t * st.bsub_t_s
        + st.bsup_z_s * st.bsub_z
        + st.bsup_z * st.bsub_z_s
    )
    b2_t = (
        st.bsup_t_t * st.bsub_t
        + st.bsup_t * st.bsub_t_t
        + st.bsup_z_t * st.bsub_z
        + st.bsup_z * st.bsub_z_t
    )
    b2_z = (
        st.bsup_t_z * st.bsub_t
        + st.bsup_t * st.bsub_t_z
        + st.bsup_z_z * st.bsub_z
        + st.bsup_z * st.bsub_z_z
    )
    return gradient_magnitude(state, b2_s, b2_t, b2_z) / (2.0 * MU0)


# -- quadrature ----------------------------------------------------------------


def _node_weights(state: FieldState, grid: CollocationGrid) -> np.ndarray:
    """|sqrt(g)| times the s-measure 2 rho d rho, per node (uniform angles)."""
    absg = np.abs(ad.value_of(state.sqrtg))
    radial = (2.0 * grid.rho * grid.rho_weights)[:, None]
    return absg * radial


def volume(state: FieldState, grid: CollocationGrid) -> float:
    """Plasma volume of the full torus."""
    w = _node_weights(state, grid)
    dtheta = 2.0 * np.pi / grid.theta.size
    dzeta = 2.0 * np.pi / grid.zeta.size
    return float(w.sum() * dtheta * dzeta)


def volume_average(q, state: FieldState, grid: CollocationGrid) -> float:
    """Volume average with |sqrt(g)| weights; exact 1 for q = 1."""
    w = _node_weights(state, grid)
    q = ad.value_of(q)
    return float((q * w).sum() / w.sum())


def surface_average(q, state: FieldState, grid: CollocationGrid, index: int) -> float:
    """Flux-surface average of q on the surface at grid.rho[index]."""
    absg = np.abs(ad.value_of(state.sqrtg)[index])
    q = ad.value_of(q)[index]
    return float((q * absg).sum() / absg.sum())


def surface_average_profile(q, state: FieldState, grid: CollocationGrid) -> np.ndarray:
    absg = np.abs(ad.value_of(state.sqrtg))
    q = ad.value_of(q)
    return (q * absg).sum(axis=1) / absg.sum(axis=1)


def f_norm(state: FieldState, grid: CollocationGrid, normalizer: float):
    """Normalized force residual per node and its volume average.

    ``normalizer`` is the volume-averaged magnetic-pressure-gradient
    magnitude <|grad |B|^2| / (2 mu0)>.  The extra mu0 carried by F_mag is
    divided out so the ratio compares (J x B - grad p) against the
    normalizer directly.
    """
    if normalizer <= 0.0:
        raise ValueError("normalizer must be positive (degenerate field)")
    fn = ad.value_of(state.F_mag) / (MU0 * normalizer)
    return fn, volume_average(fn, state, grid)


def contravariant_basis(state: FieldState):
    """e^s, e^theta, e^zeta as cylindrical component triples (plain arrays)."""
    e_s = np.stack([ad.value_of(state.R_s), np.zeros_like(ad.value_of(state.R)), ad.value_of(state.Z_s)])
    e_t = np.stack([ad.value_of(state.R_t), np.zeros_like(ad.value_of(state.R)), ad.value_of(state.Z_t)])
    e_z = np.stack([ad.value_of(state.R_z), ad.value_of(state.R), ad.value_of(state.Z_z)])
    sqrtg = ad.value_of(state.sqrtg)

    def cross(a, b):
        return np.stack(
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        )

    return cross(e_t, e_z) / sqrtg, cross(e_z, e_s) / sqrtg, cross(e_s, e_t) / sqrtg
