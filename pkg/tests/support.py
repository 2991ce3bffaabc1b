"""Shared fixtures-in-code for the kernel and acceptance tests."""

import numpy as np

from equinn.autodiff import Jet2
from equinn.netfield import ProfileStack
from equinn.spectral import build_mode_set


def torus_stack(rho, R0=3.0, a=1.0, M=2, axis_shift=None):
    """Concentric circular surfaces R = R0 + a rho cos(theta), Z = a rho sin(theta).

    ``axis_shift`` adds an m=0 radial profile shift * rho^2 to R, used to
    construct deliberately overlapping surfaces.
    """
    rho = np.asarray(rho, dtype=float)
    cos_set = build_mode_set(M, 0, 1, "cos")
    sin_set = build_mode_set(M, 0, 1, "sin")
    n = rho.size
    k = cos_set.size

    rv, r1, r2 = np.zeros((3, n, k))
    rv[:, cos_set.index_of(0, 0)] = R0
    rv[:, cos_set.index_of(1, 0)] = a * rho
    r1[:, cos_set.index_of(1, 0)] = a
    if axis_shift is not None:
        rv[:, cos_set.index_of(0, 0)] += axis_shift * rho**2
        r1[:, cos_set.index_of(0, 0)] = 2 * axis_shift * rho
        r2[:, cos_set.index_of(0, 0)] = 2 * axis_shift

    zv, z1, z2 = np.zeros((3, n, k))
    zv[:, sin_set.index_of(1, 0)] = a * rho
    z1[:, sin_set.index_of(1, 0)] = a

    lv = np.zeros((n, k))
    return ProfileStack(
        rho, cos_set, sin_set,
        Jet2(rv, r1, r2), Jet2(lv, lv.copy(), lv.copy()), Jet2(zv, z1, z2),
    )
