"""Case files, checkpoints, diagnostics export and the command line.

The case file is a minimal sectioned text format::

    [global]
    psi_b = 1.0
    n_fp = 1
    M = 11
    N = 0

    [boundary]
    # m  n  R  Z
    0  0  3.51   0.0
    1  0  -1.0   1.47
    2  0  0.106  0.16

    [axis]      # optional, one row per toroidal mode n
    0  3.51  0.0

    [profiles]
    pressure = 1600 -3200 1600   # polynomial in s = rho^2, pascals
    iota = 1.0 -0.67

    [solver]    # optional overrides
    width = 8
    surfaces = 50

Boundary rows hold the cosine R and sine Z harmonics of the last closed
flux surface (the convention shared with VMEC-style inputs: poloidal mode
m >= 0, signed toroidal mode n, combined angle m*theta - n*n_fp*zeta).
Unknown keys and malformed rows are rejected with their line number.

Checkpoints are little-endian binary: an 8-byte magic, a format version, a
SHA-256 digest of the canonical case text, the iteration counter, the
layout header (width, modes, resolution) and the raw float64 parameter
arrays in canonical order.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import netfield as nf
from . import solver as sv
from . import spectral
from .autodiff import NonFiniteLossError, grad_check
from .mhdkernel import CollocationGrid, JacobianSignError
from .netfield import EquilibriumInput, NetParams
from .solver import LossAssembler, Solution, SolverConfig
from .spectral import SurfaceCoefficients, build_mode_set

__all__ = [
    "CaseFileError",
    "ThetaStarError",
    "PoincareExport",
    "parse_case",
    "write_case",
    "case_text",
    "builtin_case",
    "save_checkpoint",
    "load_checkpoint",
    "poincare_section",
    "theta_star_contours",
    "invert_theta_star",
    "export_metrics",
    "cli",
    "main",
]

CHECKPOINT_MAGIC = b"EQNNCKPT"
CHECKPOINT_VERSION = 1
OUTDIR_ENV = "EQUINN_OUTDIR"

DSHAPE_CASE = """\
# D-shaped tokamak test case
[global]
psi_b = 1.0
n_fp = 1
M = 11
N = 0

[boundary]
# m  n  R  Z
0  0  3.51  0.0
1  0  -1.0  1.47
2  0  0.106  0.16

[profiles]
pressure = 1600.0 -3200.0 1600.0
iota = 1.0 -0.67

[solver]
width = 8
surfaces = 50
step = 0.0005
"""

BUILTIN_CASES = {"dshape": DSHAPE_CASE}


class CaseFileError(ValueError):
    """Malformed case file; the message carries the offending line."""


class ThetaStarError(RuntimeError):
    """The poloidal angle map theta + lambda is not invertible."""


def builtin_case(name: str) -> str:
    try:
        return BUILTIN_CASES[name]
    except KeyError:
        raise CaseFileError(f"unknown built-in case '{name}'") from None


# -- case parsing ---------------------------------------------------------------

_GLOBAL_KEYS = {"psi_b": float, "n_fp": int, "M": int, "N": int}
_PROFILE_KEYS = {"pressure", "iota"}
_SOLVER_KEYS = {
    "width": int,
    "surfaces": int,
    "theta": int,
    "zeta": int,
    "seed": int,
    "step": float,
    "beta1": float,
    "beta2": float,
    "weight_decay": float,
    "adam_iters": int,
    "bfgs_iters": int,
    "param_tol": float,
    "grad_tol": float,
    "target_fvol": float,
    "target_rel_tol": float,
    "checkpoint_every": int,
}


def _fail(lineno: int, message: str):
    raise CaseFileError(f"line {lineno}: {message}")


def parse_case_text(text: str, name: str = "<case>") -> tuple[EquilibriumInput, SolverConfig]:
    section = None
    glob: dict = {}
    profiles: dict = {}
    solver_kv: dict = {}
    boundary_rows: list = []
    axis_rows: list = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("global", "boundary", "axis", "profiles", "solver"):
                _fail(lineno, f"unknown section [{section}]")
            continue
        if section is None:
            _fail(lineno, "content before any section header")
        if section in ("global", "profiles", "solver"):
            if "=" not in line:
                _fail(lineno, f"expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if section == "global":
                if key not in _GLOBAL_KEYS:
                    _fail(lineno, f"unknown [global] key '{key}'")
                try:
                    glob[key] = _GLOBAL_KEYS[key](value)
                except ValueError:
                    _fail(lineno, f"bad value for '{key}': {value!r}")
            elif section == "profiles":
                if key not in _PROFILE_KEYS:
                    _fail(lineno, f"unknown [profiles] key '{key}'")
                try:
                    profiles[key] = np.array([float(tok) for tok in value.split()])
                except ValueError:
                    _fail(lineno, f"bad coefficient list for '{key}': {value!r}")
                if profiles[key].size == 0:
                    _fail(lineno, f"'{key}' needs at least one coefficient")
            else:
                if key not in _SOLVER_KEYS:
                    _fail(lineno, f"unknown [solver] key '{key}'")
                try:
                    solver_kv[key] = _SOLVER_KEYS[key](value)
                except ValueError:
                    _fail(lineno, f"bad value for '{key}': {value!r}")
        elif section == "boundary":
            toks = line.split()
            if len(toks) != 4:
                _fail(lineno, f"boundary row needs 'm n R Z', got {line!r}")
            try:
                boundary_rows.append((lineno, int(toks[0]), int(toks[1]), float(toks[2]), float(toks[3])))
            except ValueError:
                _fail(lineno, f"bad boundary row: {line!r}")
        elif section == "axis":
            toks = line.split()
            if len(toks) != 3:
                _fail(lineno, f"axis row needs 'n R Z', got {line!r}")
            try:
                axis_rows.append((lineno, int(toks[0]), float(toks[1]), float(toks[2])))
            except ValueError:
                _fail(lineno, f"bad axis row: {line!r}")

    for key in _GLOBAL_KEYS:
        if key not in glob:
            raise CaseFileError(f"{name}: missing [global] key '{key}'")
    for key in _PROFILE_KEYS:
        if key not in profiles:
            raise CaseFileError(f"{name}: missing [profiles] key '{key}'")
    if not boundary_rows:
        raise CaseFileError(f"{name}: no [boundary] rows")

    M, N, n_fp = glob["M"], glob["N"], glob["n_fp"]
    mb = max(r[1] for r in boundary_rows) + 1
    nb = max((abs(r[2]) for r in boundary_rows), default=0)
    for lineno, m, n, _, _ in boundary_rows:
        if m < 0:
            _fail(lineno, f"poloidal mode m={m} must be non-negative")
        if m >= M:
            _fail(lineno, f"boundary mode m={m} exceeds the resolution (M={M})")
        if abs(n) > N:
            _fail(lineno, f"boundary mode n={n} exceeds the resolution (N={N})")
        if m == 0 and n < 0:
            _fail(lineno, f"m=0 rows use n >= 0 only (got n={n})")

    cos_set = build_mode_set(mb, nb, n_fp, spectral.COSINE)
    sin_set = build_mode_set(mb, nb, n_fp, spectral.SINE)
    r_vals = np.zeros(cos_set.size)
    z_vals = np.zeros(sin_set.size)
    for lineno, m, n, rc, zs in boundary_rows:
        r_vals[cos_set.index_of(m, n)] = rc
        if m == 0 and n == 0:
            if zs != 0.0:
                _fail(lineno, "the (0,0) Z harmonic is a sine term and must be 0")
        else:
            z_vals[sin_set.index_of(m, n)] = zs

    axis_r = axis_z = None
    if axis_rows:
        size = max(r[1] for r in axis_rows) + 1
        if size > N + 1:
            _fail(axis_rows[-1][0], f"axis mode n={size - 1} exceeds the resolution (N={N})")
        axis_r = np.zeros(size)
        axis_z = np.zeros(size)
        for lineno, n, ra, za in axis_rows:
            if n < 0:
                _fail(lineno, f"axis rows use n >= 0 (got n={n})")
            axis_r[n] = ra
            axis_z[n] = za

    input = EquilibriumInput(
        boundary_r=SurfaceCoefficients(cos_set, r_vals),
        boundary_z=SurfaceCoefficients(sin_set, z_vals),
        pressure=profiles["pressure"],
        iota=profiles["iota"],
        psi_b=glob["psi_b"],
        n_fp=n_fp,
        M=M,
        N=N,
        axis_r=axis_r,
        axis_z=axis_z,
    )
    input.validate()

    config = SolverConfig()
    adam = config.adamw
    bfgs = config.bfgs
    simple = {
        "width": "width",
        "surfaces": "n_rho",
        "theta": "n_theta",
        "zeta": "n_zeta",
        "seed": "seed",
        "target_fvol": "target_fvol",
        "target_rel_tol": "target_rel_tol",
        "checkpoint_every": "checkpoint_every",
    }
    for key, value in solver_kv.items():
        if key in simple:
            config = replace(config, **{simple[key]: value})
        elif key in ("step", "beta1", "beta2", "weight_decay"):
            adam = replace(adam, **{key: value})
        elif key == "adam_iters":
            adam = replace(adam, max_iter=value)
        elif key == "bfgs_iters":
            bfgs = replace(bfgs, max_iter=value)
        elif key in ("param_tol", "grad_tol"):
            bfgs = replace(bfgs, **{key: value})
    config = replace(config, adamw=adam, bfgs=bfgs)
    return input, config


def parse_case(path_or_name: str) -> tuple[EquilibriumInput, SolverConfig]:
    """Parse a case file, or a built-in case name such as ``dshape``."""
    if path_or_name in BUILTIN_CASES:
        return parse_case_text(BUILTIN_CASES[path_or_name], path_or_name)
    path = Path(path_or_name)
    if not path.exists():
        raise CaseFileError(f"case file not found: {path}")
    return parse_case_text(path.read_text(), str(path))


def _fmt(x: float) -> str:
    return repr(float(x))


def case_text(input: EquilibriumInput, config: SolverConfig) -> str:
    """Canonical case-file rendering; parse(case_text(x)) round-trips."""
    lines = ["[global]"]
    lines.append(f"psi_b = {_fmt(input.psi_b)}")
    lines.append(f"n_fp = {input.n_fp}")
    lines.append(f"M = {input.M}")
    lines.append(f"N = {input.N}")
    lines.append("")
    lines.append("[boundary]")
    cs, ss = input.boundary_r.mode_set, input.boundary_z.mode_set
    for i in range(cs.size):
        m, n = int(cs.m[i]), int(cs.n[i])
        rc = input.boundary_r.values[i]
        zs = 0.0 if (m == 0 and n == 0) else input.boundary_z.values[ss.index_of(m, n)]
        lines.append(f"{m}  {n}  {_fmt(rc)}  {_fmt(zs)}")
    if input.axis_r is not None:
        lines.append("")
        lines.append("[axis]")
        az = input.axis_z if input.axis_z is not None else np.zeros_like(input.axis_r)
        for n in range(input.axis_r.size):
            lines.append(f"{n}  {_fmt(input.axis_r[n])}  {_fmt(az[n])}")
    lines.append("")
    lines.append("[profiles]")
    lines.append("pressure = " + " ".join(_fmt(c) for c in input.pressure))
    lines.append("iota = " + " ".join(_fmt(c) for c in input.iota))
    lines.append("")
    lines.append("[solver]")
    lines.append(f"width = {config.width}")
    lines.append(f"surfaces = {config.n_rho}")
    lines.append(f"theta = {config.n_theta}")
    lines.append(f"zeta = {config.n_zeta}")
    lines.append(f"seed = {config.seed}")
    lines.append(f"step = {_fmt(config.adamw.step)}")
    lines.append(f"beta1 = {_fmt(config.adamw.beta1)}")
    lines.append(f"beta2 = {_fmt(config.adamw.beta2)}")
    lines.append(f"weight_decay = {_fmt(config.adamw.weight_decay)}")
    lines.append(f"adam_iters = {config.adamw.max_iter}")
    lines.append(f"bfgs_iters = {config.bfgs.max_iter}")
    lines.append(f"param_tol = {_fmt(config.bfgs.param_tol)}")
    lines.append(f"grad_tol = {_fmt(config.bfgs.grad_tol)}")
    if config.target_fvol is not None:
        lines.append(f"target_fvol = {_fmt(config.target_fvol)}")
        lines.append(f"target_rel_tol = {_fmt(config.target_rel_tol)}")
    lines.append(f"checkpoint_every = {config.checkpoint_every}")
    return "\n".join(lines) + "\n"


def write_case(input: EquilibriumInput, config: SolverConfig, path) -> None:
    Path(path).write_text(case_text(input, config))


def case_digest(input: EquilibriumInput, config: SolverConfig) -> bytes:
    return hashlib.sha256(case_text(input, config).encode()).digest()


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, params: NetParams, digest: bytes, iteration: int) -> None:
    """Little-endian binary dump of the parameter vector with provenance."""
    vec = nf.params_to_vector(params)
    header = struct.pack(
        "<8sI32sQIIIII",
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        digest,
        iteration,
        params.width,
        params.n_modes,
        params.modes_cos.M,
        params.modes_cos.N,
        params.modes_cos.n_fp,
    )
    data = vec.astype("<f8").tobytes()
    Path(path).write_bytes(header + data)


def load_checkpoint(path) -> tuple[NetParams, bytes, int]:
    blob = Path(path).read_bytes()
    head_size = struct.calcsize("<8sI32sQIIIII")
    if len(blob) < head_size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, digest, iteration, width, k, M, N, n_fp = struct.unpack(
        "<8sI32sQIIIII", blob[:head_size]
    )
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    vec = np.frombuffer(blob[head_size:], dtype="<f8").astype(float)
    modes_cos, modes_sin = spectral.mode_set_pair(M, N, n_fp)
    if k != modes_cos.size:
        raise ValueError(f"{path}: inconsistent mode count")
    per_net = width + width + width * width + width + k * width + k
    if vec.size != 3 * per_net:
        raise ValueError(f"{path}: parameter payload has wrong length")
    zeros = lambda *shape: np.zeros(shape)
    template = NetParams(
        *[
            nf.MLPCoefficients(
                zeros(width, 1), zeros(width), zeros(width, width),
                zeros(width), zeros(k, width), zeros(k),
            )
            for _ in range(3)
        ],
        modes_cos,
        modes_sin,
    )
    params = nf.vector_to_params(vec, template)
    return params, digest, iteration


# -- flux-surface exports ----------------------------------------------------------


@dataclass
class PoincareExport:
    """Closed cross-section polylines at fixed zeta, innermost first."""

    zeta: float
    surfaces: list  # (index, rho, theta, R, Z) with closed polylines

    def rows(self):
        for index, rho, theta, r, z in self.surfaces:
            for j in range(theta.size):
                yield index, rho, theta[j], r[j], z[j]


def _surface_rz(params: NetParams, input: EquilibriumInput, rho: float, theta, zeta: float):
    """R, Z points of one surface; rho = 1 uses the boundary coefficients."""
    theta = np.asarray(theta, dtype=float)
    if rho >= 1.0:
        rc, zc = input.boundary_r, input.boundary_z
    else:
        prof = nf.mode_profiles(params, input, rho)
        rc, zc = prof.r, prof.z
    r = spectral.synthesize(rc, theta, np.array([zeta])).value[:, 0]
    z = spectral.synthesize(zc, theta, np.array([zeta])).value[:, 0]
    return r, z


def poincare_section(
    solution: Solution,
    zeta: float = 0.0,
    surfaces: Optional[Sequence[float]] = None,
    n_theta: int = 256,
) -> PoincareExport:
    """Cross-sections of nested flux surfaces at one toroidal angle."""
    if surfaces is None:
        surfaces = np.linspace(0.1, 1.0, 10)
    surfaces = np.sort(np.asarray(surfaces, dtype=float))
    if surfaces.size == 0:
        raise ValueError("need at least one surface")
    if np.any(surfaces <= 0.0) or np.any(surfaces > 1.0):
        raise ValueError("surface labels must lie in (0, 1]")
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    theta_closed = np.concatenate([theta, theta[:1]])
    out = []
    for index, rho in enumerate(surfaces):
        r, z = _surface_rz(solution.params, solution.input, float(rho), theta, zeta)
        r = np.concatenate([r, r[:1]])
        z = np.concatenate([z, z[:1]])
        out.append((index, float(rho), theta_closed, r, z))
    return PoincareExport(zeta=float(zeta), surfaces=out)


def invert_theta_star(
    lam: Callable,
    dlam: Callable,
    target: float,
    tol: float = 1e-12,
    max_iter: int = 80,
) -> float:
    """Solve theta + lambda(theta) = target by safeguarded Newton iteration.

    ``lam`` and ``dlam`` evaluate lambda and its theta derivative.  The
    bracket is grown until it straddles the root, Newton steps that leave it
    fall back to bisection.
    """

    def g(t):
        return t + lam(t) - target

    lo, hi = target - np.pi, target + np.pi
    for _ in range(8):
        if g(lo) <= 0.0:
            break
        lo -= np.pi
    for _ in range(8):
        if g(hi) >= 0.0:
            break
        hi += np.pi
    glo, ghi = g(lo), g(hi)
    if glo > 0.0 or ghi < 0.0:
        raise ThetaStarError("could not bracket the straight-field-line angle")

    t = float(np.clip(target, lo, hi))
    for _ in range(max_iter):
        gt = g(t)
        if abs(gt) <= tol:
            return t
        if gt > 0.0:
            hi = t
        else:
            lo = t
        slope = 1.0 + dlam(t)
        if slope > 0.0:
            t_new = t - gt / slope
        else:
            t_new = 0.5 * (lo + hi)
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        t = t_new
    raise ThetaStarError(f"no convergence towards theta* = {target}")


def theta_star_contours(
    solution: Solution,
    targets: Optional[Sequence[float]] = None,
    zeta: float = 0.0,
    rho_samples: Optional[Sequence[float]] = None,
) -> list:
    """(theta*, rho, R, Z) rows along fixed straight-field-line angles.

    Arcs run from near the axis to the boundary; by default eight equally
    spaced theta* targets.  A surface on which theta + lambda is not
    monotone (|d lambda / d theta| >= 1 somewhere) is reported as an error.
    """
    if targets is None:
        targets = 2.0 * np.pi * np.arange(8) / 8.0
    if rho_samples is None:
        rho_samples = np.linspace(1.0 / 32.0, 1.0, 32)
    rows = []
    for rho in np.asarray(rho_samples, dtype=float):
        rho_eval = min(float(rho), 1.0 - 1e-12)
        prof = nf.mode_profiles(solution.params, solution.input, rho_eval)
        lam_set = prof.lam.mode_set
        mm = lam_set.m.astype(float)
        nn = (lam_set.n * lam_set.n_fp).astype(float)
        coeff = prof.lam.values

        def lam(t, coeff=coeff, mm=mm, nn=nn):
            return float(np.sum(coeff * np.sin(mm * t - nn * zeta)))

        def dlam(t, coeff=coeff, mm=mm, nn=nn):
            return float(np.sum(coeff * mm * np.cos(mm * t - nn * zeta)))

        probe = 2.0 * np.pi * np.arange(720) / 720.0
        slopes = 1.0 + np.array([dlam(t) for t in probe])
        if slopes.min() <= 0.0:
            raise ThetaStarError(
                f"theta + lambda is non-monotone on surface rho={rho:.4f}: "
                "|d lambda/d theta| >= 1"
            )
        for target in targets:
            theta = invert_theta_star(lam, dlam, float(target))
            if abs(theta + lam(theta) - float(target)) > 1e-10:
                raise ThetaStarError("contour solve lost precision")
            r, z = _surface_rz(
                solution.params, solution.input, rho_eval, np.array([theta]), zeta
            )
            rows.append((float(target), float(rho), float(r[0]), float(z[0])))
    rows.sort(key=lambda row: (row[0], row[1]))
    return rows


# -- metric export ------------------------------------------------------------------


def _write_table(path, header: str, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) if isinstance(x, float) else str(x) for x in row) + "\n")


def export_metrics(solution: Solution, out_dir) -> dict:
    """Write plot-ready tables and the run summary; returns the file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}

    # per-surface residuals and spectral width
    msp = []
    for rho in solution.rho:
        prof = nf.mode_profiles(solution.params, solution.input, float(rho))
        msp.append(spectral.spectral_width(prof.r, prof.z))
    files["fnorm_profile"] = out / "fnorm_profile.csv"
    _write_table(
        files["fnorm_profile"],
        "rho,f_norm_avg,spectral_width",
        [
            (float(r), float(f), float(w))
            for r, f, w in zip(solution.rho, solution.f_norm_profile, msp)
        ],
    )

    files["loss_history"] = out / "loss_history.csv"
    _write_table(
        files["loss_history"],
        "iteration,stage,loss",
        [(rec.iteration, rec.stage, float(rec.loss)) for rec in solution.history],
    )

    poincare = poincare_section(solution)
    files["poincare"] = out / "poincare.csv"
    _write_table(
        files["poincare"],
        "surface_index,rho,theta,R,Z",
        [
            (int(i), float(r), float(t), float(rr), float(zz))
            for i, r, t, rr, zz in poincare.rows()
        ],
    )

    contours = theta_star_contours(solution)
    files["theta_star"] = out / "theta_star.csv"
    _write_table(
        files["theta_star"],
        "theta_star,rho,R,Z",
        [(float(a), float(b), float(c), float(d)) for a, b, c, d in contours],
    )

    summary = {
        "f_vol_norm": float(solution.f_vol_norm),
        "termination_reason": solution.termination_reason,
        "n_parameters": solution.params.n_parameters,
        "final_loss": float(solution.history[-1].loss) if solution.history else None,
        "iterations": len(solution.history),
        "wall_time_s": float(solution.history[-1].wall_time) if solution.history else 0.0,
        "width": solution.params.width,
        "M": solution.input.M,
        "N": solution.input.N,
        "n_fp": solution.input.n_fp,
        "surfaces": int(solution.rho.size),
        "seed": solution.config.seed,
        "spectral_width": [float(w) for w in msp],
    }
    files["summary"] = out / "summary.json"
    files["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return files


# -- command line ---------------------------------------------------------------------


class _CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _CliUsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="equinn", description="Fixed-boundary ideal-MHD equilibrium solver")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve a case and export diagnostics")
    p_solve.add_argument("case", help="case file path or built-in name (e.g. dshape)")
    p_solve.add_argument("--out", default=None, help="output directory")
    p_solve.add_argument("--seed", type=int, default=None)
    p_solve.add_argument("--width", type=int, default=None)
    p_solve.add_argument("--surfaces", type=int, default=None)
    p_solve.add_argument("--target-fvol", type=float, default=None)

    p_eval = sub.add_parser("eval", help="recompute residual metrics from a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--case", default=None, help="case file (default: case.txt beside the checkpoint)")
    p_eval.add_argument("--grid", default=None, help="evaluation grid 'NRHO[,NTHETA[,NZETA]]'")
    p_eval.add_argument("--out", default=None)

    p_poinc = sub.add_parser("poincare", help="export flux-surface sections from a checkpoint")
    p_poinc.add_argument("checkpoint")
    p_poinc.add_argument("--case", default=None)
    p_poinc.add_argument("--zeta", type=float, default=0.0)
    p_poinc.add_argument("--out", default=None)

    p_grad = sub.add_parser("gradcheck", help="verify the loss gradient against finite differences")
    p_grad.add_argument("case")
    p_grad.add_argument("--width", type=int, default=2)
    p_grad.add_argument("--surfaces", type=int, default=8)
    p_grad.add_argument("--modes", type=int, default=5, help="cap on the poloidal mode count")
    p_grad.add_argument("--samples", type=int, default=64)
    p_grad.add_argument("--step", type=float, default=1e-4)
    p_grad.add_argument("--seed", type=int, default=0)
    return parser


def _out_dir(flag: Optional[str], fallback: str) -> Path:
    if flag:
        return Path(flag)
    env = os.environ.get(OUTDIR_ENV)
    if env:
        return Path(env) / fallback
    return Path(fallback)


def _load_for_checkpoint(checkpoint: str, case_flag: Optional[str]):
    params, digest, iteration = load_checkpoint(checkpoint)
    case_path = case_flag or str(Path(checkpoint).parent / "case.txt")
    input, config = parse_case(case_path)
    if case_digest(input, config) != digest:
        raise CaseFileError(
            f"case '{case_path}' does not match the checkpoint digest; "
            "pass the run's own case file with --case"
        )
    return params, input, config, iteration


def _cmd_solve(args) -> int:
    input, config = parse_case(args.case)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.width is not None:
        config = replace(config, width=args.width)
    if args.surfaces is not None:
        config = replace(config, n_rho=args.surfaces)
    if args.target_fvol is not None:
        config = replace(config, target_fvol=args.target_fvol)

    stem = Path(args.case).stem if args.case not in BUILTIN_CASES else args.case
    out = _out_dir(args.out, f"{stem}_out")
    out.mkdir(parents=True, exist_ok=True)
    write_case(input, config, out / "case.txt")
    digest = case_digest(input, config)
    template_holder = {}

    def on_checkpoint(iteration, vec):
        params = template_holder.get("params")
        if params is None:
            return
        snap = nf.vector_to_params(np.asarray(vec, dtype=float), params)
        save_checkpoint(out / f"checkpoint_{iteration:06d}.bin", snap, digest, iteration)

    # template becomes available after init inside solve; first build it here
    modes = spectral.mode_set_pair(input.M, input.N, input.n_fp)
    template_holder["params"] = nf.init_params(modes, config.width, config.seed, input)

    solution = sv.solve(input, config, on_checkpoint=on_checkpoint)
    save_checkpoint(
        out / "checkpoint.bin", solution.params, digest, len(solution.history)
    )
    export_metrics(solution, out)
    print(f"termination: {solution.termination_reason}")
    print(f"F_vol_norm: {solution.f_vol_norm:.6e}")
    print(f"outputs in {out}")
    if solution.termination_reason == "diverged":
        return 2
    return 0


def _parse_grid_flag(flag: Optional[str], config: SolverConfig) -> tuple[int, int, int]:
    if not flag:
        return config.n_rho, config.n_theta, config.n_zeta
    parts = flag.split(",")
    if len(parts) > 3:
        raise CaseFileError(f"bad --grid value {flag!r}; use 'NRHO[,NTHETA[,NZETA]]'")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise CaseFileError(f"bad --grid value {flag!r}") from None
    nums += [0] * (3 - len(nums))
    return nums[0], nums[1], nums[2]


def _cmd_eval(args) -> int:
    params, input, config, iteration = _load_for_checkpoint(args.checkpoint, args.case)
    n_rho, n_theta, n_zeta = _parse_grid_flag(args.grid, config)
    grid = CollocationGrid.build(n_rho, input.M, input.N, input.n_fp, n_theta, n_zeta)
    assembler = LossAssembler(input, params.width, grid)
    metrics = assembler.metrics(nf.params_to_vector(params))

    out = _out_dir(args.out, str(Path(args.checkpoint).parent))
    out.mkdir(parents=True, exist_ok=True)
    msp = []
    for rho in grid.rho:
        prof = nf.mode_profiles(params, input, float(rho))
        msp.append(spectral.spectral_width(prof.r, prof.z))
    _write_table(
        out / "fnorm_profile.csv",
        "rho,f_norm_avg,spectral_width",
        [
            (float(r), float(f), float(w))
            for r, f, w in zip(grid.rho, metrics["f_norm_profile"], msp)
        ],
    )
    summary = {
        "f_vol_norm": metrics["f_vol_norm"],
        "loss": metrics["loss"],
        "checkpoint_iteration": iteration,
        "grid": [grid.n_rho, grid.theta.size, grid.zeta.size],
    }
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"F_vol_norm: {metrics['f_vol_norm']:.6e}")
    return 0


def _cmd_poincare(args) -> int:
    params, input, config, _ = _load_for_checkpoint(args.checkpoint, args.case)
    solution = Solution(
        params=params,
        input=input,
        config=config,
        history=[],
        f_vol_norm=float("nan"),
        f_norm_profile=np.array([]),
        rho=np.array([]),
        termination_reason="loaded",
    )
    out = _out_dir(args.out, str(Path(args.checkpoint).parent))
    out.mkdir(parents=True, exist_ok=True)
    export = poincare_section(solution, zeta=args.zeta)
    _write_table(
        out / "poincare.csv",
        "surface_index,rho,theta,R,Z",
        [
            (int(i), float(r), float(t), float(rr), float(zz))
            for i, r, t, rr, zz in export.rows()
        ],
    )
    contours = theta_star_contours(solution, zeta=args.zeta)
    _write_table(
        out / "theta_star.csv",
        "theta_star,rho,R,Z",
        [(float(a), float(b), float(c), float(d)) for a, b, c, d in contours],
    )
    print(f"sections written to {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    input, config = parse_case(args.case)
    M = min(input.M, args.modes)
    if M < input.boundary_M:
        M = input.boundary_M
    input = EquilibriumInput(
        boundary_r=input.boundary_r,
        boundary_z=input.boundary_z,
        pressure=input.pressure,
        iota=input.iota,
        psi_b=input.psi_b,
        n_fp=input.n_fp,
        M=M,
        N=input.N,
        axis_r=input.axis_r,
        axis_z=input.axis_z,
    )
    grid = CollocationGrid.build(args.surfaces, input.M, input.N, input.n_fp)
    assembler = LossAssembler(input, args.width, grid)
    params = nf.init_params(
        (assembler.modes_cos, assembler.modes_sin), args.width, args.seed, input
    )
    vec = nf.params_to_vector(params)
    err = grad_check(
        assembler._loss_expr,
        vec,
        step=args.step,
        samples=args.samples,
        seed=args.seed,
        fd_loss=assembler.loss_value_precise,
    )
    print(f"max relative gradient error over {min(args.samples, vec.size)} entries: {err:.3e}")
    if err > 1e-6:
        print("FAIL: analytic gradient disagrees with finite differences", file=sys.stderr)
        return 2
    return 0


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line; returns the exit status (0 ok, 1 usage, 2 numeric)."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _CliUsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        if args.command == "solve":
            return _cmd_solve(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "poincare":
            return _cmd_poincare(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        raise _CliUsageError(f"unknown command {args.command!r}")
    except (CaseFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (JacobianSignError, NonFiniteLossError, ThetaStarError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
