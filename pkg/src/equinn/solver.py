"""Loss assembly and the two-stage minimization of the force residual.

The loss is the plain mean over all collocation nodes of the per-node force
magnitude from the field kernel; nodes are not volume-weighted.  Training
runs an adaptive-moment first-order stage (decoupled weight decay,
bias-corrected moments) followed by a full-memory quasi-Newton stage with a
strong-Wolfe line search.  Both stages are deterministic given the seed, and
all reductions are thread-count independent, so reruns reproduce checkpoints
bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import mhdkernel as mk
from . import netfield as nf
from . import spectral
from .autodiff import NonFiniteLossError
from .mhdkernel import CollocationGrid, JacobianSignError
from .netfield import EquilibriumInput, NetParams

__all__ = [
    "AdamWConfig",
    "BFGSConfig",
    "SolverConfig",
    "LossRecord",
    "Solution",
    "LossAssembler",
    "loss",
    "adamw_stage",
    "bfgs_stage",
    "solve",
]


@dataclass(frozen=True)
class AdamWConfig:
    step: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_iter: int = 5000


@dataclass(frozen=True)
class BFGSConfig:
    max_iter: int = 2000
    c1: float = 1e-4
    c2: float = 0.9
    param_tol: float = 1e-12
    grad_tol: float = 1e-14
    max_line_search: int = 30


@dataclass(frozen=True)
class SolverConfig:
    width: int = 8
    n_rho: int = 50
    n_theta: int = 0  # 0 -> 4 M
    n_zeta: int = 0  # 0 -> max(1, 4 N)
    seed: int = 0
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    bfgs: BFGSConfig = field(default_factory=BFGSConfig)
    target_fvol: Optional[float] = None
    target_rel_tol: float = 5e-3
    target_check_every: int = 25
    checkpoint_every: int = 1000

    def validated(self) -> "SolverConfig":
        if self.width < 1:
            raise ValueError("width must be at least 1")
        if self.n_rho < 1:
            raise ValueError("need at least one flux surface")
        if self.adamw.max_iter < 0 or self.bfgs.max_iter < 0:
            raise ValueError("iteration limits must be non-negative")
        for name, val in (
            ("adamw.step", self.adamw.step),
            ("bfgs.param_tol", self.bfgs.param_tol),
            ("bfgs.grad_tol", self.bfgs.grad_tol),
            ("target_rel_tol", self.target_rel_tol),
        ):
            if val <= 0:
                raise ValueError(f"{name} must be positive")
        return self


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    stage: str
    loss: float
    wall_time: float


@dataclass
class Solution:
    params: NetParams
    input: EquilibriumInput
    config: SolverConfig
    history: list
    f_vol_norm: float
    f_norm_profile: np.ndarray
    rho: np.ndarray
    termination_reason: str

    @property
    def n_parameters(self) -> int:
        return self.params.n_parameters


class Diverged(RuntimeError):
    """Wraps a non-finite / overlapping-surface event during a stage."""

    def __init__(self, message, iteration, last_vector):
        super().__init__(message)
        self.iteration = iteration
        self.last_vector = last_vector


class LossAssembler:
    """Caches grid constants and evaluates loss, gradient and diagnostics."""

    def __init__(self, input: EquilibriumInput, width: int, grid: CollocationGrid):
        self.input = input
        self.grid = grid
        self.modes_cos, self.modes_sin = spectral.mode_set_pair(
            input.M, input.N, input.n_fp
        )
        self.width = width
        self.cos_tables = spectral.trig_tables(self.modes_cos, grid.theta, grid.zeta)
        self.sin_tables = spectral.trig_tables(self.modes_sin, grid.theta, grid.zeta)
        self.constants = nf.ProfileConstants.build(
            input, self.modes_cos, self.modes_sin, grid.rho
        )
        s = grid.rho**2
        self.p_prime = input.pressure_prime(s)
        self.template = nf.init_params(
            (self.modes_cos, self.modes_sin), width, 0, input
        )

    # -- evaluation ------------------------------------------------------

    def field_state(self, params: NetParams) -> mk.FieldState:
        stack = nf.profile_stack(params, self.input, self.grid.rho, self.constants)
        state = mk.geometry(stack, self.grid, self.cos_tables, self.sin_tables)
        mk.magnetic_field(state, self.input.iota, self.input.psi_b)
        mk.current(state)
        mk.force(state, self.p_prime)
        return state

    def _loss_expr(self, vec):
        params = nf.vector_to_params(vec, self.template)
        state = self.field_state(params)
        return ad.mean_all(state.F_mag)

    def loss_value(self, vec: np.ndarray) -> float:
        out = self._loss_expr(np.asarray(vec))
        val = float(out)
        if not np.isfinite(val):
            raise NonFiniteLossError(f"loss evaluated to {val}")
        return val

    def loss_value_precise(self, vec):
        """Loss in extended precision, for finite-difference gradient oracles.

        The trigonometric tables stay in float64 (identical constants on both
        sides of a difference quotient); the arithmetic promotes to long
        double, pushing evaluation noise well below the float64 rounding
        floor that otherwise limits central differences.
        """
        out = self._loss_expr(np.asarray(vec, dtype=np.longdouble))
        if not np.isfinite(float(out)):
            raise NonFiniteLossError("loss evaluated to a non-finite value")
        return out

    def value_and_grad(self, vec: np.ndarray):
        return ad.loss_gradient(self._loss_expr, vec)

    def metrics(self, vec: np.ndarray) -> dict:
        """Normalized residual diagnostics on the training grid."""
        params = nf.vector_to_params(np.asarray(vec, dtype=float), self.template)
        state = self.field_state(params)
        grad_b2 = mk.grad_B2_magnitude(state)
        normalizer = mk.volume_average(grad_b2, state, self.grid)
        fnorm, fvol = mk.f_norm(state, self.grid, normalizer)
        profile = mk.surface_average_profile(fnorm, state, self.grid)
        return {
            "f_vol_norm": fvol,
            "f_norm_profile": profile,
            "normalizer": normalizer,
            "loss": float(ad.mean_all(state.F_mag)),
        }

    def f_vol_norm(self, vec: np.ndarray) -> float:
        return self.metrics(vec)["f_vol_norm"]


def loss(params: NetParams, input: EquilibriumInput, grid: CollocationGrid) -> float:
    """Mean per-node force magnitude; the training objective."""
    assembler = LossAssembler(input, params.width, grid)
    return assembler.loss_value(nf.params_to_vector(params))


# -- stage 1: adaptive moments -------------------------------------------------


def adamw_stage(
    x0: np.ndarray,
    value_and_grad: Callable,
    config: AdamWConfig,
    on_iteration: Optional[Callable] = None,
    stop_check: Optional[Callable] = None,
):
    """Decoupled-weight-decay adaptive-moment descent.

    Returns ``(x, records, status)`` with status 'max-iter' or
    'target-reached'.  A non-finite loss or an overlapping-surface event
    raises :class:`Diverged` carrying the last finite iterate.
    """
    x = np.asarray(x0, dtype=float).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    records = []
    status = "max-iter"
    for it in range(1, config.max_iter + 1):
        try:
            val, g = value_and_grad(x)
        except (NonFiniteLossError, JacobianSignError) as exc:
            raise Diverged(f"stage 1 diverged at iteration {it}: {exc}", it, x) from exc
        records.append((it, val))
        if on_iteration is not None:
            on_iteration(it, x, val)
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * (g * g)
        m_hat = m / (1.0 - config.beta1**it)
        v_hat = v / (1.0 - config.beta2**it)
        x = x - config.step * (
            m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * x
        )
        if stop_check is not None and stop_check(it, x):
            status = "target-reached"
            break
    return x, records, status


# -- stage 2: quasi-Newton -------------------------------------------------------


def _strong_wolfe(evaluate, f0, g0_dot_p, c1, c2, max_iter):
    """Strong-Wolfe step search (bracket and zoom, bisection fallback).

    ``evaluate(alpha)`` returns (f, dphi, payload); non-finite trials are
    treated as too-far and bracketed down.  If the curvature condition is
    unattainable within the budget, the best sufficient-decrease point is
    accepted (the quasi-Newton update guards on y.s anyway).  Returns
    (alpha, payload) or (None, None) on failure.
    """
    lo = (0.0, f0, g0_dot_p, None)
    alpha = 1.0
    for i in range(max_iter):
        f, dphi, payload = evaluate(alpha)
        trial = (alpha, f, dphi, payload)
        if not np.isfinite(f):
            return _zoom(evaluate, f0, g0_dot_p, c1, c2, lo, trial, max_iter)
        if f > f0 + c1 * alpha * g0_dot_p or (i > 0 and f >= lo[1]):
            return _zoom(evaluate, f0, g0_dot_p, c1, c2, lo, trial, max_iter)
        if abs(dphi) <= -c2 * g0_dot_p:
            return _polish(evaluate, f0, g0_dot_p, c1, alpha, f, dphi, payload)
        if dphi >= 0.0:
            return _zoom(evaluate, f0, g0_dot_p, c1, c2, trial, lo, max_iter)
        lo = trial
        alpha = 2.0 * alpha
    if lo[0] > 0.0:
        return lo[0], lo[3]
    return None, None


def _polish(evaluate, f0, g0_dot_p, c1, alpha, f, dphi, payload):
    """One secant step towards the slope root when the slope is still steep.

    The slope is linear along the ray for a quadratic objective, so this
    makes the search exact there (finite termination of the quasi-Newton
    iteration) at the cost of at most one extra evaluation.
    """
    if dphi == 0.0 or abs(dphi) <= 1e-2 * abs(g0_dot_p):
        return alpha, payload
    denom = g0_dot_p - dphi
    if denom == 0.0:
        return alpha, payload
    a2 = alpha * g0_dot_p / denom
    if not np.isfinite(a2) or a2 <= 0.0:
        return alpha, payload
    f2, _, payload2 = evaluate(a2)
    if np.isfinite(f2) and f2 <= f and f2 <= f0 + c1 * a2 * g0_dot_p:
        return a2, payload2
    return alpha, payload


def _zoom(evaluate, f0, g0_dot_p, c1, c2, lo, hi, max_iter):
    """Shrink [lo, hi] until the strong conditions hold at an interior point.

    lo always satisfies sufficient decrease (or is the origin); hi may carry
    a non-finite value from an overlapping-surface trial, in which case the
    interval is bisected rather than interpolated.
    """
    a_lo, f_lo, d_lo, p_lo = lo
    a_hi, f_hi, _, _ = hi
    for _ in range(max_iter):
        if np.isfinite(f_hi) and np.isfinite(d_lo) and d_lo != 0.0:
            # quadratic through (lo value, lo slope, hi value)
            denom = 2.0 * (f_hi - f_lo - d_lo * (a_hi - a_lo))
            a = a_lo - d_lo * (a_hi - a_lo) ** 2 / denom if denom != 0.0 else 0.5 * (a_lo + a_hi)
        else:
            a = 0.5 * (a_lo + a_hi)
        span = abs(a_hi - a_lo)
        low, high = min(a_lo, a_hi), max(a_lo, a_hi)
        if not np.isfinite(a) or a <= low + 0.1 * span or a >= high - 0.1 * span:
            a = 0.5 * (a_lo + a_hi)
        f, dphi, payload = evaluate(a)
        if not np.isfinite(f) or f > f0 + c1 * a * g0_dot_p or f >= f_lo:
            a_hi, f_hi = a, f
        else:
            if abs(dphi) <= -c2 * g0_dot_p:
                return a, payload
            if dphi * (a_hi - a_lo) >= 0.0:
                a_hi, f_hi = a_lo, f_lo
            a_lo, f_lo, d_lo, p_lo = a, f, dphi, payload
        if abs(a_hi - a_lo) < 1e-16:
            break
    if a_lo > 0.0 and p_lo is not None:
        # sufficient decrease holds at lo even though curvature never did
        return a_lo, p_lo
    return None, None


def bfgs_stage(
    x0: np.ndarray,
    value_and_grad: Callable,
    config: BFGSConfig,
    on_iteration: Optional[Callable] = None,
    stop_check: Optional[Callable] = None,
):
    """Full-memory quasi-Newton minimization with strong-Wolfe steps.

    Curvature pairs with non-positive y.s are skipped; a failed line search
    falls back to one steepest-descent retry before terminating.  Returns
    ``(x, records, status)`` with status in {'param-stall', 'grad-tol',
    'target-reached', 'max-iter'}.
    """

    def eval_point(x):
        try:
            return value_and_grad(x)
        except (NonFiniteLossError, JacobianSignError):
            return np.inf, None

    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    try:
        f, g = value_and_grad(x)
    except (NonFiniteLossError, JacobianSignError) as exc:
        raise Diverged(f"stage 2 start point is invalid: {exc}", 0, x) from exc
    ident = np.eye(n)
    h = ident.copy()
    records = []
    status = "max-iter"
    tried_steepest = False
    first_update = True

    def matvec(mat, vec):
        return np.einsum("ij,j->i", mat, vec, optimize=False)

    for it in range(1, config.max_iter + 1):
        if np.max(np.abs(g)) <= config.grad_tol:
            status = "grad-tol"
            break
        p = -matvec(h, g)
        if np.dot(g, p) >= 0.0:
            # stale curvature turned the direction uphill; restart from I
            h = ident.copy()
            p = -g.copy()

        cache = {}

        def evaluate(alpha, x=x, p=p):
            xt = x + alpha * p
            ft, gt = eval_point(xt)
            if gt is None:
                return np.inf, np.inf, None
            cache[alpha] = (xt, ft, gt)
            return ft, float(np.dot(gt, p)), alpha

        alpha, key = _strong_wolfe(
            evaluate, f, float(np.dot(g, p)), config.c1, config.c2,
            config.max_line_search,
        )
        if alpha is None:
            if tried_steepest:
                status = "param-stall"
                break
            tried_steepest = True
            h = ident.copy()
            cache.clear()

            def evaluate_sd(alpha, x=x, g=g):
                xt = x - alpha * g
                ft, gt = eval_point(xt)
                if gt is None:
                    return np.inf, np.inf, None
                cache[alpha] = (xt, ft, gt)
                return ft, float(np.dot(gt, -g)), alpha

            alpha, key = _strong_wolfe(
                evaluate_sd, f, float(-np.dot(g, g)), config.c1, config.c2,
                config.max_line_search,
            )
            if alpha is None:
                status = "param-stall"
                break
        else:
            tried_steepest = False

        x_new, f_new, g_new = cache[key]
        s = x_new - x
        y = g_new - g
        x, f, g = x_new, f_new, g_new
        records.append((it, f))
        if on_iteration is not None:
            on_iteration(it, x, f)

        if np.max(np.abs(s)) < config.param_tol:
            status = "param-stall"
            break
        if stop_check is not None and stop_check(it, x):
            status = "target-reached"
            break

        ys = float(np.dot(y, s))
        if ys > 0.0:
            if first_update:
                h = ident * (ys / float(np.dot(y, y)))
                first_update = False
            hy = matvec(h, y)
            yhy = float(np.dot(y, hy))
            rho = 1.0 / ys
            h = (
                h
                - rho * (np.outer(s, hy) + np.outer(hy, s))
                + rho * (1.0 + yhy * rho) * np.outer(s, s)
            )
    return x, records, status


# -- full solve ---------------------------------------------------------------


def solve(
    input: EquilibriumInput,
    config: SolverConfig,
    on_checkpoint: Optional[Callable] = None,
) -> Solution:
    """Initialize, run both stages and attach residual diagnostics.

    ``on_checkpoint(iteration, vector)`` is invoked at the configured cadence
    and once at the end; checkpoint serialization lives with the CLI layer.
    """
    config = config.validated()
    input.validate()
    grid = CollocationGrid.build(
        config.n_rho, input.M, input.N, input.n_fp, config.n_theta, config.n_zeta
    )
    assembler = LossAssembler(input, config.width, grid)
    params0 = nf.init_params(
        (assembler.modes_cos, assembler.modes_sin), config.width, config.seed, input
    )
    x = nf.params_to_vector(params0)

    history: list[LossRecord] = []
    t0 = time.perf_counter()
    offset = 0

    def recorder(stage):
        def record(it, vec, val):
            history.append(
                LossRecord(offset + it, stage, float(val), time.perf_counter() - t0)
            )
            if (
                on_checkpoint is not None
                and config.checkpoint_every > 0
                and (offset + it) % config.checkpoint_every == 0
            ):
                on_checkpoint(offset + it, vec)

        return record

    reason = None
    try:
        history.append(
            LossRecord(0, "init", assembler.loss_value(x), time.perf_counter() - t0)
        )
    except (NonFiniteLossError, JacobianSignError):
        return _finalize(assembler, input, config, x, history, "diverged", on_checkpoint)

    stop_check = None
    if config.target_fvol is not None:
        bound = config.target_fvol * (1.0 + config.target_rel_tol)

        def stop_check(it, vec):
            if it % config.target_check_every != 0:
                return False
            return assembler.f_vol_norm(vec) <= bound

        if assembler.f_vol_norm(x) <= bound:
            return _finalize(
                assembler, input, config, x, history, "target-reached", on_checkpoint
            )

    try:
        x, _, status = adamw_stage(
            x,
            assembler.value_and_grad,
            config.adamw,
            on_iteration=recorder("adamw"),
            stop_check=stop_check,
        )
        offset += config.adamw.max_iter
        if status == "target-reached":
            reason = status
        else:
            x, _, reason = bfgs_stage(
                x,
                assembler.value_and_grad,
                config.bfgs,
                on_iteration=recorder("bfgs"),
                stop_check=stop_check,
            )
    except Diverged as exc:
        x = exc.last_vector
        reason = "diverged"

    return _finalize(assembler, input, config, x, history, reason, on_checkpoint)


def _finalize(assembler, input, config, x, history, reason, on_checkpoint):
    if on_checkpoint is not None:
        on_checkpoint(len(history), x)
    try:
        metrics = assembler.metrics(x)
        fvol = metrics["f_vol_norm"]
        profile = metrics["f_norm_profile"]
    except (JacobianSignError, NonFiniteLossError):
        fvol = float("nan")
        profile = np.full(assembler.grid.n_rho, np.nan)
    params = nf.vector_to_params(np.asarray(x, dtype=float), assembler.template)
    return Solution(
        params=params,
        input=input,
        config=config,
        history=history,
        f_vol_norm=fvol,
        f_norm_profile=np.asarray(profile),
        rho=assembler.grid.rho.copy(),
        termination_reason=reason,
    )
