"""Robust nonlinear least squares: Levenberg-Marquardt over manifold blocks.

Parameter blocks are flat vectors tagged with a manifold ("euclidean",
"scalar", or "se3"); se3 blocks hold [qw, qx, qy, qz, tx, ty, tz] and are
updated through 6-dim tangent retractions, never raw addition. Robust losses
enter through IRLS-style reweighting of each residual block; step acceptance
is judged on the true robustified cost, so accepted steps never increase it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import oplus, pose_from_vec7, pose_to_vec7

__all__ = [
    "RobustLoss",
    "LeastSquaresProblem",
    "SolverOptions",
    "SolveReport",
    "NonFiniteResidualError",
    "robust_loss_eval",
    "robust_loss_weight",
    "numerical_jacobian",
    "solve",
]

MANIFOLDS = ("euclidean", "scalar", "se3")

LAMBDA_MIN = 1e-12
LAMBDA_MAX = 1e6


class NonFiniteResidualError(RuntimeError):
    """A residual evaluated to NaN or infinity."""


@dataclass(frozen=True)
class RobustLoss:
    """Loss applied to each residual block's squared norm."""

    kind: str = "none"  # "none" | "huber" | "cauchy"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "huber", "cauchy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.scale <= 0.0:
            raise ValueError(f"loss scale must be positive, got {self.scale}")

    @classmethod
    def none(cls) -> "RobustLoss":
        return cls("none")

    @classmethod
    def huber(cls, delta: float) -> "RobustLoss":
        return cls("huber", delta)

    @classmethod
    def cauchy(cls, c: float) -> "RobustLoss":
        return cls("cauchy", c)


def robust_loss_eval(loss: RobustLoss, squared_norm: float) -> float:
    """rho(s) for s = ||r||^2; monotone non-decreasing in s."""
    s = float(squared_norm)
    if s < 0.0:
        raise ValueError(f"squared norm must be >= 0, got {s}")
    if loss.kind == "none":
        return s
    if loss.kind == "huber":
        d2 = loss.scale * loss.scale
        if s <= d2:
            return s
        return 2.0 * loss.scale * math.sqrt(s) - d2
    c2 = loss.scale * loss.scale
    return c2 * math.log1p(s / c2)


def robust_loss_weight(loss: RobustLoss, squared_norm: float) -> float:
    """d rho / d s, the IRLS weight for a residual block."""
    s = float(squared_norm)
    if loss.kind == "none":
        return 1.0
    if loss.kind == "huber":
        d2 = loss.scale * loss.scale
        if s <= d2:
            return 1.0
        return loss.scale / math.sqrt(s)
    c2 = loss.scale * loss.scale
    return 1.0 / (1.0 + s / c2)


def _tangent_dim(manifold: str, ambient: int) -> int:
    if manifold == "se3":
        return 6
    if manifold == "scalar":
        return 1
    return ambient


def _retract(manifold: str, values: np.ndarray, delta: np.ndarray) -> np.ndarray:
    if manifold == "se3":
        return pose_to_vec7(oplus(pose_from_vec7(values), delta))
    return values + delta


@dataclass
class _ParameterBlock:
    name: str
    values: np.ndarray
    manifold: str

    @property
    def tangent_dim(self) -> int:
        return _tangent_dim(self.manifold, self.values.size)


@dataclass
class _ResidualBlock:
    fn: Callable[..., np.ndarray]
    params: tuple[str, ...]
    loss: RobustLoss


class LeastSquaresProblem:
    """Named parameter blocks plus residual blocks referencing them."""

    def __init__(self):
        self._blocks: dict[str, _ParameterBlock] = {}
        self._residuals: list[_ResidualBlock] = []

    def add_parameter_block(self, name: str, values: Sequence[float], manifold: str = "euclidean") -> None:
        if name in self._blocks:
            raise ValueError(f"parameter block {name!r} already exists")
        if manifold not in MANIFOLDS:
            raise ValueError(f"unknown manifold {manifold!r}")
        v = np.array(values, dtype=float).reshape(-1)
        if manifold == "se3" and v.size != 7:
            raise ValueError("se3 blocks are 7-vectors [qw qx qy qz tx ty tz]")
        if manifold == "scalar" and v.size != 1:
            raise ValueError("scalar blocks are 1-vectors")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"parameter block {name!r} has non-finite values")
        self._blocks[name] = _ParameterBlock(name, v, manifold)

    def add_residual_block(
        self, fn: Callable[..., np.ndarray], params: Sequence[str], loss: RobustLoss | None = None
    ) -> None:
        params = tuple(params)
        if len(set(params)) != len(params):
            raise ValueError("residual block references a parameter block twice")
        for p in params:
            if p not in self._blocks:
                raise ValueError(f"residual block references unknown parameter block {p!r}")
        self._residuals.append(_ResidualBlock(fn, params, loss or RobustLoss.none()))

    def value(self, name: str) -> np.ndarray:
        return self._blocks[name].values.copy()

    def set_value(self, name: str, values: Sequence[float]) -> None:
        block = self._blocks[name]
        v = np.array(values, dtype=float).reshape(block.values.shape)
        block.values = v

    @property
    def num_residual_blocks(self) -> int:
        return len(self._residuals)


@dataclass
class SolverOptions:
    max_iters: int = 100
    gradient_tol: float = 1e-10
    cost_rel_tol: float = 1e-12
    param_tol: float = 1e-12
    initial_lambda: float = 1e-4
    jacobian_step: float = 1e-6


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    initial_cost: float
    final_cost: float
    termination_reason: str
    cost_history: list[float] = field(default_factory=list)


def _all_finite(r: np.ndarray) -> bool:
    # NaN and inf both propagate through the sum
    return math.isfinite(float(r.sum()))


def _eval_residual(rb: _ResidualBlock, values: list[np.ndarray]) -> np.ndarray:
    r = np.asarray(rb.fn(*values), dtype=float).reshape(-1)
    if not _all_finite(r):
        raise NonFiniteResidualError("residual evaluated to a non-finite value")
    return r


def numerical_jacobian(
    residual_fn: Callable[..., np.ndarray],
    params: Sequence[Sequence[float]],
    manifolds: Sequence[str] | None = None,
    step: float = 1e-6,
) -> np.ndarray:
    """Central-difference Jacobian of residual_fn w.r.t. the tangent of each block.

    Columns are ordered block by block; se3 blocks contribute 6 columns
    (translation then rotation), matching the retraction used by solve().
    """
    values = [np.array(p, dtype=float).reshape(-1) for p in params]
    if manifolds is None:
        manifolds = ["euclidean"] * len(values)
    jacs = _block_jacobians(residual_fn, values, list(manifolds), step)
    return np.hstack(jacs)


def _block_jacobians(
    fn: Callable[..., np.ndarray],
    values: list[np.ndarray],
    manifolds: list[str],
    step: float,
    residual_size: int | None = None,
) -> list[np.ndarray]:
    if residual_size is None:
        r0 = np.asarray(fn(*values), dtype=float).reshape(-1)
        if not _all_finite(r0):
            raise NonFiniteResidualError("residual evaluated to a non-finite value")
        residual_size = r0.size
    jacs = []
    args = list(values)
    inv_2h = 1.0 / (2.0 * step)
    for bi, (v, manifold) in enumerate(zip(values, manifolds)):
        dim = _tangent_dim(manifold, v.size)
        jac = np.empty((residual_size, dim))
        delta = np.zeros(dim)
        for k in range(dim):
            delta[k] = step
            args[bi] = _retract(manifold, v, delta)
            rp = np.asarray(fn(*args), dtype=float).reshape(-1)
            args[bi] = _retract(manifold, v, -delta)
            rm = np.asarray(fn(*args), dtype=float).reshape(-1)
            delta[k] = 0.0
            if not (_all_finite(rp) and _all_finite(rm)):
                raise NonFiniteResidualError("residual evaluated to a non-finite value")
            jac[:, k] = (rp - rm) * inv_2h
        args[bi] = v
        jacs.append(jac)
    return jacs


def solve(problem: LeastSquaresProblem, opts: SolverOptions | None = None) -> SolveReport:
    """Levenberg-Marquardt with adaptive damping; parameters updated in place.

    Damping multiplies the normal-equation diagonal: lambda grows x10 on a
    rejected step and shrinks /3 on acceptance, clamped to [1e-12, 1e6].
    """
    opts = opts or SolverOptions()
    blocks = list(problem._blocks.values())
    offsets: dict[str, int] = {}
    n = 0
    for b in blocks:
        offsets[b.name] = n
        n += b.tangent_dim
    if n == 0 or not problem._residuals:
        return SolveReport(True, 0, 0.0, 0.0, "empty_problem")

    def current_values(rb: _ResidualBlock) -> list[np.ndarray]:
        return [problem._blocks[p].values for p in rb.params]

    def total_cost(residuals: list[np.ndarray]) -> float:
        return sum(
            robust_loss_eval(rb.loss, float(r @ r)) for rb, r in zip(problem._residuals, residuals)
        )

    residuals = [_eval_residual(rb, current_values(rb)) for rb in problem._residuals]
    cost = total_cost(residuals)
    initial_cost = cost
    history = [cost]
    lam = opts.initial_lambda
    iterations = 0
    reason = "max_iterations"
    converged = False

    while iterations < opts.max_iters:
        # linearize at the current point
        H = np.zeros((n, n))
        g = np.zeros(n)
        for rb, r in zip(problem._residuals, residuals):
            values = current_values(rb)
            manifolds = [problem._blocks[p].manifold for p in rb.params]
            jacs = _block_jacobians(rb.fn, values, manifolds, opts.jacobian_step, r.size)
            w = robust_loss_weight(rb.loss, float(r @ r))
            idx = [offsets[p] for p in rb.params]
            dims = [j.shape[1] for j in jacs]
            for i, (oi, di, ji) in enumerate(zip(idx, dims, jacs)):
                g[oi : oi + di] += w * (ji.T @ r)
                for oj, dj, jj in zip(idx[i:], dims[i:], jacs[i:]):
                    hij = w * (ji.T @ jj)
                    H[oi : oi + di, oj : oj + dj] += hij
                    if oj != oi:
                        H[oj : oj + dj, oi : oi + di] += hij.T

        if float(np.max(np.abs(g))) < opts.gradient_tol:
            reason = "gradient_tolerance"
            converged = True
            break

        # floor the damping diagonal relative to the best-observed direction so
        # numerically unobservable directions cannot produce unbounded steps
        hdiag = np.diag(H)
        diag = np.maximum(hdiag, max(LAMBDA_MIN, 1e-8 * float(hdiag.max(initial=0.0))))
        stalled = False
        while iterations < opts.max_iters:
            iterations += 1
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                step, *_ = np.linalg.lstsq(H + lam * np.diag(diag), -g, rcond=None)

            saved = {b.name: b.values for b in blocks}
            for b in blocks:
                d = step[offsets[b.name] : offsets[b.name] + b.tangent_dim]
                b.values = _retract(b.manifold, b.values, d)
            try:
                new_residuals = [_eval_residual(rb, current_values(rb)) for rb in problem._residuals]
                new_cost = total_cost(new_residuals)
            except NonFiniteResidualError:
                new_cost = math.inf
                new_residuals = residuals
            if new_cost <= cost:
                decrease = cost - new_cost
                residuals = new_residuals
                cost = new_cost
                history.append(cost)
                lam = max(lam / 3.0, LAMBDA_MIN)
                if decrease <= opts.cost_rel_tol * max(cost, 1e-300):
                    reason = "cost_tolerance"
                    converged = True
                elif float(np.max(np.abs(step))) < opts.param_tol:
                    reason = "param_tolerance"
                    converged = True
                break
            # rejected: restore and raise damping
            for b in blocks:
                b.values = saved[b.name]
            if lam >= LAMBDA_MAX:
                reason = "lambda_max"
                stalled = True
                break
            lam = min(lam * 10.0, LAMBDA_MAX)
        if converged or stalled:
            break

    return SolveReport(converged, iterations, initial_cost, cost, reason, history)
