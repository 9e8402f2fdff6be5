"""Soft assignment codes between projections and prototypes.

Training codes maximize an entropy-smoothed assignment score over the
equipartition transportation polytope (row marginals 1/K, column
marginals 1/B) via Sinkhorn-Knopp rescaling. Test codes use the relaxed
polytope that only constrains columns to sum to one, whose maximizer is
a per-column softmax of the scores, so single-sample batches are not
forced into an equipartition.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .model import PrototypeBank, ProjectionBatch

CONVERGED_TOL = 1e-10
CONVERGED_MAX_ITERATIONS = 10_000
_STABILIZE_BELOW = 0.1
_ANDERSON_DEPTH = 4


class CodeMode(enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class ScoreMatrix:
    """Prototype-projection dot products, shape (num_prototypes, batch)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"scores must be a (K, B) matrix, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("scores contain non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def num_prototypes(self) -> int:
        return self.values.shape[0]

    @property
    def batch_size(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class CodeMatrix:
    """Nonnegative soft assignments; column scale depends on the mode.

    TRAIN columns each carry mass 1/B (equipartition polytope member),
    TEST columns are probability distributions summing to one.
    """

    values: np.ndarray
    mode: CodeMode

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("codes must be a (K, B) matrix")
        if not np.all(np.isfinite(v)):
            raise ValueError("codes contain non-finite entries")
        if np.any(v < 0):
            raise ValueError("codes must be nonnegative")
        target = 1.0 / v.shape[1] if self.mode is CodeMode.TRAIN else 1.0
        if np.max(np.abs(v.sum(axis=0) - target)) > 1e-6:
            raise ValueError(f"column sums must equal {target} in mode {self.mode.value}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SinkhornSettings:
    """epsilon: smoothing temperature; iterations: full row+column passes.

    ``stabilized=None`` selects log-domain updates automatically for
    epsilon < 0.1. ``tol`` switches to run-to-convergence mode: iterate
    until the row-marginal residual drops below it (or ``iterations`` is
    exhausted), with Anderson extrapolation of the dual potentials in the
    log-domain path.
    """

    epsilon: float
    iterations: int = 3
    stabilized: bool | None = None
    tol: float | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.tol is not None and self.tol <= 0:
            raise ValueError("tol must be positive when given")

    def use_log_domain(self) -> bool:
        if self.stabilized is None:
            return self.epsilon < _STABILIZE_BELOW
        return self.stabilized


def score_matrix(prototypes: PrototypeBank, projections: ProjectionBatch) -> ScoreMatrix:
    """Dot product of every prototype with every projection."""
    c = prototypes.values
    z = projections.values
    if c.shape[0] != z.shape[0]:
        raise ValueError(f"dimension mismatch: prototypes {c.shape[0]}-dim, projections {z.shape[0]}-dim")
    return ScoreMatrix(values=c.T @ z)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)), axis=axis)


def _sinkhorn_plain(s: np.ndarray, settings: SinkhornSettings) -> np.ndarray:
    k, b = s.shape
    kernel = np.exp(s / settings.epsilon)
    if not np.all(np.isfinite(kernel)):
        raise FloatingPointError(
            "exp overflow in plain-domain Sinkhorn; use stabilized (log-domain) mode"
        )
    r, c = 1.0 / k, 1.0 / b
    v = np.full(b, 1.0 / b)
    u = np.full(k, 1.0 / k)
    for _ in range(settings.iterations):
        u = r / (kernel @ v)
        v = c / (kernel.T @ u)
        if settings.tol is not None:
            if np.max(np.abs(u * (kernel @ v) - r)) < settings.tol:
                break
    q = u[:, None] * kernel * v[None, :]
    if not np.all(np.isfinite(q)):
        raise FloatingPointError("non-finite Sinkhorn iterate; use stabilized mode")
    return q


def _sinkhorn_log(s: np.ndarray, settings: SinkhornSettings) -> np.ndarray:
    k, b = s.shape
    ls = s / settings.epsilon
    log_r, log_c = -np.log(k), -np.log(b)
    r = 1.0 / k

    def step(f, g):
        f = log_r - _logsumexp(ls + g[None, :], axis=1)
        g = log_c - _logsumexp(ls + f[:, None], axis=0)
        return f, g

    f, g = np.zeros(k), np.zeros(b)
    if settings.tol is None:
        for _ in range(settings.iterations):
            f, g = step(f, g)
        return np.exp(ls + f[:, None] + g[None, :])

    # run-to-convergence: Anderson extrapolation over stacked potentials,
    # with a clean feasibility pass before every residual check so the
    # accepted iterate still ends on an exact column normalization
    hist_x: list[np.ndarray] = []
    hist_fx: list[np.ndarray] = []
    x = np.zeros(k + b)
    for it in range(1, settings.iterations + 1):
        f, g = step(x[:k], x[k:])
        fx = np.concatenate([f, g])
        hist_x.append(x)
        hist_fx.append(fx)
        if len(hist_x) > _ANDERSON_DEPTH + 1:
            hist_x.pop(0)
            hist_fx.pop(0)
        if len(hist_x) >= 2:
            resid = np.stack([hist_fx[i] - hist_x[i] for i in range(len(hist_x))], axis=1)
            d_resid = np.diff(resid, axis=1)
            gamma, *_ = np.linalg.lstsq(d_resid, resid[:, -1], rcond=None)
            extrapolated = fx - np.diff(np.stack(hist_fx, axis=1), axis=1) @ gamma
            x = extrapolated if np.all(np.isfinite(extrapolated)) else fx
        else:
            x = fx
        if it % 5 == 0 or it == settings.iterations:
            f, g = step(x[:k], x[k:])
            rows = np.exp(f + _logsumexp(ls + g[None, :], axis=1))
            if np.max(np.abs(rows - r)) < settings.tol:
                return np.exp(ls + f[:, None] + g[None, :])
            x = np.concatenate([f, g])
    f, g = x[:k], x[k:]
    return np.exp(ls + f[:, None] + g[None, :])


def sinkhorn_codes(scores: ScoreMatrix, settings: SinkhornSettings) -> CodeMatrix:
    """Equipartition codes via alternating marginal rescaling.

    Each full iteration rescales rows to 1/K then columns to 1/B, so the
    returned columns are exact regardless of the iteration count; rows
    converge as iterations increase.
    """
    s = scores.values
    if s.shape[1] == 1:
        raise ValueError(
            "equipartition codes are degenerate for a single-column batch; use test_codes"
        )
    solver = _sinkhorn_log if settings.use_log_domain() else _sinkhorn_plain
    return CodeMatrix(values=solver(s, settings), mode=CodeMode.TRAIN)


def sinkhorn_converged(scores: ScoreMatrix, epsilon: float,
                       tol: float = CONVERGED_TOL,
                       max_iterations: int = CONVERGED_MAX_ITERATIONS) -> CodeMatrix:
    """Run-to-convergence variant used by the invariant checks."""
    settings = SinkhornSettings(epsilon=epsilon, iterations=max_iterations,
                                stabilized=True, tol=tol)
    return sinkhorn_codes(scores, settings)


def test_codes(scores: ScoreMatrix, epsilon: float) -> CodeMatrix:
    """Closed-form codes for the column-only polytope: softmax(s/epsilon) per column."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    ls = scores.values / epsilon
    ls = ls - np.max(ls, axis=0, keepdims=True)
    q = np.exp(ls)
    q /= q.sum(axis=0, keepdims=True)
    return CodeMatrix(values=q, mode=CodeMode.TEST)


def as_assignment_distributions(codes: CodeMatrix) -> np.ndarray:
    """Columns rescaled to probability distributions (mass 1 per sample)."""
    if codes.mode is CodeMode.TRAIN:
        return codes.values * codes.values.shape[1]
    return codes.values


# ---------------------------------------------------------------------------
# independent oracle for the closed-form solution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClosedFormCheck:
    gap: float
    per_column: np.ndarray
    warnings: tuple[str, ...] = field(default=())


def _entropic_objective(q: np.ndarray, s: np.ndarray, epsilon: float) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(q > 0, q * np.log(q), 0.0)
    return float(q @ s - epsilon * ent.sum())


def _simplex_grid(k: int, resolution: int) -> np.ndarray:
    """All points with coordinates i/resolution on the (k-1)-simplex."""
    if k == 1:
        return np.ones((1, 1))
    points = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            points.append(prefix + [remaining])
            return
        for i in range(remaining + 1):
            rec(prefix + [i], remaining - i, slots - 1)

    rec([], resolution, k)
    return np.asarray(points, dtype=np.float64) / resolution


# per-dimension cap keeping the coarse stage around a few thousand points
_GRID_CAPS = {2: 100_000, 3: 80, 4: 30, 5: 16, 6: 11}


def _refine_on_simplex(q: np.ndarray, s: np.ndarray, epsilon: float,
                       sweeps: int = 80, xatol: float = 1e-13) -> tuple[np.ndarray, float]:
    """Cyclic golden-section line searches along simplex edge directions."""
    q = q.copy()
    best = _entropic_objective(q, s, epsilon)
    k = q.size
    for _ in range(sweeps):
        improved = 0.0
        for i in range(k):
            for j in range(i + 1, k):
                lo, hi = -q[i], q[j]
                if hi - lo < 1e-15:
                    continue

                def neg_obj(t):
                    trial = q.copy()
                    trial[i] += t
                    trial[j] -= t
                    np.clip(trial, 0.0, None, out=trial)
                    return -_entropic_objective(trial, s, epsilon)

                res = minimize_scalar(neg_obj, bounds=(lo, hi), method="bounded",
                                      options={"xatol": xatol})
                if -res.fun > best:
                    improved += -res.fun - best
                    best = -res.fun
                    q[i] += res.x
                    q[j] -= res.x
                    np.clip(q, 0.0, None, out=q)
                    q /= q.sum()
        if improved < 1e-14:
            break
    return q, best


def verify_closed_form(scores: ScoreMatrix, epsilon: float, grid_resolution: int) -> ClosedFormCheck:
    """Derivative-free check that test codes maximize the per-column objective.

    Each column's simplex is searched with a coarse composition grid
    followed by golden-section refinement along edge directions; the
    returned gap is (search optimum - closed-form objective), maximized
    over columns. Positive gaps beyond tolerance indicate the closed form
    is not optimal; large negative gaps indicate a failed search.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be at least 2")
    k, b = scores.values.shape
    if k > 6 or b > 4:
        raise ValueError("oracle limited to K <= 6, B <= 4 instances")

    closed = test_codes(scores, epsilon).values
    gaps = np.zeros(b)
    warnings: list[str] = []
    resolution = min(grid_resolution, _GRID_CAPS[k]) if k >= 2 else grid_resolution
    grid = _simplex_grid(k, resolution)
    for col in range(b):
        s = scores.values[:, col]
        objective = grid @ s - epsilon * np.where(grid > 0, grid * np.log(grid), 0.0).sum(axis=1)
        start = grid[int(np.argmax(objective))]
        coarse_best = float(np.max(objective))
        _, refined = _refine_on_simplex(start, s, epsilon)
        closed_value = _entropic_objective(closed[:, col], s, epsilon)
        gaps[col] = refined - closed_value
        if refined - coarse_best > 1e-3:
            warnings.append(
                f"column {col}: coarse grid (resolution {resolution}) missed the optimum "
                f"by {refined - coarse_best:.2e}"
            )
    return ClosedFormCheck(gap=float(np.max(gaps)), per_column=gaps, warnings=tuple(warnings))
