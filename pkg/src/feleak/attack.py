"""Input reconstruction from a leaked first layer.

Three regimes, all driven by the same observable pair (W, Z1):

* m >= n with full column rank: the input is the unique solution of the
  linear system; `recover_gauss` solves it directly and recovery is exact to
  machine precision.
* m < n: the system is underdetermined, so `build_lp` + `solve_feasibility`
  search the box [0,1]^n for any consistent point, optionally narrowed by
  neighbor-smoothness rows on a systematic subset of pixels (equalities, or
  threshold inequalities in both directions of the absolute value).
* Convolutional first layer: `recover_cnn` flattens the chosen channels into
  an explicit linear operator and reduces to the first regime.

MSE against the true input is only computable by callers that kept it.
"""

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import lp
from .fe_pipeline import AttackInstance, FirstLayerSpec, conv_as_matrix

FRACTIONS = {2: 1 / 2, 4: 1 / 4, 9: 1 / 9, 16: 1 / 16}
DEFAULT_THRESHOLD = 0.1


class RankDeficient(Exception):
    """W has rank below n; exact recovery is impossible, fall back to LP."""


@dataclass
class AugmentationSpec:
    """Which pixels get smoothness rows, and how the rows are phrased.

    fraction may be one of 1/2, 1/4, 1/9, 1/16 (selecting interior pixels
    with (i + j) mod k == 0 for the matching modulus k) or an explicit
    iterable of flat pixel indices. threshold only applies to inequalities.
    """

    mode: str = "none"                 # none | equations | inequalities
    fraction: object = 1 / 2
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.mode not in ("none", "equations", "inequalities"):
            raise ValueError("unknown augmentation mode %r" % self.mode)
        if self.threshold < 0:
            raise ValueError("threshold must be nonnegative")

    def modulus(self):
        for k, f in FRACTIONS.items():
            if isinstance(self.fraction, float) and abs(self.fraction - f) < 1e-12:
                return k
        raise ValueError("fraction %r is not one of %s"
                         % (self.fraction, sorted(FRACTIONS.values())))


@dataclass
class LPProblem:
    """Equality/inequality system with box bounds and a zero objective."""

    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ub: np.ndarray                   # may be None
    b_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    objective: np.ndarray = None

    def __post_init__(self):
        if self.objective is None:
            self.objective = np.zeros(self.lb.shape[0])
        if np.any(self.objective):
            raise ValueError("feasibility search requires a zero objective")


@dataclass
class SolveLimits:
    max_iter: int = None               # engine default when None
    time_limit: float = None           # seconds


@dataclass
class ReconstructionReport:
    x_hat: np.ndarray
    mse: float                         # None unless ground truth was supplied
    solver_status: str
    runtime_ms: float
    iterations: int = 0


def mse(x, x_hat) -> float:
    """Mean squared componentwise difference."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    if x.shape != x_hat.shape:
        raise ValueError("length mismatch: %d vs %d" % (x.size, x_hat.size))
    return float(np.mean((x - x_hat) ** 2))


def recover_gauss(W, Z1):
    """Solve W x = Z1 exactly when W has full column rank.

    Row selection is by column-pivoted QR of W transposed: the pivot order
    ranks rows by independence, the leading diagonal of R measures rank, and
    the n chosen rows form a square system solved by elimination.
    """
    W = np.asarray(W, dtype=np.float64)
    Z1 = np.asarray(Z1, dtype=np.float64).ravel()
    m, n = W.shape
    if Z1.shape[0] != m:
        raise ValueError("Z1 length %d does not match %d rows" % (Z1.shape[0], m))
    if m < n:
        raise RankDeficient("only %d equations for %d unknowns" % (m, n))
    _, R, piv = scipy.linalg.qr(W.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    thresh = diag[0] * max(W.shape) * np.finfo(np.float64).eps if diag.size else 0.0
    rank = int(np.sum(diag > thresh))
    if rank < n:
        raise RankDeficient("rank %d below %d unknowns" % (rank, n))
    rows = piv[:n]
    return np.linalg.solve(W[rows], Z1[rows])


def select_augmentation_pixels(shape, modulus):
    """Flat indices of interior pixels (i, j) with (i + j) % modulus == 0."""
    h, w = shape
    if h < 3 or w < 3:
        raise ValueError("stencil needs at least a 3x3 image, got %dx%d" % (h, w))
    if modulus not in FRACTIONS:
        raise ValueError("modulus must be one of %s" % sorted(FRACTIONS))
    idx = [i * w + j
           for i in range(1, h - 1)
           for j in range(1, w - 1)
           if (i + j) % modulus == 0]
    return np.asarray(idx, dtype=np.int64)


def stencil_rows(shape, pixels):
    """One row per pixel: the pixel minus the mean of its 4 neighbors."""
    h, w = shape
    S = np.zeros((len(pixels), h * w))
    for r, flat in enumerate(pixels):
        i, j = divmod(int(flat), w)
        if not (1 <= i < h - 1 and 1 <= j < w - 1):
            raise ValueError("pixel %d is not interior" % flat)
        S[r, flat] = 1.0
        for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            S[r, ni * w + nj] = -0.25
    return S


def build_lp(instance: AttackInstance, aug: AugmentationSpec) -> LPProblem:
    """Constraint system for the recovery: W x = Z1, box bounds, and the
    requested smoothness rows."""
    n = instance.n
    lo, hi = instance.bounds
    lb = np.full(n, float(lo))
    ub = np.full(n, float(hi))
    A_eq = instance.W
    b_eq = instance.Z1
    A_ub = b_ub = None
    if aug.mode != "none":
        if len(instance.input_shape) < 2:
            raise ValueError("augmentation needs a spatial input shape")
        shape = instance.input_shape[:2]
        if shape[0] * shape[1] != n:
            raise ValueError("augmentation supports single-channel inputs only")
        if np.iterable(aug.fraction) and not isinstance(aug.fraction, float):
            pixels = np.asarray(list(aug.fraction), dtype=np.int64)
        else:
            pixels = select_augmentation_pixels(shape, aug.modulus())
        S = stencil_rows(shape, pixels)
        if aug.mode == "equations":
            A_eq = np.vstack([A_eq, S])
            b_eq = np.concatenate([b_eq, np.zeros(S.shape[0])])
        else:
            # |stencil| <= t split into the two one-sided rows
            A_ub = np.vstack([S, -S])
            b_ub = np.full(2 * S.shape[0], aug.threshold)
    return LPProblem(A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=b_ub, lb=lb, ub=ub)


def solve_feasibility(problem: LPProblem, limits: SolveLimits = None,
                      method: str = "interior") -> ReconstructionReport:
    """Search the constraint set for any point; no objective is optimized.

    method "interior" (analytic center) returns a balanced interior point,
    the right choice for underdetermined image recovery; "simplex" returns a
    vertex and can additionally certify infeasibility.
    """
    limits = limits or SolveLimits()
    start = time.perf_counter()
    if method == "interior":
        out = lp.analytic_center(problem.A_eq, problem.b_eq, problem.A_ub,
                                 problem.b_ub, problem.lb, problem.ub,
                                 max_iter=limits.max_iter or 100,
                                 time_limit=limits.time_limit)
    elif method == "simplex":
        out = lp.simplex_phase1(problem.A_eq, problem.b_eq, problem.A_ub,
                                problem.b_ub, problem.lb, problem.ub,
                                max_iter=limits.max_iter or 50000,
                                time_limit=limits.time_limit)
    else:
        raise ValueError("method must be interior or simplex")
    ms = (time.perf_counter() - start) * 1000.0
    status = out.status
    if status == lp.SOLVED and not lp.check_point(
            out.x, problem.A_eq, problem.b_eq, problem.A_ub, problem.b_ub,
            problem.lb, problem.ub):
        status = lp.ITERATION_LIMIT  # solver claimed success out of tolerance
    return ReconstructionReport(
        x_hat=out.x if status == lp.SOLVED else None,
        mse=None, solver_status=status, runtime_ms=ms,
        iterations=out.iterations)


def recover_cnn(kernels, Z1, channels_used, spec: FirstLayerSpec):
    """Exact recovery through a convolutional first layer.

    Z1 carries the full per-channel output maps (flat, channel-major, or
    shaped (channels, oh, ow)); only the rows of channels_used enter the
    system. Raises RankDeficient when the chosen channels do not pin the
    input, in which case add channels.
    """
    oh, ow = spec.out_hw()
    Z1 = np.asarray(Z1, dtype=np.float64).reshape(spec.channels, oh * ow)
    channels_used = sorted(channels_used)
    mat = conv_as_matrix(kernels, spec, channels_used)
    z = Z1[channels_used].ravel()
    try:
        return recover_gauss(mat, z)
    except RankDeficient as exc:
        raise RankDeficient("%s; add channels to reach rank %d"
                            % (exc, spec.n)) from exc


def recover(instance: AttackInstance, aug: AugmentationSpec = None,
            method: str = "interior", limits: SolveLimits = None
            ) -> ReconstructionReport:
    """End-to-end recovery on an instance: direct solve when the system is
    square-or-taller and full rank, LP feasibility otherwise."""
    start = time.perf_counter()
    if instance.m >= instance.n:
        try:
            x = recover_gauss(instance.W, instance.Z1)
            ms = (time.perf_counter() - start) * 1000.0
            return ReconstructionReport(x_hat=x, mse=None,
                                        solver_status=lp.SOLVED,
                                        runtime_ms=ms)
        except RankDeficient:
            pass  # fall through to the LP path
    problem = build_lp(instance, aug or AugmentationSpec())
    return solve_feasibility(problem, limits=limits, method=method)


def attack_sweep(instance_factory, layer_widths, aug_grid,
                 method: str = "interior", limits: SolveLimits = None):
    """One row per (layer width, augmentation) cell, averaged over samples.

    instance_factory(width) yields (instance, x_true) pairs, at least one.
    Returns dict rows ready for CSV emission: layer_width, aug_mode,
    fraction, threshold, mse, runtime_ms, status.
    """
    rows = []
    for width in layer_widths:
        cases = list(instance_factory(width))
        if not cases:
            raise ValueError("instance factory produced nothing for width %s" % width)
        for aug in aug_grid:
            errors, runtime, status = [], 0.0, lp.SOLVED
            for instance, x_true in cases:
                report = recover(instance, aug=aug, method=method, limits=limits)
                runtime += report.runtime_ms
                if report.solver_status != lp.SOLVED:
                    status = report.solver_status
                    continue
                if x_true is not None:
                    errors.append(mse(x_true, report.x_hat))
            frac = aug.fraction if aug.mode != "none" else ""
            thresh = aug.threshold if aug.mode == "inequalities" else ""
            rows.append({
                "layer_width": width,
                "aug_mode": aug.mode,
                "fraction": frac,
                "threshold": thresh,
                "mse": float(np.mean(errors)) if errors else "",
                "runtime_ms": runtime,
                "status": status,
            })
    return rows
