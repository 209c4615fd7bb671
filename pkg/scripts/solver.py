"""
Sparse least-squares height recovery.

The per-pixel constraints B(x) grad z(x) = h(x) are discretised with a
finite-difference gradient operator G over the masked domain, giving
A z = h_bar with A = B_bar G. One pixel is pinned to remove the additive
constant and the remaining normal equations are solved directly (small
grids) or by Jacobi-preconditioned conjugate gradients.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import LinearOperator, cg, splu

from scripts.config import ALBEDO, ALTERNATION, DEFAULT_ETA, SOLVER
from scripts.constraints import ConstraintField, assemble
from scripts.errors import ConvergenceError, SingularSystemError, ValidationError
from scripts.poldecomp import PolarisationImage

logger = logging.getLogger(__name__)

STENCILS = ("forward", "central")


@dataclass
class GradientOperator:
    """
    Finite-difference gradient over masked pixels.

    matrix is (2M, M): the first M rows give z_x (along columns), the last M
    give z_y (along rows). Unknowns are ordered like np.flatnonzero(mask).
    """
    matrix: sparse.csr_matrix
    mask: np.ndarray
    index: np.ndarray
    pixels: np.ndarray
    flagged: np.ndarray
    stencil: str

    @property
    def n_pixels(self) -> int:
        return int(self.pixels.size)

    def apply(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Differentiate a height grid; NaN outside the mask."""
        values = self.matrix @ np.asarray(z, dtype=float).ravel()[self.pixels]
        gx = np.full(self.mask.shape, np.nan)
        gy = np.full(self.mask.shape, np.nan)
        gx.ravel()[self.pixels] = values[:self.n_pixels]
        gy.ravel()[self.pixels] = values[self.n_pixels:]
        return gx, gy


@dataclass
class HeightSolution:
    z: np.ndarray
    mask: np.ndarray
    pinned_pixel: Tuple[int, int]
    stats: Dict[str, Any] = field(default_factory=dict)

    def values(self) -> np.ndarray:
        return self.z[self.mask]


def _difference_rows(mask: np.ndarray, index: np.ndarray, axis: int, stencil: str):
    """COO triplets for one derivative direction plus the rows left without neighbours."""
    h, w = mask.shape
    ahead = np.zeros_like(mask)
    behind = np.zeros_like(mask)
    if axis == 1:
        ahead[:, :-1] = mask[:, 1:]
        behind[:, 1:] = mask[:, :-1]
        step = 1
    else:
        ahead[:-1, :] = mask[1:, :]
        behind[1:, :] = mask[:-1, :]
        step = w

    flat = np.flatnonzero(mask)
    lookup = index.ravel()
    me = np.arange(flat.size)
    has_ahead = ahead.ravel()[flat]
    has_behind = behind.ravel()[flat]

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []

    def add(sel, left, right, scale):
        rows.extend([me[sel], me[sel]])
        cols.extend([left, right])
        vals.extend([np.full(int(sel.sum()), -scale), np.full(int(sel.sum()), scale)])

    if stencil == "central":
        both = has_ahead & has_behind
        add(both, lookup[flat[both] - step], lookup[flat[both] + step], 0.5)
        forward = has_ahead & ~both
    else:
        forward = has_ahead
    # one-sided fallback where the forward neighbour is missing
    backward = has_behind & ~has_ahead

    add(forward, me[forward], lookup[flat[forward] + step], 1.0)
    add(backward, lookup[flat[backward] - step], me[backward], 1.0)

    flagged = ~(has_ahead | has_behind)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), flagged


def build_gradient_operator(mask: np.ndarray, stencil: str = SOLVER["stencil"]) -> GradientOperator:
    """
    Raises:
        ValidationError: empty, single-pixel or disconnected mask; unknown stencil
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValidationError(f"Mask must be 2-D, got shape {mask.shape}")
    if stencil not in STENCILS:
        raise ValidationError(f"Unknown stencil '{stencil}', expected one of {STENCILS}")
    m = int(mask.sum())
    if m < 2:
        raise ValidationError(f"Reconstruction domain needs at least 2 pixels, has {m}")
    _, components = ndimage.label(mask)
    if components > 1:
        raise ValidationError(f"Reconstruction domain is disconnected ({components} components)")

    index = np.full(mask.shape, -1, dtype=np.int64)
    index[mask] = np.arange(m)

    parts = []
    flagged = []
    for axis in (1, 0):
        rows, cols, vals, missing = _difference_rows(mask, index, axis, stencil)
        parts.append(sparse.coo_matrix((vals, (rows, cols)), shape=(m, m)))
        flagged.append(missing)

    matrix = sparse.vstack(parts).tocsr()
    flagged = np.concatenate(flagged)
    if np.any(flagged):
        logger.debug(f"{int(flagged.sum())} gradient rows have no neighbour and are zero")

    return GradientOperator(matrix=matrix, mask=mask, index=index, pixels=np.flatnonzero(mask),
                            flagged=flagged, stencil=stencil)


def pinned_index(mask: np.ndarray) -> Tuple[int, int]:
    """Masked pixel closest to the centroid of the domain (first in raster order on ties)."""
    rows, cols = np.nonzero(mask)
    distance = (rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2
    k = int(np.argmin(distance))
    return int(rows[k]), int(cols[k])


def _least_squares(A: sparse.csr_matrix, rhs: np.ndarray, pinned: int) -> Tuple[np.ndarray, Dict[str, Any]]:
    """min ||A z - rhs|| with z[pinned] = 0."""
    m = A.shape[1]
    keep = np.delete(np.arange(m), pinned)
    reduced = A.tocsc()[:, keep]
    normal = (reduced.T @ reduced).tocsc()
    target = reduced.T @ rhs

    diagonal = normal.diagonal()
    if np.any(diagonal <= 0):
        raise SingularSystemError(f"{int(np.sum(diagonal <= 0))} pixel(s) are not constrained by any row")

    stats: Dict[str, Any] = {}
    if m <= SOLVER["direct_max_pixels"]:
        try:
            factor = splu(normal)
        except RuntimeError as e:
            raise SingularSystemError(f"Normal equations are singular: {e}")
        pivots = np.abs(factor.U.diagonal())
        ratio = pivots.min() / pivots.max() if pivots.size and pivots.max() > 0 else 1.0
        if ratio < SOLVER["pivot_ratio"]:
            raise SingularSystemError(f"Normal equations are rank-deficient (pivot ratio {ratio:.1e})")
        solution = factor.solve(target)
        stats.update({"method": "direct", "iterations": 1})
    else:
        iterations = [0]

        def count(_):
            iterations[0] += 1

        inverse_diagonal = 1.0 / diagonal
        preconditioner = LinearOperator(normal.shape, matvec=lambda r: inverse_diagonal * r)
        max_iter = SOLVER["cg_max_iter_factor"] * m
        solution, info = cg(normal, target, rtol=SOLVER["cg_tol"], maxiter=max_iter,
                            M=preconditioner, callback=count)
        if info > 0:
            raise ConvergenceError(f"Conjugate gradients did not converge in {max_iter} iterations")
        stats.update({"method": "cg", "iterations": iterations[0]})

    if not np.all(np.isfinite(solution)):
        raise SingularSystemError("Height solve produced non-finite values")

    z = np.zeros(m)
    z[keep] = solution
    residual = A @ z - rhs
    scale = np.max(np.abs(A.T @ rhs)) if rhs.size else 0.0
    stats.update({
        "residual_norm": float(np.linalg.norm(residual)),
        "optimality": float(np.max(np.abs(A.T @ residual)) / scale) if scale > 0 else 0.0,
    })
    if stats["optimality"] > SOLVER["max_optimality"]:
        raise SingularSystemError(f"Height solve is not a least-squares optimum (optimality {stats['optimality']:.1e})")
    return z, stats


def _height_grid(mask: np.ndarray, values: np.ndarray) -> np.ndarray:
    z = np.full(mask.shape, np.nan)
    z[mask] = values
    return z


def solve_height(field_: ConstraintField, G: Optional[GradientOperator] = None,
                 stencil: str = SOLVER["stencil"]) -> HeightSolution:
    """
    Least-squares height for a constraint field, pinned to 0 at the pixel
    nearest the domain centroid.

    Raises:
        ValidationError: field and operator disagree on the domain
        SingularSystemError: some pixel is left unconstrained
        ConvergenceError: CG hit its iteration cap
    """
    start = time.perf_counter()
    if G is None:
        G = build_gradient_operator(field_.mask, stencil)
    if G.mask.shape != field_.mask.shape or not np.array_equal(G.mask, field_.mask):
        raise ValidationError("Constraint field and gradient operator cover different domains")
    if field_.n_rows == 0:
        raise SingularSystemError("Constraint field has no rows")

    m = G.n_pixels
    unknown = G.index.ravel()[field_.pixel]
    if np.any(unknown < 0):
        raise ValidationError("Constraint rows reference pixels outside the domain")

    k = np.arange(field_.n_rows)
    weighted_b = field_.b * field_.weight[:, None]
    B_bar = sparse.coo_matrix(
        (np.concatenate([weighted_b[:, 0], weighted_b[:, 1]]),
         (np.concatenate([k, k]), np.concatenate([unknown, m + unknown]))),
        shape=(field_.n_rows, 2 * m),
    ).tocsr()
    A = (B_bar @ G.matrix).tocsr()
    h_bar = field_.h * field_.weight

    pinned = pinned_index(G.mask)
    values, stats = _least_squares(A, h_bar, int(G.index[pinned]))

    stats.update({
        "variant": field_.variant,
        "M": m,
        "rows": field_.n_rows,
        "stencil": G.stencil,
        "wall_ms": (time.perf_counter() - start) * 1000.0,
    })
    logger.info(f"Solved {field_.variant}: M={m}, rows={field_.n_rows}, {stats['method']}, "
                f"residual={stats['residual_norm']:.3e}")
    return HeightSolution(z=_height_grid(G.mask, values), mask=G.mask, pinned_pixel=pinned, stats=stats)


def integrate_gradient(gx: np.ndarray, gy: np.ndarray, mask: Optional[np.ndarray] = None,
                       G: Optional[GradientOperator] = None,
                       stencil: str = SOLVER["stencil"]) -> HeightSolution:
    """Least-squares integration of a gradient field with the same operator."""
    gx = np.asarray(gx, dtype=float)
    gy = np.asarray(gy, dtype=float)
    if mask is None:
        mask = np.isfinite(gx) & np.isfinite(gy)
    if G is None:
        G = build_gradient_operator(mask, stencil)

    rhs = np.concatenate([gx.ravel()[G.pixels], gy.ravel()[G.pixels]])
    active = ~G.flagged
    A = G.matrix[active]
    pinned = pinned_index(G.mask)
    values, stats = _least_squares(A, rhs[active], int(G.index[pinned]))
    stats.update({"variant": "integrate", "M": G.n_pixels, "rows": int(active.sum()), "stencil": G.stencil})
    return HeightSolution(z=_height_grid(G.mask, values), mask=G.mask, pinned_pixel=pinned, stats=stats)


def maximal_height_score(solution: HeightSolution) -> float:
    """Mean height over the domain minus mean height along its boundary."""
    mask = solution.mask
    interior = ndimage.binary_erosion(mask, border_value=0)
    boundary = mask & ~interior
    if not np.any(boundary):
        return 0.0
    return float(np.mean(solution.z[mask]) - np.mean(solution.z[boundary]))


def solve_prop13(pol: PolarisationImage, lights: Sequence[Sequence[float]], eta: float = DEFAULT_ETA,
                 spec: Optional[np.ndarray] = None, G: Optional[GradientOperator] = None,
                 rel_tol: float = ALTERNATION["rel_tol"],
                 max_iterations: int = ALTERNATION["max_iterations"],
                 lam: float = ALBEDO["lambda"]) -> Tuple[HeightSolution, np.ndarray, Dict[str, Any]]:
    """
    Albedo-invariant solve followed by alternating albedo / maximally
    constrained solves. The albedo is read off the polarisation normals,
    so the height only picks their sign and noiseless input settles after
    the second solve.

    Returns:
        Tuple of (final height, albedo (colours, h, w), alternation stats)
    """
    from scripts.albedo import estimate_albedo

    start = time.perf_counter()
    if G is None:
        G = build_gradient_operator(pol.mask)

    solution = solve_height(assemble("prop1", pol, lights=lights, spec=spec, eta=eta), G)
    residuals = [solution.stats["residual_norm"]]
    changes: List[float] = []
    albedo = None
    converged = False

    for iteration in range(1, max_iterations + 1):
        albedo, _ = estimate_albedo(solution.z, pol, lights, spec=spec, lam=lam, G=G,
                                    normals="polarisation", eta=eta)
        updated = solve_height(assemble("prop3", pol, lights=lights, albedo=albedo, spec=spec, eta=eta), G)

        previous = solution.values()
        current = updated.values()
        change = float(np.linalg.norm(current - previous) / max(np.linalg.norm(current), 1e-300))
        changes.append(change)
        if iteration > 1 and updated.stats["residual_norm"] > residuals[-1] * (1 + 1e-9):
            logger.warning(f"prop13: residual rose at iteration {iteration}: "
                           f"{residuals[-1]:.3e} -> {updated.stats['residual_norm']:.3e}")
        residuals.append(updated.stats["residual_norm"])
        solution = updated
        logger.debug(f"prop13 iteration {iteration}: relative height change {change:.2e}")
        if change < rel_tol:
            converged = True
            break

    if not converged:
        logger.warning(f"prop13 alternation hit the iteration cap ({max_iterations})")

    # residuals[0] belongs to the prop1 system, only later ones are comparable
    later = residuals[1:]
    stats = {
        "iterations": len(changes),
        "converged": converged,
        "height_changes": changes,
        "residuals": residuals,
        "monotone": all(b <= a * (1 + 1e-9) for a, b in zip(later, later[1:])),
        "wall_ms": (time.perf_counter() - start) * 1000.0,
    }
    solution.stats.update({"variant": "prop13", "alternation": stats})
    return solution, albedo, stats
