"""Puffer preconditioning and linear-algebra diagnostics for the marginal design.

The Puffer transform ``F = U D^-1 U'`` built from the thin SVD
``X = U D V'`` turns any full-rank design into one with exactly
orthonormal columns, ``(FX)'(FX) = I``, which restores the
irrepresentability condition that plain LASSO needs for sign-consistent
support recovery.  The price is heteroskedastic transformed noise
``F eps ~ N(0, sigma^2 U D^-2 U')``; the row-normalized variant rescales
every row of ``[FX | Fy]`` to equalize those variances.

Two diagnostics accompany the transform: the L1 norm of the cross
regression of one marginal column on the others (how badly the raw
design fails irrepresentability), and the closed-form minimum singular
value of the limiting marginal Gram matrix under uniform assignment.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidDesignError, SingularDesignError
from .lattice import FactorialDesign, enumerate_policies, relation_matrix

__all__ = [
    "PufferDecomposition",
    "puffer",
    "puffer_row_normalized",
    "irrepresentability_l1",
    "limiting_gram",
    "min_singular_closed_form",
]

# Relative cutoff below which a singular value counts as rank deficiency.
# Balanced randomized designs are well conditioned; a near-zero value
# signals an empty design cell, which must surface as a hard error.
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class PufferDecomposition:
    """Thin SVD of a design plus the materialized preconditioned system.

    Fields
    ------
    U, D : ndarray
        Orthonormal-column factor (n, K) and singular values (K,),
        descending and strictly positive.
    FX, Fy : ndarray
        Preconditioned design ``U V'`` and outcome ``U D^-1 U' y``.
        ``(FX)'(FX) = I`` unless ``row_normalized``.
    row_normalized : bool
        True when rows have been rescaled by the Puffer row norms.

    The factors ``Vt`` and the scalars ``yty``, ``n`` carry the
    original-system moments ``X'X = V D^2 V'``, ``X'y = V D U'y`` and
    ``y'y`` so that downstream inference can recover classical residual
    variance; the transformed pair alone cannot (``Fy`` lies in the
    column span of ``FX`` by construction, so its own least-squares
    residual is identically zero).
    """

    U: np.ndarray
    D: np.ndarray
    Vt: np.ndarray
    FX: np.ndarray
    Fy: np.ndarray
    Uty: np.ndarray
    yty: float
    row_normalized: bool = False

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def n_columns(self):
        return self.D.shape[0]

    def gram(self):
        """Original-system Gram matrix X'X, reconstructed from factors."""
        return (self.Vt.T * self.D**2) @ self.Vt

    def crossprod(self):
        """Original-system moment vector X'y."""
        return self.Vt.T @ (self.D * self.Uty)

    def row_norms(self):
        """Euclidean norms of the rows of the implicit operator F."""
        return np.sqrt((self.U**2 / self.D**2) @ np.ones_like(self.D))


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)
    return arrays


def puffer(x, y):
    """Puffer-precondition the regression of ``y`` on ``x``.

    Parameters
    ----------
    x : ndarray of shape (n, K)
        Full-column-rank design, K < n.
    y : ndarray of shape (n,)

    Returns
    -------
    PufferDecomposition

    Raises
    ------
    SingularDesignError
        When ``x`` is rank deficient (singular value below
        ``RANK_RTOL`` times the largest); the message names the columns
        loading on the null space, the usual symptom of an empty design
        cell.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, k = x.shape
    if k >= n:
        raise SingularDesignError(f"need more rows than columns, got {n} x {k}")
    if y.shape[0] != n:
        raise SingularDesignError("outcome length does not match design rows")
    u, d, vt = np.linalg.svd(x, full_matrices=False)
    bad = d <= RANK_RTOL * d[0]
    if bad.any():
        loadings = np.abs(vt[bad]).max(axis=0)
        cols = np.nonzero(loadings > 0.1)[0].tolist()
        raise SingularDesignError(
            f"design is rank deficient; dependent columns involve indices {cols}"
        )
    uty = u.T @ y
    fx = u @ vt
    fy = u @ (uty / d)
    u, d, vt, fx, fy, uty = (np.ascontiguousarray(a) for a in (u, d, vt, fx, fy, uty))
    _freeze(u, d, vt, fx, fy, uty)
    return PufferDecomposition(
        U=u, D=d, Vt=vt, FX=fx, Fy=fy, Uty=uty, yty=float(y @ y)
    )


def puffer_row_normalized(pd):
    """Rescale each row of ``[FX | Fy]`` by the inverse Puffer row norm.

    Row i of F has squared norm ``sum_k U_ik^2 / d_k^2``; dividing row i
    of the transformed system by that norm equalizes the diagonal of the
    transformed error covariance.  The original-system moment factors
    are carried over unchanged, so selection procedures that work from
    those moments are unaffected by the rescaling.
    """
    norms = pd.row_norms()
    if np.any(norms <= 0):
        raise SingularDesignError("zero Puffer row norm; cannot normalize")
    scale = (1.0 / norms)[:, None]
    fx = np.ascontiguousarray(pd.FX * scale)
    fy = np.ascontiguousarray(pd.Fy * scale.ravel())
    _freeze(fx, fy)
    return PufferDecomposition(
        U=pd.U, D=pd.D, Vt=pd.Vt, FX=fx, Fy=fy, Uty=pd.Uty,
        yty=pd.yty, row_normalized=True,
    )


def irrepresentability_l1(x, target_column, standardized=False):
    """L1 norm of the cross regression of one column on all the others.

    Regresses column ``target_column`` of ``x`` on the remaining columns
    by least squares and returns the sum of absolute coefficients,
    excluding any constant (intercept) columns from the sum.  Values
    well above 1 mean the target column is almost reproducible from the
    others, the textbook failure mode for LASSO support recovery on
    dominance-structured designs.

    Parameters
    ----------
    standardized : bool
        When True, non-constant columns are centered and scaled to unit
        Euclidean norm first (the correlation-scale convention); the
        design's own intercept column is left as is and still absorbs
        the mean.
    """
    x = np.asarray(x, dtype=float)
    n, k = x.shape
    if not 0 <= target_column < k:
        raise InvalidDesignError(f"target column {target_column} outside [0, {k})")
    constant = np.ptp(x, axis=0) == 0
    if standardized:
        z = x.copy()
        for j in range(k):
            if constant[j]:
                continue
            c = x[:, j] - x[:, j].mean()
            z[:, j] = c / np.linalg.norm(c)
        x = z
    others = np.delete(np.arange(k), target_column)
    coef, _, rank, _ = np.linalg.lstsq(x[:, others], x[:, target_column], rcond=None)
    if rank < others.shape[0]:
        raise SingularDesignError("sub-design is singular; cannot regress columns")
    keep = ~constant[others]
    return float(np.abs(coef[keep]).sum())


def limiting_gram(design):
    """Limiting marginal Gram matrix ``E[x x']`` under uniform assignment.

    Built analytically, not sampled: for columns l, l' sharing a profile
    with active arms A, the expectation is the number of same-profile
    cells dominating both, ``prod_{m in A}(R_m - max(r_m, s_m))``,
    divided by K; columns of different profiles are orthogonal in the
    limit, so the matrix is block diagonal by profile.  Uses the strict
    control column (control indicator), under which the control block is
    the scalar 1/K.
    """
    pol = enumerate_policies(design)
    radices = np.array(design.dosages)
    active = pol > 0
    same_profile = np.all(active[:, None, :] == active[None, :, :], axis=2)
    pair_max = np.maximum(pol[:, None, :], pol[None, :, :])
    counts = np.prod(np.where(active[:, None, :], radices - pair_max, 1), axis=2)
    return np.where(same_profile, counts, 0) / design.n_policies


def min_singular_closed_form(r, m):
    """Closed-form minimum singular value of the limiting marginal design.

    For the symmetric design with M arms of R dosages each,

        xi_min = (4 R sin^2(((R - 3/2) / (R - 1/2)) pi / 2))^(-M/2),

    the square root of the smallest eigenvalue of the limiting Gram
    matrix, attained on the all-arms-active block.  The numeric
    eigenvalue of the analytically built Gram matrix is computed as a
    companion check and must agree to 1e-6.
    """
    r, m = int(r), int(m)
    if r < 2:
        raise InvalidDesignError(f"need at least 2 dosage levels, got R={r}")
    if m < 1:
        raise InvalidDesignError(f"need at least 1 arm, got M={m}")
    angle = (r - 1.5) / (r - 0.5) * math.pi / 2
    closed = (4 * r * math.sin(angle) ** 2) ** (-m / 2)
    gram = limiting_gram(FactorialDesign((r,) * m))
    lam_min = float(np.linalg.eigvalsh(gram)[0])
    if abs(lam_min - closed**2) > 1e-6:
        raise SingularDesignError(
            f"limiting Gram eigenvalue {lam_min} disagrees with closed form "
            f"{closed**2} for R={r}, M={m}"
        )
    return closed
