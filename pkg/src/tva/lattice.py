"""Factorial designs, the policy dominance lattice, and the marginal reparameterization.

A policy is an intensity vector ``[r_1, ..., r_M]`` with ``0 <= r_m < R_m``;
dosage 0 means the arm is off.  Policies are indexed canonically by the
mixed-radix encoding with arm 1 as the slowest digit, so the all-zero
control policy always has index 0.  The treatment profile of a policy is
the set of active arms; two policies are variants when they share a
profile.  Dominance ``k >= l`` holds when every intensity of ``k`` is at
least the matching intensity of ``l``.

The central linear objects are the within-profile dominance relation
``W`` and the marginal design matrix ``X``: a row of ``X`` marks every
policy that the unit's assigned policy dominates within its own profile.
Effects on unique policies (beta) and marginal effects (alpha) are
related by ``beta = W alpha`` with ``W`` restricted to same-profile
dominance, an invertible unit-triangular map in canonical order.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InvalidDesignError

__all__ = [
    "FactorialDesign",
    "PolicyLattice",
    "enumerate_policies",
    "policy_index",
    "profile_of",
    "relation_matrix",
    "marginal_matrix",
    "unique_policy_matrix",
    "alpha_to_beta",
    "beta_to_alpha",
]


@dataclass(frozen=True)
class FactorialDesign:
    """A cross-randomized design with ordered dosages.

    Parameters
    ----------
    dosages : tuple of int
        Number of dosage levels per arm, ``(R_1, ..., R_M)``, each at
        least 2 (level 0 is the arm-off level).  Asymmetric designs are
        fully supported; the number of unique policies is the product.
    """

    dosages: tuple

    def __post_init__(self):
        dosages = tuple(int(r) for r in self.dosages)
        if len(dosages) < 1:
            raise InvalidDesignError("a design needs at least one arm")
        if any(r < 2 for r in dosages):
            raise InvalidDesignError(
                f"every arm needs at least 2 dosage levels, got {dosages}"
            )
        object.__setattr__(self, "dosages", dosages)

    @property
    def arm_count(self):
        return len(self.dosages)

    @property
    def n_policies(self):
        return int(np.prod(self.dosages))


def enumerate_policies(design):
    """All K intensity vectors in canonical mixed-radix order.

    Arm 1 is the slowest digit, so the control policy ``[0, ..., 0]``
    comes first and the all-max policy last.

    Returns
    -------
    ndarray of shape (K, M), dtype int
    """
    grids = np.meshgrid(*[np.arange(r) for r in design.dosages], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def policy_index(design, intensities):
    """Canonical index of one policy or an array of policies.

    Inverse of :func:`enumerate_policies` row lookup; accepts shape
    ``(M,)`` or ``(n, M)``.
    """
    arr = np.asarray(intensities, dtype=int)
    radices = np.array(design.dosages)
    if np.any(arr < 0) or np.any(arr >= radices):
        raise InvalidDesignError(
            f"intensities out of range for dosages {design.dosages}"
        )
    weights = np.concatenate([np.cumprod(radices[::-1])[::-1][1:], [1]])
    idx = arr @ weights
    return int(idx) if arr.ndim == 1 else idx


def profile_of(intensities):
    """Treatment profile: the 1-based set of arms with positive dosage.

    Examples
    --------
    >>> sorted(profile_of([1, 0, 2]))
    [1, 3]
    """
    arr = np.asarray(intensities, dtype=int)
    return frozenset((np.nonzero(arr > 0)[0] + 1).tolist())


def relation_matrix(design, intercept=True):
    """Within-profile dominance indicator W over all K policies.

    ``W[k, l] = 1`` when policy ``k`` dominates ``l`` and both share a
    treatment profile.  With ``intercept=True`` the control column is
    the all-ones intercept, matching the marginal design matrix
    convention (``X = T W``).  With ``intercept=False`` the control
    column is the strict relation (control relates only to itself),
    which is the form entering the alpha/beta maps and the limiting
    Gram matrix.

    W is lower triangular with unit diagonal in canonical order, hence
    invertible.
    """
    pol = enumerate_policies(design)
    active = pol > 0
    same_profile = np.all(active[:, None, :] == active[None, :, :], axis=2)
    dominates = np.all(pol[:, None, :] >= pol[None, :, :], axis=2)
    w = (same_profile & dominates).astype(float)
    if intercept:
        w[:, 0] = 1.0
    return w


def _assignment_indices(design, assignments):
    """Normalize assignments to canonical indices; accepts (n,M) or (n,)."""
    arr = np.asarray(assignments)
    if arr.ndim == 2:
        return policy_index(design, arr)
    idx = arr.astype(int)
    if np.any(idx < 0) or np.any(idx >= design.n_policies):
        raise InvalidDesignError("assignment index outside [0, K)")
    return idx


def marginal_matrix(design, assignments):
    """Marginal design matrix X, one row per unit.

    ``X[i, l] = 1`` when unit i's policy dominates policy ``l`` within
    the same treatment profile.  The control column is the all-ones
    intercept.  Row k of the relation matrix gives the row for a unit
    assigned policy k, so ``X = T W``.

    Parameters
    ----------
    assignments : array
        Either intensity vectors of shape (n, M) or canonical policy
        indices of shape (n,).
    """
    idx = _assignment_indices(design, assignments)
    return relation_matrix(design, intercept=True)[idx]


def unique_policy_matrix(design, assignments):
    """Cell indicator matrix T: ``T[i, k] = 1`` iff unit i has policy k."""
    idx = _assignment_indices(design, assignments)
    t = np.zeros((idx.shape[0], design.n_policies))
    t[np.arange(idx.shape[0]), idx] = 1.0
    return t


def alpha_to_beta(design, alpha):
    """Map marginal effects to unique-policy effects.

    ``beta_k`` is the sum of ``alpha`` over the same-profile policies
    that k dominates; the control entry passes through unchanged.
    """
    alpha = np.asarray(alpha, dtype=float)
    return relation_matrix(design, intercept=False) @ alpha


def beta_to_alpha(design, beta):
    """Exact inverse of :func:`alpha_to_beta`.

    The strict relation matrix is unit lower triangular in canonical
    order, so the inverse map is a single forward substitution; this is
    the Moebius inversion of the within-profile dominance order.
    """
    beta = np.asarray(beta, dtype=float)
    w = relation_matrix(design, intercept=False)
    return solve_triangular(w, beta, lower=True, unit_diagonal=True)


class PolicyLattice:
    """Derived views of a design's dominance structure, computed lazily.

    Attributes are cached on first use; instances are cheap to create
    and safe to share (all arrays are treated as read-only).
    """

    def __init__(self, design):
        self.design = design

    @cached_property
    def policies(self):
        return enumerate_policies(self.design)

    @cached_property
    def profiles(self):
        """Per-policy treatment profile, canonical order."""
        return tuple(profile_of(p) for p in self.policies)

    @cached_property
    def dominance(self):
        """Boolean K x K matrix of the (unrestricted) dominance order."""
        pol = self.policies
        return np.all(pol[:, None, :] >= pol[None, :, :], axis=2)

    @cached_property
    def relation(self):
        """Strict within-profile relation (no intercept column)."""
        return relation_matrix(self.design, intercept=False)

    @cached_property
    def hasse_edges(self):
        """Covering pairs (lower, upper) of the within-profile order.

        A pair covers exactly when the two policies share a profile and
        differ by one unit on a single arm.
        """
        pol = self.policies
        diff = pol[None, :, :] - pol[:, None, :]
        one_step = (diff >= 0).all(axis=2) & (diff.sum(axis=2) == 1)
        active = pol > 0
        same_profile = np.all(active[:, None, :] == active[None, :, :], axis=2)
        lo, hi = np.nonzero(one_step & same_profile)
        return tuple(zip(lo.tolist(), hi.tolist()))
