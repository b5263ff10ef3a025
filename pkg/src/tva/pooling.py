"""Pooling and pruning: from a marginal support to the maximal admissible partition.

Each support member j casts a sphere of influence: the same-profile
policies dominating j, exactly the policies whose unique-policy effect
includes the marginal ``alpha_j``.  Intersecting spheres and their
complements partitions every profile into atoms on which the effect
sum is constant; atoms covered by at least one sphere become pools,
and the all-complement atom of every profile is pruned into the
control pool.  Two policies land in the same atom exactly when they
are dominated by the same subset of support members, so the atoms are
computed directly from those membership signatures instead of
enumerating the up to ``2^m`` signed intersections.

The construction is purely set theoretic: it uses the support pattern
only, never coefficient magnitudes, so coincidental equalities between
sums of distinct nonzero effects are deliberately ignored (they are
non-generic under well-separated marginals).
"""

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import InvalidDesignError, PoolSizeError
from .lattice import enumerate_policies, policy_index, profile_of

__all__ = [
    "PooledPartition",
    "AdmissibilityReport",
    "RuleCheck",
    "sphere",
    "pool",
    "validate_admissible",
    "format_policy",
]

# Per-profile supports beyond this size would make the nominal atom
# algebra (2^m signed intersections) meaninglessly large; real designs
# keep m tiny.
MAX_PROFILE_SUPPORT = 20


def format_policy(intensities):
    """Render one intensity vector as ``[r1,r2,...]``."""
    return "[" + ",".join(str(int(v)) for v in intensities) + "]"


def _box_label(members):
    """Interval label per arm when the member set is a full box, else None."""
    members = np.asarray(members)
    parts = []
    size = 1
    for m in range(members.shape[1]):
        vals = np.unique(members[:, m])
        if vals[-1] - vals[0] + 1 != vals.shape[0]:
            return None
        size *= vals.shape[0]
        parts.append(
            str(int(vals[0])) if vals.shape[0] == 1
            else f"{int(vals[0])}:{int(vals[-1])}"
        )
    if size != members.shape[0]:
        return None
    return "[" + ",".join(parts) + "]"


def _pool_label(policies, member_idx):
    members = policies[np.asarray(member_idx)]
    label = _box_label(members)
    if label is not None:
        return label
    return "{" + ",".join(format_policy(p) for p in members) + "}"


@dataclass(frozen=True)
class PooledPartition:
    """A pooled-and-pruned partition of all K policies.

    Fields
    ------
    design : FactorialDesign
    pools : tuple of tuple of int
        Non-control pools as canonical policy indices, each sorted, the
        pools ordered by their minimal member.  Every pool lies within
        one treatment profile and is order convex.
    control_pool : tuple of int
        The control policy plus every pruned policy.
    pool_labels : tuple of str
        Interval labels like ``[1:3,0,1]`` (one entry per arm, ranges
        for pooled dosages); non-box pools fall back to an explicit
        policy list.
    signatures : tuple of frozenset
        Per pool, the support members whose spheres generated it; the
        pool's true effect is the sum of their marginal effects.
    """

    design: object
    pools: tuple
    control_pool: tuple
    pool_labels: tuple
    signatures: tuple

    @property
    def n_pools(self):
        return len(self.pools)

    def pool_of(self):
        """Array mapping policy index to pool index, -1 for control."""
        owner = np.full(self.design.n_policies, -1, dtype=int)
        for p, members in enumerate(self.pools):
            owner[list(members)] = p
        return owner

    def min_dosage_member(self, p):
        """Canonical index of pool p's minimal policy.

        Pools are generated as sphere intersections, which are closed
        under the componentwise minimum within a profile, so the member
        with the smallest canonical index is the unique minimum.
        """
        return min(self.pools[p])

    def to_json_dict(self):
        policies = enumerate_policies(self.design)
        return {
            "pools": [
                {
                    "label": self.pool_labels[p],
                    "policies": [policies[k].tolist() for k in members],
                }
                for p, members in enumerate(self.pools)
            ],
            "control_pool": [policies[k].tolist() for k in self.control_pool],
        }


def sphere(design, k):
    """Sphere of influence of a non-control policy.

    Returns the same-profile policies dominating ``k`` as intensity
    vectors in canonical order.  These are exactly the policies whose
    effect includes ``alpha_k``.
    """
    k = np.asarray(k, dtype=int)
    if not (k > 0).any():
        raise InvalidDesignError("the control policy has no sphere of influence")
    policy_index(design, k)  # range validation
    policies = enumerate_policies(design)
    same = np.all((policies > 0) == (k > 0), axis=1)
    dominating = np.all(policies >= k, axis=1)
    return policies[same & dominating]


def pool(design, s_alpha):
    """Maximal admissible partition generated by a marginal support.

    Parameters
    ----------
    s_alpha : iterable of int
        Canonical indices of the selected marginal coordinates.  The
        intercept index 0 is tolerated and ignored.  An empty support
        prunes everything into the control pool.

    Returns
    -------
    PooledPartition
    """
    policies = enumerate_policies(design)
    k_total = design.n_policies
    support = sorted({int(j) for j in s_alpha} - {0})
    if support and not 0 < support[0] <= support[-1] < k_total:
        raise InvalidDesignError(f"support indices outside [1, {k_total})")
    per_profile = Counter(profile_of(policies[j]) for j in support)
    oversized = [p for p, c in per_profile.items() if c > MAX_PROFILE_SUPPORT]
    if oversized:
        raise PoolSizeError(
            f"profile {sorted(oversized[0])} has {per_profile[oversized[0]]} "
            f"support members; atom enumeration capped at {MAX_PROFILE_SUPPORT}"
        )
    if support:
        sup = np.array(support)
        active = policies > 0
        same = np.all(active[:, None, :] == active[sup][None, :, :], axis=2)
        dominates = np.all(policies[:, None, :] >= policies[sup][None, :, :], axis=2)
        membership = same & dominates
    else:
        sup = np.empty(0, dtype=int)
        membership = np.zeros((k_total, 0), dtype=bool)
    groups = {}
    for k in range(k_total):
        groups.setdefault(membership[k].tobytes(), []).append(k)
    pools, signatures = [], []
    control = []
    for members in groups.values():
        sig = frozenset(sup[membership[members[0]]].tolist())
        if sig:
            pools.append(members)
            signatures.append(sig)
        else:
            control.extend(members)
    order = np.argsort([m[0] for m in pools]) if pools else []
    pools = [tuple(pools[i]) for i in order]
    signatures = [signatures[i] for i in order]
    labels = tuple(_pool_label(policies, m) for m in pools)
    return PooledPartition(
        design=design,
        pools=tuple(pools),
        control_pool=tuple(sorted(control)),
        pool_labels=labels,
        signatures=tuple(signatures),
    )


@dataclass(frozen=True)
class RuleCheck:
    """Outcome of one admissibility rule: a flag plus counterexamples."""

    passed: bool
    counterexamples: tuple


@dataclass(frozen=True)
class AdmissibilityReport:
    """Per-rule verdicts for the four admissibility requirements."""

    equal_effects: RuleCheck
    single_profile: RuleCheck
    order_convex: RuleCheck
    pooling_consistent: RuleCheck

    @property
    def passed(self):
        return all(
            check.passed
            for check in (self.equal_effects, self.single_profile,
                          self.order_convex, self.pooling_consistent)
        )


_MAX_EXAMPLES = 5


def validate_admissible(partition, beta, atol=1e-10):
    """Check a partition against the admissibility rules, given effects.

    Rules, in report order: (1) pooled policies have equal effects and
    pruned policies match the control effect; (2) every non-control
    pool lies within one treatment profile; (3) pools are order convex
    under dominance; (4) pooling is consistent along dosage steps: when
    a pool joins some policy to its neighbor one step down arm i, every
    dominated same-profile policy at the same arm-i dosage must also be
    pooled with its own step-down neighbor.

    Returns an :class:`AdmissibilityReport` with counterexamples (at
    most five per rule).
    """
    design = partition.design
    beta = np.asarray(beta, dtype=float)
    policies = enumerate_policies(design)
    owner = partition.pool_of()

    eq_bad = []
    groups = list(partition.pools) + [partition.control_pool]
    for members in groups:
        ref = beta[members[0]]
        for k in members[1:]:
            if abs(beta[k] - ref) > atol and len(eq_bad) < _MAX_EXAMPLES:
                eq_bad.append((members[0], k, float(ref), float(beta[k])))

    prof_bad = []
    for p, members in enumerate(partition.pools):
        profs = {profile_of(policies[k]) for k in members}
        if len(profs) > 1 and len(prof_bad) < _MAX_EXAMPLES:
            prof_bad.append((p, tuple(sorted(sorted(s) for s in profs))))

    dominance = np.all(policies[:, None, :] >= policies[None, :, :], axis=2)
    convex_bad = []
    for p, members in enumerate(partition.pools):
        inside = np.zeros(design.n_policies, dtype=bool)
        inside[list(members)] = True
        for a in members:
            for b in members:
                if not dominance[b, a]:
                    continue
                between = dominance[:, a] & dominance[b]
                outside = between & ~inside
                if outside.any() and len(convex_bad) < _MAX_EXAMPLES:
                    convex_bad.append((p, a, b, int(np.nonzero(outside)[0][0])))

    para_bad = []
    radices = np.array(design.dosages)
    for p, members in enumerate(partition.pools):
        member_set = set(members)
        for k in members:
            vec = policies[k]
            for arm in range(design.arm_count):
                if vec[arm] < 2:
                    continue  # the step below would change the profile
                down = vec.copy()
                down[arm] -= 1
                if policy_index(design, down) not in member_set:
                    continue
                # the pool joins (k - e_arm, k); scan dominated pairs
                same = np.all((policies > 0) == (vec > 0), axis=1)
                lower = same & dominance[k] & (policies[:, arm] == vec[arm])
                for j in np.nonzero(lower)[0]:
                    jd = policies[j].copy()
                    jd[arm] -= 1
                    j_down = policy_index(design, jd)
                    # both in one pool, or both pruned, is consistent
                    if owner[j] != owner[j_down]:
                        if len(para_bad) < _MAX_EXAMPLES:
                            para_bad.append((arm + 1, k, int(j), int(j_down)))

    return AdmissibilityReport(
        equal_effects=RuleCheck(not eq_bad, tuple(eq_bad)),
        single_profile=RuleCheck(not prof_bad, tuple(prof_bad)),
        order_convex=RuleCheck(not convex_bad, tuple(convex_bad)),
        pooling_consistent=RuleCheck(not para_bad, tuple(para_bad)),
    )
