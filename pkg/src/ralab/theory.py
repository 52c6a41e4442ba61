"""Information-theoretic accuracy bounds on finite joint distributions.

Works with exact probability tables over three finite variables: the class
label Y, the self-supervised label Ys, and the attacked image Xa. Entropies
and mutual informations are exact sums in nats; the accuracy upper bound
inverts Q(e) = H(e) + e*log(n-1) by bisection, and the bound-comparison
report contrasts predicting from Xa alone against predicting from (Ys, Xa).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, UsageError

_SUM_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteJoint:
    """Exact joint probability table p(y, ys, xa), axes in that order."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 3:
            raise DataError(f"joint table must be 3-D (y, ys, xa), got shape {t.shape}")
        if np.any(t < 0.0):
            raise DataError("joint table has negative entries")
        if abs(t.sum() - 1.0) > _SUM_TOL:
            raise DataError(f"joint table sums to {t.sum()!r}, not 1")
        object.__setattr__(self, "table", t)

    @property
    def sizes(self):
        return self.table.shape


def entropy(p) -> float:
    """Shannon entropy in nats; 0*log(0) := 0."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if np.any(p < 0.0) or abs(p.sum() - 1.0) > _SUM_TOL:
        raise UsageError("entropy needs a normalized distribution")
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def mutual_information(joint) -> float:
    """I(A;B) in nats from a 2-D joint table.

    Computed as the direct sum p*log(p/(pa*pb)) over nonzero cells, which is
    term-exact (0) for deterministic couplings instead of leaving entropy
    cancellation residue.
    """
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2:
        raise UsageError(f"mutual_information needs a 2-D table, got shape {p.shape}")
    if np.any(p < 0.0) or abs(p.sum() - 1.0) > _SUM_TOL:
        raise UsageError("mutual_information needs a normalized table")
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    mask = p > 0.0
    terms = np.zeros_like(p)
    prod = (pa * pb)[mask]
    terms[mask] = p[mask] * np.log(p[mask] / prod)
    return float(terms.sum())


def conditional_mi(joint) -> float:
    """I(A;B|C) in nats from a 3-D joint table with axes (a, b, c).

    Direct sum p*log((p/p_ac) * (p_c/p_bc)) over nonzero cells. The factor
    grouping lets both ratios cancel exactly when B is a deterministic
    function of C, so that case yields 0.0 exactly.
    """
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 3:
        raise UsageError(f"conditional_mi needs a 3-D table, got shape {p.shape}")
    if np.any(p < 0.0) or abs(p.sum() - 1.0) > _SUM_TOL:
        raise UsageError("conditional_mi needs a normalized table")
    pac = p.sum(axis=1)          # (A, C)
    pbc = p.sum(axis=0)          # (B, C)
    pc = pbc.sum(axis=0)         # (C,), via pbc so zero rows stay exact
    total = 0.0
    nz = np.argwhere(p > 0.0)
    ratios = np.empty(len(nz))
    probs = np.empty(len(nz))
    for k, (a, b, c) in enumerate(nz):
        ratios[k] = (p[a, b, c] / pac[a, c]) * (pc[c] / pbc[b, c])
        probs[k] = p[a, b, c]
    if len(nz):
        total = float((probs * np.log(ratios)).sum())
    return total


def q_function(eps_p: float, n: int) -> float:
    """Q(e) = H(e) + e*log(n-1) in nats, defined on [0, 1 - 1/n]."""
    if n < 2:
        raise UsageError("q_function needs n >= 2")
    hi = 1.0 - 1.0 / n
    if eps_p < -1e-15 or eps_p > hi + 1e-15:
        raise UsageError(f"q_function argument {eps_p} outside [0, {hi}]")
    eps_p = min(max(eps_p, 0.0), 1.0)
    h = 0.0
    if 0.0 < eps_p < 1.0:
        h = -eps_p * math.log(eps_p) - (1.0 - eps_p) * math.log(1.0 - eps_p)
    return h + eps_p * math.log(n - 1)


def q_inverse(v: float, n: int, tol: float = 1e-12) -> float:
    """Invert Q on [0, 1 - 1/n] by bisection to absolute tolerance tol.

    Raises for v outside [0, log n]; callers that need clamping (the Fano
    bound) clamp before calling.
    """
    if n < 2:
        raise UsageError("q_inverse needs n >= 2")
    ln_n = math.log(n)
    if v < -1e-12 or v > ln_n + 1e-12:
        raise UsageError(f"q_inverse argument {v} outside [0, {ln_n}]")
    v = min(max(v, 0.0), ln_n)
    lo, hi = 0.0, 1.0 - 1.0 / n
    if v <= 0.0:
        return 0.0
    # Q is flat at the right endpoint (Q' -> 0), where bisection on the value
    # loses eps accuracy; Q(hi) = log n algebraically, so return hi directly.
    if v >= ln_n:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if q_function(mid, n) < v:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class FanoBound:
    """Accuracy upper bound derived from Fano's inequality."""

    n: int
    entropy_y: float
    mi: float
    epsilon_p: float
    accuracy_upper: float


def fano_upper_bound(mi: float, entropy_y: float, n: int) -> FanoBound:
    """Upper bound on accuracy when predicting an n-way Y from I nats of evidence.

    The bisection argument is H(Y) - I, clamped: values <= 0 mean full
    information (bound 1); values >= log n mean no information (bound 1/n).
    """
    if n < 2:
        raise UsageError("fano_upper_bound needs n >= 2")
    if mi < 0.0:
        raise UsageError("mutual information must be non-negative")
    arg = entropy_y - mi
    if arg <= 0.0:
        eps = 0.0
    elif arg >= math.log(n):
        eps = 1.0 - 1.0 / n
    else:
        eps = q_inverse(arg, n)
    return FanoBound(n=n, entropy_y=entropy_y, mi=mi, epsilon_p=eps,
                     accuracy_upper=1.0 - eps)


@dataclass(frozen=True)
class BoundComparison:
    """Report comparing accuracy bounds with and without the true SSL label."""

    mi_y_xa: float
    mi_y_ys_xa: float
    cmi: float
    c1: float
    c2: float
    verdict: bool
    uniform_y: bool
    warnings: tuple = field(default_factory=tuple)


def theorem1_check(joint: DiscreteJoint) -> BoundComparison:
    """Compare the Fano accuracy bounds c1 (from Xa) and c2 (from Ys and Xa).

    The verdict asserts c2 > c1 whenever I(Y;Ys|Xa) > 1e-9. A non-uniform Y
    marginal violates the uniformity assumption; the report still computes
    but flags it.
    """
    p = joint.table
    ny, ns, nx = p.shape
    p_y = p.sum(axis=(1, 2))
    uniform = bool(np.allclose(p_y, 1.0 / ny, atol=1e-9))
    warnings = () if uniform else ("Y marginal is not uniform; bound assumption violated",)

    h_y = entropy(p_y)
    mi_y_xa = mutual_information(p.sum(axis=1))
    # Y against the joined variable (Ys, Xa)
    mi_y_ys_xa = mutual_information(p.reshape(ny, ns * nx))
    # I(Y;Ys|Xa): condition on the xa axis
    cmi = conditional_mi(p)

    c1 = fano_upper_bound(mi_y_xa, h_y, ny).accuracy_upper
    c2 = fano_upper_bound(mi_y_ys_xa, h_y, ny).accuracy_upper
    verdict = (c2 > c1) if cmi > 1e-9 else True
    return BoundComparison(mi_y_xa=mi_y_xa, mi_y_ys_xa=mi_y_ys_xa, cmi=cmi,
                           c1=c1, c2=c2, verdict=verdict, uniform_y=uniform,
                           warnings=warnings)


def deterministic_ssl_joint(p_y_xa, ys_of_xa) -> DiscreteJoint:
    """Joint where Ys is a deterministic function of Xa (the attacked-label case)."""
    p = np.asarray(p_y_xa, dtype=np.float64)
    ys_of_xa = np.asarray(ys_of_xa, dtype=int)
    ny, nx = p.shape
    ns = int(ys_of_xa.max()) + 1
    table = np.zeros((ny, ns, nx))
    for xa in range(nx):
        table[:, ys_of_xa[xa], xa] = p[:, xa]
    return DiscreteJoint(table)
