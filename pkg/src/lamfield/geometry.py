"""Decomposition of states into laminates supported near the constraint set.

The constructive cascade: a general state splits along a rank-2 line into
two states with aligned momentum rows (general step), each of those splits
into collinear triplets (parallel step), and collinear triplets resolve by
a scalar convexity split (collinear step).  The initial step decomposes a
pure-flux state (m = v = 0) into three members.  All scalar equations are
solved by bisection; strong convexity of beta makes the brackets sound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .constraint import ConstraintParams, kc_membership, member
from .laminates import (BetaFunction, Leaf, Split, barycenter, flatten,
                        map_atoms, triplet)

__all__ = [
    "DecompositionReport",
    "NoRootError",
    "EtaTooLargeError",
    "StaleRepresentationError",
    "decompose_initial",
    "decompose_collinear",
    "decompose_parallel",
    "decompose_general",
    "decompose_near_hull",
    "solve_surplus_s",
    "solve_deficit_mu",
    "required_C",
    "HModulus",
    "calibrate_h",
]

COLLINEAR_TOL = 1e-9
BISECT_ITERS = 200


class NoRootError(RuntimeError):
    """Bisection bracket failed to change sign (modulus likely overstated)."""


class EtaTooLargeError(RuntimeError):
    """No solution keeps the parameters inside the enlarged constraint set."""


class StaleRepresentationError(RuntimeError):
    """The shift from the supplied representation exceeds its trust radius."""


@dataclass
class DecompositionReport:
    tree: object
    enlargement: float
    cost: float

    @staticmethod
    def from_tree(tree, U, params):
        U = np.asarray(U, dtype=float)
        pairs = flatten(tree)
        cost = sum(w * np.linalg.norm(a - U) for w, a in pairs)
        need = max(required_C(a, params.beta) for _, a in pairs)
        return DecompositionReport(tree=tree,
                                   enlargement=max(0.0, need - params.C),
                                   cost=float(cost))


def required_C(atom, beta):
    """Minimal constant C for which an exact member atom lies in K_C."""
    atom = np.asarray(atom, dtype=float)
    m, v, w = atom[0], atom[1], atom[2]
    nv = float(np.linalg.norm(v))
    if nv <= 0.0:
        return np.inf
    rho = float(m @ v) / (nv * nv)
    if rho <= 0.0:
        return np.inf
    return max(nv, 1.0 / nv, rho, 1.0 / rho)


def _bisect(f, lo, hi):
    """Bracketing root solve; raises NoRootError without a sign change."""
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0.0:
        raise NoRootError(f"no sign change on [{lo}, {hi}]: f={flo:.3e},{fhi:.3e}")
    return float(brentq(f, lo, hi, xtol=1e-15, rtol=8.9e-16, maxiter=BISECT_ITERS))


def decompose_initial(U, beta):
    """Split a pure-flux state (rows 0, 0, w with |w| >= 1) into members.

    Order-3 laminate: weight 1/2 on (w, w, w) (density 1), and the
    complementary half split equally between (rho1*w, w, beta(rho1)*w) and
    (-3*rho2*w, -3*w, -3*beta(rho2)*w), where rho2 > 1 solves
    -beta(3*rho2 - 2) + 3*beta(rho2) = -2 and rho1 = 3*rho2 - 2.  Returns
    the report and the minimal constant C containing all atoms; the
    construction guarantees C <= max(C_beta, 4*|w|).
    """
    U = np.asarray(U, dtype=float)
    if np.linalg.norm(U[0]) > COLLINEAR_TOL or np.linalg.norm(U[1]) > COLLINEAR_TOL:
        raise ValueError("initial decomposition requires zero m and v rows")
    w = U[2]
    nw = float(np.linalg.norm(w))
    if nw < 1.0 - 1e-12:
        raise ValueError(f"initial decomposition requires |w| >= 1, got {nw}")

    kappa = beta.kappa

    def g(rho2):
        return -beta(3.0 * rho2 - 2.0) + 3.0 * beta(rho2) + 2.0

    hi = 1.0 + np.sqrt(2.0 / (3.0 * kappa)) * 1.125
    rho2 = _bisect(g, 1.0, hi)
    rho1 = 3.0 * rho2 - 2.0

    a_plus = member(1.0, w, beta)
    a1 = member(rho1, w, beta)
    a2 = member(rho2, -3.0 * w, beta)
    tree = Split(0.5, Leaf(a_plus), Split(0.5, Leaf(a1), Leaf(a2)))

    C = max(required_C(a, beta) for a in (a_plus, a1, a2))
    params = ConstraintParams(C, beta)
    report = DecompositionReport.from_tree(tree, U, params)
    return report, C


def solve_surplus_s(beta, alpha, eta):
    """Half-spread s of the symmetric surplus split.

    Solves beta(alpha+s)/2 + beta(alpha-s)/2 = beta(alpha) + eta for
    s >= 0 by bisection; strong convexity puts the root below
    sqrt(eta/kappa).  For beta = x**2 this is s = sqrt(eta) exactly.
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if eta == 0.0:
        return 0.0

    def f(s):
        return 0.5 * beta(alpha + s) + 0.5 * beta(alpha - s) - beta(alpha) - eta

    hi = np.sqrt(eta / beta.kappa) * 1.125
    if hi >= alpha:
        hi = alpha * (1.0 - 1e-9)
    if f(hi) < 0.0:
        raise EtaTooLargeError(
            f"surplus eta={eta} unreachable before the domain edge (alpha={alpha})")
    return _bisect(f, 0.0, hi)


def solve_surplus_lopsided(beta, alpha, eta, D):
    """Near-atom offset u of the lop-sided surplus split.

    One atom sits at the fixed far offset alpha + D (D may be negative),
    the other at alpha - u... the weights rebalance so the density mean
    stays alpha; u solves the chord equation and scales like eta/(kappa*D)
    for small eta, so the split collapses linearly as the surplus vanishes.
    For beta = x**2 the root is u = eta/D exactly.
    """
    if eta <= 0:
        raise ValueError("eta must be > 0")
    if D == 0:
        raise ValueError("D must be nonzero")

    def lam(u):
        return abs(D) / (abs(D) + u)

    def f(u):
        l = lam(u)
        rho_far = alpha + D
        rho_near = alpha - np.sign(D) * u
        return (1.0 - l) * beta(rho_far) + l * beta(rho_near) - beta(alpha) - eta

    hi = 1.125 * eta / (beta.kappa * abs(D))
    lo_rho = alpha - np.sign(D) * hi
    if lo_rho <= 0.0:
        raise EtaTooLargeError("lop-sided surplus leaves the beta domain")
    if f(hi) < 0.0:
        raise EtaTooLargeError(f"surplus eta={eta} unreachable at D={D}")
    return _bisect(f, 0.0, hi)


def solve_deficit_mu(beta, alpha, eta, d):
    """Weight parameter mu of the stretched deficit split at step size d.

    Solves (1+mu)*beta(alpha+mu*d) - mu*beta(alpha+(1+mu)*d)
    = beta(alpha) - eta by bisection; the left side falls below the right
    by at least kappa*mu*(1+mu)*d**2, which brackets the root.  For
    beta = x**2 the root satisfies mu*(1+mu)*d**2 = eta exactly.
    """
    if eta <= 0:
        raise ValueError("eta must be > 0 in the deficit branch")

    def g(mu):
        return ((1.0 + mu) * beta(alpha + mu * d)
                - mu * beta(alpha + (1.0 + mu) * d)
                - beta(alpha) + eta)

    q = eta / (beta.kappa * d * d)
    mu_hi = 0.5 * (-1.0 + np.sqrt(1.0 + 4.0 * q)) * 1.125
    lo_rho = min(alpha + mu_hi * d, alpha + (1.0 + mu_hi) * d)
    if lo_rho <= 0.0:
        raise EtaTooLargeError(f"deficit bracket leaves beta domain (d={d})")
    if g(mu_hi) > 0.0:
        raise EtaTooLargeError(f"deficit eta={eta} unreachable at d={d}")
    return _bisect(g, 0.0, mu_hi)


def _in_rho_range(rho, bound):
    return 1.0 / bound <= rho <= bound


def decompose_collinear(U, alpha, gamma, params, eps):
    """Resolve a fully collinear state (m, v, w) = (alpha, 1, gamma) * v.

    Surplus branch (gamma >= beta(alpha)): symmetric density split at
    fixed velocity.  Deficit branch: a stretched two-point split with one
    reversed velocity, searched over a geometric grid of step sizes.
    Atoms are exact members of K_{C+eps}; raises EtaTooLargeError when no
    admissible parameters exist (the caller's precision was too coarse).
    """
    U = np.asarray(U, dtype=float)
    beta = params.beta
    C = params.C
    bound = C + eps
    v = U[1]
    nv = float(np.linalg.norm(v))
    if not (1.0 / bound < nv < bound):
        raise EtaTooLargeError(f"velocity norm {nv} outside (1/{bound}, {bound})")
    if np.linalg.norm(U[0] - alpha * v) > 1e-7 * max(1.0, nv):
        raise ValueError("m row is not alpha*v")
    if np.linalg.norm(U[2] - gamma * v) > 1e-7 * max(1.0, nv):
        raise ValueError("w row is not gamma*v")

    eta = gamma - float(beta(alpha))
    if abs(eta) <= 1e-13:
        tree = Leaf(member(alpha, v, beta))
        return DecompositionReport.from_tree(tree, U, params)

    if not _in_rho_range(alpha, bound):
        raise EtaTooLargeError(f"density {alpha} outside [1/{bound},{bound}]")

    if eta > 0.0:
        # symmetric split first (minimal spread); if the sqrt(eta) spread
        # escapes the density bounds, fall back to a lop-sided split whose
        # far atom sits inside the admissible range and whose near atom
        # moves only linearly in eta.
        try:
            s = solve_surplus_s(beta, alpha, eta)
            rho1, rho2 = alpha + s, alpha - s
            if _in_rho_range(rho1, bound) and _in_rho_range(rho2, bound):
                tree = Split(0.5, Leaf(member(rho1, v, beta)),
                             Leaf(member(rho2, v, beta)))
                return DecompositionReport.from_tree(tree, U, params)
        except EtaTooLargeError:
            pass
        room_up = bound - alpha
        room_dn = alpha - 1.0 / bound
        D0 = 0.9 * (room_up if room_up >= room_dn else -room_dn)
        last_err = None
        for D in (D0 * 0.5 ** k for k in range(8)):
            if abs(D) < 1e-9:
                break
            try:
                u = solve_surplus_lopsided(beta, alpha, eta, D)
            except (EtaTooLargeError, NoRootError) as e:
                last_err = e
                continue
            rho_far = alpha + D
            rho_near = alpha - np.sign(D) * u
            if not (_in_rho_range(rho_far, bound) and _in_rho_range(rho_near, bound)):
                last_err = EtaTooLargeError("lop-sided surplus escapes bounds")
                continue
            lam_near = abs(D) / (abs(D) + u)
            tree = Split(1.0 - lam_near, Leaf(member(rho_far, v, beta)),
                         Leaf(member(rho_near, v, beta)))
            return DecompositionReport.from_tree(tree, U, params)
        raise EtaTooLargeError(f"surplus eta={eta}: no admissible split ({last_err})")

    # deficit branch: gamma = beta(alpha) - |eta|.  The step size d is
    # fixed (not eta-scaled) so that the split weight mu vanishes with
    # eta and the spread cost is continuous at the set; d shrinks
    # adaptively until the densities fit the enlarged bounds.
    eta = -eta
    room_up = bound - alpha
    room_dn = alpha - 1.0 / bound
    if max(room_up, room_dn) <= 0.0:
        raise EtaTooLargeError(f"density {alpha} already outside [1/{bound},{bound}]")
    d_first = 0.9 * (room_up if room_up >= room_dn else -room_dn)
    d_other = -0.9 * room_dn if d_first > 0 else 0.9 * room_up
    candidates = [d_first * 0.5 ** k for k in range(10)]
    if abs(d_other) > 1e-12:
        candidates += [d_other * 0.5 ** k for k in range(10)]
    last_err = None
    for d in candidates:
        try:
            mu = solve_deficit_mu(beta, alpha, eta, d)
        except (EtaTooLargeError, NoRootError) as e:
            last_err = e
            continue
        lam = 1.0 - mu
        if not 1e-12 < lam < 1.0:
            last_err = EtaTooLargeError(f"deficit weight degenerate (mu={mu})")
            continue
        tau1 = (2.0 - lam) / lam
        rho1, rho2 = alpha + mu * d, alpha + (1.0 + mu) * d
        if not (_in_rho_range(rho1, bound) and _in_rho_range(rho2, bound)):
            last_err = EtaTooLargeError(
                f"deficit densities {rho1:.4f},{rho2:.4f} escape bounds at d={d:.3g}")
            continue
        if not (1.0 / bound <= tau1 * nv <= bound):
            last_err = EtaTooLargeError(
                f"stretched velocity {tau1 * nv:.4f} escapes bounds at d={d:.3g}")
            continue
        a1 = member(rho1, tau1 * v, beta)
        a2 = member(rho2, -v, beta)
        tree = Split(lam, Leaf(a1), Leaf(a2))
        return DecompositionReport.from_tree(tree, U, params)
    raise EtaTooLargeError(f"deficit eta={eta}: no admissible step size ({last_err})")


def _fan_scales(balanced, nv, bound, score):
    """Candidate fan spreads ordered by a predicted-feasibility score.

    A fan of spread s moves the child velocity norm to sqrt(nv^2 + s^2),
    which must stay below the bound.  Within that cap, candidates range
    a few octaves around the balanced choice; the supplied score ranks
    them so the cheapest plausible spread is tried first.
    """
    cap = 0.97 * np.sqrt(max(bound * bound - nv * nv, 0.0))
    if cap <= 0.0:
        return []
    cands = {min(max(balanced * 2.0 ** k, 1e-12), cap) for k in range(-4, 5)}
    cands.add(cap)
    return sorted(cands, key=score)


def decompose_parallel(U, alpha, params, eps):
    """Split a state with m = alpha*v into two collinear triplets.

    The velocity fans out symmetrically in the plane spanned by v and the
    transverse part of w; the flux coefficients solve a 2x2 system in
    that basis.  The spread starts at the balanced value sqrt(|w_perp|)
    and widens adaptively until both collinear children resolve within
    the enlargement budget.
    """
    U = np.asarray(U, dtype=float)
    beta = params.beta
    v, w = U[1], U[2]
    nv = float(np.linalg.norm(v))
    if nv <= 0.0:
        raise ValueError("velocity row must be nonzero")
    vhat = v / nv
    r = w - float(w @ vhat) * vhat
    nr = float(np.linalg.norm(r))
    gamma_par = float(w @ vhat) / nv
    if nr <= 1e-13:
        return decompose_collinear(U, alpha, gamma_par, params, eps)

    rhat = r / nr
    bound = params.C + eps

    # wider fans shrink the flux mismatch nr/s handed to the collinear
    # step; the mild penalty keeps the spread near balanced when possible
    def score(s):
        return nr / s + 0.2 * s

    last_err = None
    for s in _fan_scales(np.sqrt(nr), nv, bound, score):
        v1, v2 = v + s * rhat, v - s * rhat
        mu_sum = 2.0 * float(w @ vhat) / nv
        mu_dif = 2.0 * nr / s
        mu1, mu2 = 0.5 * (mu_sum + mu_dif), 0.5 * (mu_sum - mu_dif)
        try:
            kids = []
            for vi, mui in ((v1, mu1), (v2, mu2)):
                child = triplet(alpha * vi, vi, mui * vi)
                rep = decompose_collinear(child, alpha, mui, params, eps)
                kids.append(rep.tree)
        except EtaTooLargeError as e:
            last_err = e
            continue
        tree = Split(0.5, kids[0], kids[1])
        return DecompositionReport.from_tree(tree, U, params)
    raise EtaTooLargeError(f"parallel split failed at every spread ({last_err})")


def decompose_general(U, params, eps):
    """Full cascade for a general state near the constraint set.

    Splits off the transverse part of the momentum row along a rank-2
    direction, producing two aligned children that feed the parallel
    step.  The plain ansatz keeps the flux row fixed (w1 = w2 = w); when
    that leaves a child with an unabsorbable flux deficit, the flux row
    fans inside the plane spanned by v and the transverse momentum
    direction (all three difference rows then lie in that plane, so the
    split still runs along a rank-2 line), cancelling the mismatch to
    first order.  Raises EtaTooLargeError if the enlargement budget eps
    cannot absorb the state's distance from the set.
    """
    U = np.asarray(U, dtype=float)
    m, v, w = U[0], U[1], U[2]
    nv = float(np.linalg.norm(v))
    bound = params.C + eps
    if not (1.0 / bound < nv < bound):
        raise EtaTooLargeError(f"velocity norm {nv} outside (1/{bound}, {bound})")
    vhat = v / nv
    q = m - float(m @ vhat) * vhat
    nq = float(np.linalg.norm(q))
    a = float(m @ vhat) / nv
    if nq <= 1e-13:
        return decompose_parallel(U, a, params, eps)

    qhat = q / nq
    beta = params.beta
    beta_a = abs(float(beta(max(a, 1e-6))))

    def score(s):
        return nq / s + beta_a * s

    scales = _fan_scales(np.sqrt(nq), nv, bound, score)
    attempts = [(scales[0], False)] + [(s, True) for s in scales]
    last_err = None
    for s, compensate in attempts:
        v1, v2 = v + s * qhat, v - s * qhat
        a1, a2 = a + nq / s, a - nq / s
        if a2 <= 0.0:
            last_err = EtaTooLargeError(f"density coefficient {a2:.3g} <= 0 at s={s:.3g}")
            continue
        if compensate:
            L2 = nv * nv + s * s
            t1, t2 = float(beta(a1)), float(beta(a2))
            c_q = ((t1 + t2) * L2 - 2.0 * float(w @ v)) / (2.0 * s)
            c_v = ((t1 - t2) * L2 - 2.0 * s * float(w @ qhat)) / (2.0 * nv * nv)
            dw = c_v * v + c_q * qhat
        else:
            dw = np.zeros(3)
        try:
            kids = []
            for vi, ai, wi in ((v1, a1, w + dw), (v2, a2, w - dw)):
                child = triplet(ai * vi, vi, wi)
                rep = decompose_parallel(child, ai, params, eps)
                kids.append(rep.tree)
        except EtaTooLargeError as e:
            last_err = e
            continue
        tree = Split(0.5, kids[0], kids[1])
        return DecompositionReport.from_tree(tree, U, params)
    raise EtaTooLargeError(f"general split failed at every spread ({last_err})")


def decompose_near_hull(U, representation, params, eps, delta=None):
    """Decompose a state known to sit near the hull of the constraint set.

    The representation certifies U = sum(lam_i * A_i) + shift with atoms
    A_i in K_C.  Every atom is re-decomposed at A_i + shift by the general
    cascade and grafted in place; split differences are unchanged by the
    common shift, so the rank certificates survive.
    """
    U = np.asarray(U, dtype=float)
    shift = U - barycenter(representation)
    ns = float(np.linalg.norm(shift))
    if delta is not None and ns >= delta:
        raise StaleRepresentationError(
            f"shift {ns:.3e} exceeds the representation trust radius {delta:.3e}")

    def graft(node):
        if isinstance(node, Leaf):
            return decompose_general(node.atom + shift, params, eps).tree
        return Split(node.lam, graft(node.left), graft(node.right))

    tree = graft(representation)
    return DecompositionReport.from_tree(tree, U, params)


@dataclass(frozen=True)
class HModulus:
    """Calibrated surrogate for the spread-versus-distance modulus.

    Strictly increasing with h(0) = 0, of the form a*sqrt(t) + b*t with
    a, b > 0, fitted as an upper envelope of observed decomposition costs.
    """

    a: float
    b: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.a * np.sqrt(np.maximum(t, 0.0)) + self.b * np.maximum(t, 0.0)


def calibrate_h(params, eps=0.5, t_grid=None, n_per_t=200, seed=7,
                coverage=0.99):
    """Fit the cost envelope by sampling states at controlled offsets.

    For each offset t, random members are perturbed by t in a random
    Frobenius direction, the cascade runs, and the spread cost is
    recorded; the envelope a*sqrt(t) + b*t is scaled to cover the given
    quantile of cost/fit ratios.
    """
    if t_grid is None:
        t_grid = np.geomspace(1e-6, 0.25, 8)
    rng = np.random.default_rng(seed)
    C, beta = params.C, params.beta
    ts, costs = [], []
    margin = 0.25
    for t in t_grid:
        for _ in range(n_per_t):
            rho = rng.uniform(1.0 / C + margin, C - margin)
            nv = rng.uniform(1.0 / C + margin, C - margin)
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            G = rng.normal(size=(3, 3))
            G /= np.linalg.norm(G)
            U = member(rho, nv * u, beta) + t * G
            try:
                rep = decompose_general(U, params, eps)
            except EtaTooLargeError:
                continue
            ts.append(t)
            costs.append(rep.cost)
    ts = np.asarray(ts)
    costs = np.asarray(costs)
    A = np.stack([np.sqrt(ts), ts], axis=1)
    coef, *_ = np.linalg.lstsq(A, costs, rcond=None)
    a0, b0 = max(coef[0], 1e-6), max(coef[1], 1e-6)
    fit = a0 * np.sqrt(ts) + b0 * ts
    scale = float(np.quantile(costs / fit, coverage))
    scale = max(scale, 1.0)
    return HModulus(a=a0 * scale, b=b0 * scale)
