"""Matrix states, laminate trees and convexity utilities.

A state is a 3x3 matrix whose rows stack a momentum-like vector m, a
velocity v and a flux w.  Binary split trees certify that a finitely
supported probability measure on states is a laminate: every split runs
along a direction of rank at most 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

__all__ = [
    "triplet",
    "rows",
    "BetaFunction",
    "Leaf",
    "Split",
    "LaminateTree",
    "rank2_defect",
    "verify_laminate",
    "barycenter",
    "flatten",
    "tree_atoms",
    "tree_depth",
    "map_atoms",
    "reversed_convexity_check",
]

DEFAULT_RANK_TOL = 1e-8


def triplet(m, v, w):
    """Stack three 3-vectors into a state matrix with rows (m, v, w)."""
    U = np.array([m, v, w], dtype=float)
    if U.shape != (3, 3):
        raise ValueError(f"expected three 3-vectors, got shape {U.shape}")
    if not np.all(np.isfinite(U)):
        raise ValueError("state matrix entries must be finite")
    return U


def rows(U):
    """Return the (m, v, w) rows of a state matrix."""
    U = np.asarray(U, dtype=float)
    return U[0], U[1], U[2]


class StrongConvexityError(ValueError):
    """Raised when a supplied convexity modulus fails the sampled check."""


@dataclass(frozen=True)
class BetaFunction:
    """A strongly convex function on (0, inf), normalized so beta(1) = 1.

    The callable ``fun`` is shifted by an additive constant at
    construction (the divergence identities are unaffected by constants).
    ``kappa`` is the quadratic convexity modulus below the chord; it is
    trusted but spot-checked on random triples at construction.
    """

    fun: Callable[[np.ndarray], np.ndarray]
    kappa: float
    derivative: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "beta"
    _offset: float = field(init=False, default=0.0, repr=False)

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        object.__setattr__(self, "_offset", float(self.fun(1.0)) - 1.0)
        self._spot_check()

    def __call__(self, x):
        return np.asarray(self.fun(x), dtype=float) - self._offset

    def deriv(self, x, step=1e-6):
        if self.derivative is not None:
            return np.asarray(self.derivative(x), dtype=float)
        x = np.asarray(x, dtype=float)
        return (self(x + step) - self(x - step)) / (2.0 * step)

    def _spot_check(self, n=1000, seed=20240, tol=1e-12):
        rng = np.random.default_rng(seed)
        x1 = rng.uniform(0.05, 5.0, size=n)
        x2 = rng.uniform(0.05, 5.0, size=n)
        lam = rng.uniform(0.0, 1.0, size=n)
        mix = lam * x1 + (1.0 - lam) * x2
        lhs = self(mix)
        rhs = lam * self(x1) + (1.0 - lam) * self(x2) \
            - self.kappa * lam * (1.0 - lam) * (x1 - x2) ** 2
        worst = float(np.max(lhs - rhs))
        if worst > tol:
            raise StrongConvexityError(
                f"kappa={self.kappa} overstated: sampled chord defect {worst:.3e}"
            )

    @staticmethod
    def quadratic():
        """The reference choice x -> x**2, strongly convex with kappa = 1."""
        return BetaFunction(fun=lambda x: np.asarray(x, dtype=float) ** 2,
                            kappa=1.0,
                            derivative=lambda x: 2.0 * np.asarray(x, dtype=float),
                            name="x^2")

    @staticmethod
    def from_poly(coeffs, kappa):
        """Polynomial beta from ascending coefficients, user-supplied kappa."""
        c = np.asarray(coeffs, dtype=float)
        dc = c[1:] * np.arange(1, len(c))

        def f(x):
            return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), c)

        def df(x):
            return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), dc)

        return BetaFunction(fun=f, kappa=float(kappa), derivative=df,
                            name=f"poly{list(c)}")


@dataclass(frozen=True)
class Leaf:
    atom: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "atom", np.asarray(self.atom, dtype=float))


@dataclass(frozen=True)
class Split:
    lam: float
    left: "LaminateTree"
    right: "LaminateTree"

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"split weight must be in (0,1), got {self.lam}")


LaminateTree = Union[Leaf, Split]


def rank2_defect(A, B):
    """Relative size of the smallest singular value of A - B.

    Returns sigma_min / sigma_max of the difference (0 for equal
    matrices).  A value below the rank tolerance certifies that the two
    states are connected along a direction of rank at most 2.
    """
    D = np.asarray(A, dtype=float) - np.asarray(B, dtype=float)
    s = np.linalg.svd(D, compute_uv=False)
    if s[0] <= 0.0:
        return 0.0
    return float(s[-1] / s[0])


def barycenter(tree):
    """Expectation of the measure certified by the tree."""
    if isinstance(tree, Leaf):
        return tree.atom.copy()
    return tree.lam * barycenter(tree.left) + (1.0 - tree.lam) * barycenter(tree.right)


def flatten(tree):
    """List of (weight, atom) pairs; weights are positive and sum to 1."""
    out = []

    def walk(node, w):
        if isinstance(node, Leaf):
            out.append((w, node.atom))
        else:
            walk(node.left, w * node.lam)
            walk(node.right, w * (1.0 - node.lam))

    walk(tree, 1.0)
    return out


def tree_atoms(tree):
    return [a for _, a in flatten(tree)]


def tree_depth(tree):
    if isinstance(tree, Leaf):
        return 0
    return 1 + max(tree_depth(tree.left), tree_depth(tree.right))


def map_atoms(tree, f):
    """Rebuild the tree with every leaf atom replaced by f(atom)."""
    if isinstance(tree, Leaf):
        return Leaf(f(tree.atom))
    return Split(tree.lam, map_atoms(tree.left, f), map_atoms(tree.right, f))


def verify_laminate(tree, rank_tol=DEFAULT_RANK_TOL):
    """Check the split-direction rank condition at every node.

    True iff every split connects its children's barycenters along a
    rank-<=2 line and the flattened weights are positive and sum to 1.
    A passing tree, flattened by collapsing splits in order, yields a
    family satisfying the inductive laminate condition.
    """
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")

    def walk(node):
        if isinstance(node, Leaf):
            return np.all(np.isfinite(node.atom))
        bl = barycenter(node.left)
        br = barycenter(node.right)
        if rank2_defect(bl, br) > rank_tol:
            return False
        return walk(node.left) and walk(node.right)

    if not walk(tree):
        return False
    weights = np.array([w for w, _ in flatten(tree)])
    if np.any(weights < 1e-15):
        return False
    return abs(float(weights.sum()) - 1.0) <= 1e-12


def reversed_convexity_check(beta, lam, x1, x2, tol=1e-12):
    """Chord inequality with a negative weight (reversed direction).

    For lam < 0 with lam*x1 + (1-lam)*x2 > 0, strong convexity flips into
    an upper bound on the extrapolated chord; this checks it at one triple.
    """
    if lam > 0:
        raise ValueError("lam must be <= 0 (use the chord check otherwise)")
    if x1 <= 0 or x2 <= 0:
        raise ValueError("x1, x2 must be positive")
    mix = lam * x1 + (1.0 - lam) * x2
    if mix <= 0:
        raise ValueError("lam*x1 + (1-lam)*x2 must be positive")
    lhs = lam * beta(x1) + (1.0 - lam) * beta(x2)
    rhs = beta(mix) + beta.kappa * lam * (1.0 - lam) * abs(x1 - x2) ** 2
    return bool(lhs <= rhs + tol)
