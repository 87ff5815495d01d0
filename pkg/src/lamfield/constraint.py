"""The nonlinear constraint set K_C: membership, distance, nearest point.

K_C collects the states (rho*v, v, beta(rho)*v) with rho and |v| in
[1/C, C].  It is a smooth compact 4-parameter family (rho, v) in matrix
space; distance queries run multi-start local descent over that chart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .laminates import BetaFunction, triplet

__all__ = ["ConstraintParams", "member", "kc_membership", "kc_distance",
           "kc_proximal_defect"]


@dataclass(frozen=True)
class ConstraintParams:
    C: float
    beta: BetaFunction

    def __post_init__(self):
        if self.C <= 1.0:
            raise ValueError("C must exceed 1")

    def widen(self, eps):
        return ConstraintParams(self.C + eps, self.beta)


def member(rho, v, beta):
    """The state with rows (rho*v, v, beta(rho)*v)."""
    v = np.asarray(v, dtype=float)
    return triplet(rho * v, v, float(beta(rho)) * v)


def kc_membership(U, params, tol=1e-9):
    """Membership test with the projected density candidate.

    The candidate rho is (m.v)/(v.v) clamped to [1/C, C]; membership
    requires |m - rho v| <= tol, |w - beta(rho) v| <= tol and
    1/C - tol <= |v| <= C + tol.
    """
    if tol < 0:
        raise ValueError("tol must be >= 0")
    U = np.asarray(U, dtype=float)
    m, v, w = U[0], U[1], U[2]
    C = params.C
    nv = float(np.linalg.norm(v))
    if nv < 1.0 / C - tol or nv > C + tol:
        return False
    vv = float(v @ v)
    if vv <= 0.0:
        return False
    rho = float(np.clip((m @ v) / vv, 1.0 / C, C))
    if np.linalg.norm(m - rho * v) > tol:
        return False
    if np.linalg.norm(w - float(params.beta(rho)) * v) > tol:
        return False
    return True


def _chart_state(x, beta):
    rho, s, theta, phi = x
    u = np.array([np.sin(theta) * np.cos(phi),
                  np.sin(theta) * np.sin(phi),
                  np.cos(theta)])
    v = s * u
    return member(rho, v, beta)


def _chart_seed(U, C):
    """Projection-style seed (rho, |v|, direction angles) for the descent."""
    m, v, w = U[0], U[1], U[2]
    nv = np.linalg.norm(v)
    if nv < 1e-12:
        # degenerate velocity row: seed from w, then m, else e3
        for cand in (w, m, np.array([0.0, 0.0, 1.0])):
            if np.linalg.norm(cand) > 1e-12:
                v = cand
                nv = np.linalg.norm(v)
                break
    u = v / nv
    s = float(np.clip(nv, 1.0 / C, C))
    rho = float(np.clip((m @ v) / max(nv**2, 1e-300), 1.0 / C, C))
    theta = float(np.arccos(np.clip(u[2], -1.0, 1.0)))
    phi = float(np.arctan2(u[1], u[0]))
    return np.array([rho, s, theta, phi])


def kc_distance(U, params, n_starts=20, seed=0):
    """Frobenius distance to K_C and a nearest member.

    Multi-start local descent over the (rho, |v|, direction) chart,
    seeded from the projected candidate plus random restarts.  Returns
    (dist, nearest).
    """
    U = np.asarray(U, dtype=float)
    C, beta = params.C, params.beta

    def obj(x):
        return float(np.linalg.norm(U - _chart_state(x, beta)))

    bounds = [(1.0 / C, C), (1.0 / C, C), (-0.5, np.pi + 0.5), (None, None)]
    starts = [_chart_seed(U, C)]
    rng = np.random.default_rng(seed)
    for _ in range(n_starts - 1):
        starts.append(np.array([
            rng.uniform(1.0 / C, C),
            rng.uniform(1.0 / C, C),
            rng.uniform(0.0, np.pi),
            rng.uniform(-np.pi, np.pi),
        ]))
    best_x, best_f = None, np.inf
    for x0 in starts:
        res = minimize(obj, x0, method="L-BFGS-B", bounds=bounds)
        if res.fun < best_f:
            best_f, best_x = float(res.fun), res.x
    nearest = _chart_state(best_x, beta)
    return best_f, nearest


def kc_proximal_defect(values, params):
    """Cheap vectorized upper bound on the distance to K_C per state.

    Projects each state onto the chart candidate (clamped density and
    clamped velocity norm) and measures the Frobenius gap.  Exact zero on
    members; an upper bound elsewhere.  ``values`` has shape (..., 3, 3).
    """
    V = np.asarray(values, dtype=float)
    m, v, w = V[..., 0, :], V[..., 1, :], V[..., 2, :]
    C, beta = params.C, params.beta
    nv = np.linalg.norm(v, axis=-1)
    safe = np.maximum(nv, 1e-300)
    u = v / safe[..., None]
    s = np.clip(nv, 1.0 / C, C)
    vp = s[..., None] * u
    rho = np.clip(np.einsum("...i,...i->...", m, v) / np.maximum(nv**2, 1e-300),
                  1.0 / C, C)
    bw = np.asarray(beta(rho))
    gap = np.stack([m - rho[..., None] * vp,
                    v - vp,
                    w - bw[..., None] * vp], axis=-2)
    return np.linalg.norm(gap.reshape(*gap.shape[:-2], 9), axis=-1)
