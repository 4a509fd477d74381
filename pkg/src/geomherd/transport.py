"""Optimal transport primitives for discrete W1 between small histograms.

The exact solver is the network simplex from POT, called through its
Cython entry point to avoid per-call overhead. Every exact solution is
checked against the dual potentials (complementary slackness), so a
returned cost is a certified optimum up to ``CERT_TOL``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

CERT_TOL = 1e-9
MASS_TOL = 1e-9

# POT imports every array backend it can find; none of them are needed here.
for _name in ("PYTORCH", "JAX", "CUPY", "TENSORFLOW"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_name}", "1")

_EMD = None


def _emd_c():
    global _EMD
    if _EMD is None:
        from ot.lp.emd_wrap import emd_c

        _EMD = emd_c
    return _EMD


class TransportError(RuntimeError):
    """Raised when an exact LP fails or its optimality certificate does not hold."""


class SinkhornConvergenceError(RuntimeError):
    """Raised when Sinkhorn iterations stop before the marginals are matched."""

    def __init__(self, message: str, marginal_gap: float):
        super().__init__(message)
        self.marginal_gap = marginal_gap


@dataclass
class TransportResult:
    cost: float
    plan: np.ndarray
    u: np.ndarray | None = None
    v: np.ndarray | None = None


def _check_masses(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("histograms must be 1-d")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("histograms must be non-negative")
    sa, sb = a.sum(), b.sum()
    if abs(sa - sb) > MASS_TOL * max(1.0, sa):
        raise ValueError(f"mass mismatch: {sa!r} vs {sb!r}")


def certify(a, b, C, plan, u, v, tol: float = CERT_TOL) -> float:
    """Check primal feasibility, dual feasibility and zero duality gap.

    Returns the duality gap. Raises :class:`TransportError` if any check
    fails at tolerance ``tol`` (scaled by the cost range).
    """
    scale = max(1.0, float(np.max(np.abs(C))) if C.size else 1.0)
    if np.any(plan < -tol):
        raise TransportError("negative plan entry")
    if np.max(np.abs(plan.sum(1) - a)) > tol or np.max(np.abs(plan.sum(0) - b)) > tol:
        raise TransportError("plan marginals do not match")
    slack = C - u[:, None] - v[None, :]
    if np.min(slack) < -tol * scale:
        raise TransportError(f"dual infeasible (min reduced cost {np.min(slack):.3e})")
    primal = float(np.sum(plan * C))
    dual = float(a @ u + b @ v)
    gap = abs(primal - dual)
    if gap > tol * scale:
        raise TransportError(f"duality gap {gap:.3e} exceeds tolerance")
    return gap


def transport_cost(a, b, C, check: bool = True) -> TransportResult:
    """Exact min-cost transport between histograms ``a`` and ``b``.

    Parameters
    ----------
    a, b : array_like
        Non-negative masses with equal totals.
    C : array_like, shape (len(a), len(b))
        Ground cost.
    check : bool
        Verify the solution with the dual certificate.

    Returns
    -------
    TransportResult
        Cost, plan on the full (unstripped) index sets, and dual potentials
        on the positive-mass entries (zero elsewhere).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    C = np.asarray(C, dtype=float)
    _check_masses(a, b)
    if C.shape != (a.size, b.size):
        raise ValueError(f"cost shape {C.shape} does not match ({a.size}, {b.size})")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")

    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    plan = np.zeros((a.size, b.size))
    u = np.zeros(a.size)
    v = np.zeros(b.size)
    if ia.size == 0:
        return TransportResult(0.0, plan, u, v)
    aa = a[ia]
    bb = b[ib] * (aa.sum() / b[ib].sum())
    Cs = np.ascontiguousarray(C[np.ix_(ia, ib)])
    if ia.size == 1 or ib.size == 1:
        G = np.outer(aa, bb) / aa.sum()
        if ia.size == 1:
            us, vs = np.zeros(1), Cs[0].copy()
        else:
            us, vs = Cs[:, 0].copy(), np.zeros(1)
    else:
        G, _, us, vs, code = _emd_c()(aa, bb, Cs, 100000, 1)
        if code != 1:
            raise TransportError(f"network simplex returned status {code}")
    plan[np.ix_(ia, ib)] = G
    u[ia] = us
    v[ib] = vs
    cost = float(np.sum(G * Cs))
    if check:
        certify(aa, bb, Cs, G, us, vs)
    return TransportResult(cost, plan, u, v)


def reduced_cost(a: np.ndarray, b: np.ndarray, C: np.ndarray, check: bool = True) -> float:
    """Low-overhead exact cost for strictly positive, mass-balanced inputs.

    Used on the hot path of the curvature loop; callers guarantee
    ``a > 0``, ``b > 0`` and ``a.sum() == b.sum()``.
    """
    if a.size == 1 or b.size == 1:
        return float(np.dot(C[0], b) if a.size == 1 else np.dot(a, C[:, 0]))
    C = np.ascontiguousarray(C)
    G, cost, u, v, code = _emd_c()(a, b, C, 100000, 1)
    if code != 1:
        raise TransportError(f"network simplex returned status {code}")
    cost = float(np.sum(G * C))
    if check:
        scale = max(1.0, float(C.max()))
        if float((C - u[:, None] - v[None, :]).min()) < -CERT_TOL * scale:
            raise TransportError("dual infeasible")
        if abs(cost - float(a @ u + b @ v)) > CERT_TOL * scale:
            raise TransportError("duality gap exceeds tolerance")
    return cost


def cancel_common_mass(a, b):
    """Remove mass shared by ``a`` and ``b`` at the same point.

    For a metric ground cost the optimal transport cost is unchanged,
    because shared mass can stay in place at zero cost.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m = np.minimum(a, b)
    return a - m, b - m


def w1_metric(a, b, D, check: bool = True) -> float:
    """W1 between histograms on a common point set with metric ``D``.

    Shared mass is cancelled first, so the LP only sees the points where
    the two measures differ.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_masses(a, b)
    pa, pb = cancel_common_mass(a, b)
    ia = np.flatnonzero(pa > MASS_TOL * 1e-3)
    ib = np.flatnonzero(pb > MASS_TOL * 1e-3)
    if ia.size == 0 or ib.size == 0:
        return 0.0
    D = np.asarray(D, dtype=float)
    sub = D[np.ix_(ia, ib)]
    return transport_cost(pa[ia], pb[ib] * (pa[ia].sum() / pb[ib].sum()), sub, check=check).cost


def sinkhorn(
    a,
    b,
    C,
    reg: float,
    max_iter: int = 100000,
    tol: float = 1e-10,
    eps_scaling: bool = True,
) -> TransportResult:
    """Entropic transport in the log domain.

    Returns the transport cost ``<plan, C>`` of the entropic plan (the
    entropy term is not included). When ``eps_scaling`` is set the
    regularisation is annealed geometrically from the cost range down to
    ``reg`` with warm-started potentials.

    Raises
    ------
    SinkhornConvergenceError
        If the L1 marginal error is still above ``tol`` after ``max_iter``
        total iterations.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    C = np.asarray(C, dtype=float)
    _check_masses(a, b)
    if reg <= 0:
        raise ValueError("reg must be positive")
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    aa, bb = a[ia], b[ib] * (a[ia].sum() / b[ib].sum())
    Cs = C[np.ix_(ia, ib)]
    la, lb = np.log(aa), np.log(bb)

    top = max(float(Cs.max() - Cs.min()), reg)
    if eps_scaling and top > reg:
        n = int(np.ceil(np.log(top / reg) / np.log(2.0)))
        schedule = list(top * 0.5 ** np.arange(n)) + [reg]
    else:
        schedule = [reg]

    f = np.zeros(aa.size)
    g = np.zeros(bb.size)
    used = 0
    gap = np.inf
    for k, eps in enumerate(schedule):
        last = k == len(schedule) - 1
        inner_tol = tol if last else max(tol, 1e-6)
        while used < max_iter:
            f = eps * (la - logsumexp((g[None, :] - Cs) / eps, axis=1))
            g = eps * (lb - logsumexp((f[:, None] - Cs) / eps, axis=0))
            used += 1
            if used % 10 == 0 or used >= max_iter:
                logP = (f[:, None] + g[None, :] - Cs) / eps
                gap = float(np.abs(np.exp(logsumexp(logP, axis=1)) - aa).sum())
                if gap <= inner_tol:
                    break
        if used >= max_iter and gap > tol:
            raise SinkhornConvergenceError(
                f"Sinkhorn did not converge at reg={eps:.3g} (marginal gap {gap:.3e})", gap
            )
    P = np.exp((f[:, None] + g[None, :] - Cs) / reg)
    plan = np.zeros((a.size, b.size))
    plan[np.ix_(ia, ib)] = P
    return TransportResult(float(np.sum(P * Cs)), plan)


def sinkhorn_w1(a, b, D, reg: float, **kw) -> float:
    """Entropic approximation of W1 (transport cost of the entropic plan)."""
    return sinkhorn(a, b, D, reg, **kw).cost
