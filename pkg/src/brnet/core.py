"""Discrete bounded-rational decision-making.

Free-energy (single context) and rate-distortion (many contexts) objectives,
their closed-form / fixed-point solutions, and a Blahut-Arimoto solver.
All quantities are in nats.
"""
from dataclasses import dataclass

import numpy as np
from numba import njit

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200_000

_SUM_TOL = 1e-12


class DimensionError(ValueError):
    """Arrays that should be paired have incompatible shapes."""


class InfiniteDivergenceError(ValueError):
    """A distribution puts mass where its reference distribution has none."""


def as_distribution(p, name="p"):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DimensionError(f"{name} must be a nonempty vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"{name} must have finite nonnegative entries")
    if abs(p.sum() - 1.0) > _SUM_TOL:
        raise ValueError(f"{name} must sum to 1 (got {p.sum()!r})")
    return p


def as_policy(policy, name="policy"):
    policy = np.asarray(policy, dtype=np.float64)
    if policy.ndim != 2 or policy.size == 0:
        raise DimensionError(f"{name} must be a nonempty matrix, got shape {policy.shape}")
    if not np.all(np.isfinite(policy)) or np.any(policy < 0):
        raise ValueError(f"{name} must have finite nonnegative entries")
    if np.any(np.abs(policy.sum(axis=1) - 1.0) > _SUM_TOL):
        raise ValueError(f"every row of {name} must sum to 1")
    return policy


def as_utility(u, name="utility", ndim=2):
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != ndim or u.size == 0:
        raise DimensionError(f"{name} must be a nonempty {ndim}-d array, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError(f"{name} must be finite")
    return u


def check_beta(beta):
    beta = float(beta)
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in the open interval (0, 1), got {beta}")
    return beta


def information_scale(beta):
    """Exponent scale (1 - beta) / beta multiplying the utility."""
    return (1.0 - beta) / beta


def maximizers(values, atol=0.0):
    """Indices of all entries within ``atol`` of the maximum (ties are reported, not broken)."""
    values = np.asarray(values, dtype=np.float64)
    return np.flatnonzero(values >= values.max() - atol)


def kl_divergence(p, q):
    """D_KL(p || q) in nats with 0 ln 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"shape mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        raise InfiniteDivergenceError("p is positive where q is zero")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def free_energy_value(p, prior, u, beta):
    """(1 - beta) <U>_p - beta D_KL(p || prior)."""
    p = as_distribution(p, "p")
    prior = as_distribution(prior, "prior")
    u = as_utility(u, "u", ndim=1)
    if not p.shape == prior.shape == u.shape:
        raise DimensionError(f"shape mismatch: p {p.shape}, prior {prior.shape}, u {u.shape}")
    beta = check_beta(beta)
    return (1.0 - beta) * float(p @ u) - beta * kl_divergence(p, prior)


def free_energy_solution(prior, u, beta):
    """Maximizer of :func:`free_energy_value`: the prior tilted by exp(u (1-beta)/beta)."""
    prior = as_distribution(prior, "prior")
    u = as_utility(u, "u", ndim=1)
    if prior.shape != u.shape:
        raise DimensionError(f"shape mismatch: prior {prior.shape}, u {u.shape}")
    beta = check_beta(beta)
    with np.errstate(divide="ignore"):
        logits = np.log(prior) + information_scale(beta) * u
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def marginal(px, policy):
    return px @ policy


def _check_pair(px, policy):
    px = as_distribution(px, "px")
    policy = as_policy(policy)
    if policy.shape[0] != px.shape[0]:
        raise DimensionError(f"policy has {policy.shape[0]} rows but px has {px.shape[0]} entries")
    return px, policy


def mutual_information(px, policy):
    """I(x, y) of the joint p(x) p(y|x), in nats."""
    px, policy = _check_pair(px, policy)
    return _mutual_information(px, policy, marginal(px, policy))


def _mutual_information(px, policy, py):
    joint = px[:, None] * policy
    support = joint > 0
    ratio = policy[support] / np.broadcast_to(py, policy.shape)[support]
    return float(np.sum(joint[support] * np.log(ratio)))


def rate_distortion_value(px, policy, u, beta):
    """(1 - beta) <U>_{p(x,y)} - beta I(x, y)."""
    px, policy = _check_pair(px, policy)
    u = as_utility(u)
    if u.shape != policy.shape:
        raise DimensionError(f"utility shape {u.shape} does not match policy shape {policy.shape}")
    beta = check_beta(beta)
    expected_u = float(np.sum(px[:, None] * policy * u))
    return (1.0 - beta) * expected_u - beta * mutual_information(px, policy)


@dataclass(frozen=True)
class SolverReport:
    policy: np.ndarray
    marginal: np.ndarray
    objective_trace: np.ndarray
    iterations: int
    converged: bool

    @property
    def objective(self):
        return float(self.objective_trace[-1])

    def to_dict(self):
        return {
            "policy": self.policy.tolist(),
            "marginal": self.marginal.tolist(),
            "objective_trace": self.objective_trace.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
        }


@njit(cache=True)
def _ba_loop(px, u, beta, log_q, tol, max_iter):
    nx, ny = u.shape
    scale = (1.0 - beta) / beta
    policy = np.empty((nx, ny))
    py = np.empty(ny)
    trace = np.empty(max_iter)
    converged = False
    n = 0
    while n < max_iter:
        # conditional update against the current marginal
        for x in range(nx):
            top = -np.inf
            for y in range(ny):
                v = log_q[y] + scale * u[x, y]
                policy[x, y] = v
                if v > top:
                    top = v
            z = 0.0
            for y in range(ny):
                e = np.exp(policy[x, y] - top)
                policy[x, y] = e
                z += e
            for y in range(ny):
                policy[x, y] /= z
        # marginal update
        for y in range(ny):
            acc = 0.0
            for x in range(nx):
                acc += px[x] * policy[x, y]
            py[y] = acc
        for y in range(ny):
            log_q[y] = np.log(py[y]) if py[y] > 0.0 else -np.inf
        # objective of the new (policy, marginal) pair
        eu = 0.0
        info = 0.0
        for x in range(nx):
            for y in range(ny):
                pxy = px[x] * policy[x, y]
                if pxy > 0.0:
                    eu += pxy * u[x, y]
                    info += pxy * (np.log(policy[x, y]) - log_q[y])
        trace[n] = (1.0 - beta) * eu - beta * info
        n += 1
        if n > 1 and abs(trace[n - 1] - trace[n - 2]) < tol:
            converged = True
            break
    return policy, py, trace[:n].copy(), converged


def blahut_arimoto(px, u, beta, init_marginal=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Solve the rate-distortion problem by alternating conditional and marginal updates.

    Parameters
    ----------
    px : array_like, shape (nx,)
        Context distribution.
    u : array_like, shape (nx, ny)
        Utility of action y in context x.
    beta : float
        Information price in (0, 1).
    init_marginal : array_like, shape (ny,), optional
        Starting marginal; must be strictly positive. Uniform by default.
    tol : float
        Stop once the objective changes by less than ``tol`` between iterations.
    max_iter : int
        Iteration budget.

    Returns
    -------
    SolverReport
        ``objective_trace[k]`` is the objective after iteration ``k + 1``.
    """
    px = as_distribution(px, "px")
    u = as_utility(u)
    if u.shape[0] != px.shape[0]:
        raise DimensionError(f"utility has {u.shape[0]} rows but px has {px.shape[0]} entries")
    beta = check_beta(beta)
    if init_marginal is None:
        init_marginal = np.full(u.shape[1], 1.0 / u.shape[1])
    q = as_distribution(init_marginal, "init_marginal")
    if q.shape[0] != u.shape[1]:
        raise DimensionError(f"init_marginal has {q.shape[0]} entries, utility has {u.shape[1]} columns")
    if np.any(q <= 0):
        raise ValueError("init_marginal must assign nonzero mass to every action")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")

    policy, py, trace, converged = _ba_loop(px, u, beta, np.log(q), float(tol), int(max_iter))
    for a in (policy, py, trace):
        a.setflags(write=False)
    return SolverReport(policy, py, trace, len(trace), bool(converged))
