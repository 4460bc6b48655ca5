"""Optimal stabilizing allocation solvers.

Two engines back every allocation problem:

* ``lmi_box_maximize`` solves  max c'u  s.t.  diag(u) <= B,  l <= u <= h
  for symmetric positive-definite B by eigenvector cutting planes: the
  most-violated eigenvector w of B - diag(u) yields the valid cut
  sum_i w_i^2 u_i <= w'Bw, and the relaxation is re-solved as a linear
  program until the matrix constraint holds. Because the LP bound equals the
  final feasible objective, the relative optimality gap at termination is 0.

* ``spectral_box_minimize`` handles the nonconvex route
  min c'v  s.t.  rho(diag(p0 - p1*v) K) <= 1,  0 <= v <= vmax
  by sequential linear programming on the exact spectral-radius gradient
  (built from the left and right Perron vectors), with a feasibility-restore
  step that rescales the diagonal back onto the rho = 1 surface, and
  multistart from random positive directions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse
import scipy.sparse.csgraph

from .model import (ContactStructure, DiseaseParams, EpidemicState,
                    NetworkInstance, StabilityCertificate,
                    build_demographic_coupling, build_flow_matrix,
                    check_decay_certificate, compute_b1, max_certificate_rate)


class InfeasibleAllocationError(RuntimeError):
    """No allocation in the box certifies the requested decay rate."""


class SolverError(RuntimeError):
    """The solver failed to converge; distinct from provable infeasibility."""


class NotPositiveDefiniteError(ValueError):
    """Coupling matrix is not positive definite; use the bilinear path."""


@dataclass
class SolverStats:
    iterations: int = 0
    cuts: int = 0
    min_eigenvalue: float = np.nan
    spectral_radius: float = np.nan
    gap: float = 0.0
    restarts: int = 0
    converged: bool = True
    method: str = ""


@dataclass
class AllocationProblem:
    """Stabilizing-allocation data in reduced form.

    coupling is the symmetric mobility Gram matrix (or its Kronecker product
    with the intrinsic connectivity); b1 collapses the infection chain at the
    target decay rate; the transformed variable u = N b1 (s0 - psi v) lives in
    the box [(1-psi) s0 N b1, s0 N b1].
    """

    coupling: np.ndarray
    b1: np.ndarray
    s0: np.ndarray
    populations: np.ndarray
    psi: float
    alpha: float
    state: Optional[EpidemicState] = None
    net: Optional[NetworkInstance] = None
    params: Optional[DiseaseParams] = None
    contacts: Optional[ContactStructure] = None

    def __post_init__(self):
        self.coupling = np.asarray(self.coupling, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.s0 = np.asarray(self.s0, dtype=float)
        self.populations = np.asarray(self.populations, dtype=float)
        if np.any(self.b1 <= 0):
            raise ValueError("b1 must be positive (no transmission path?)")
        if self.psi <= 0:
            raise ValueError("a zero-efficacy vaccine cannot stabilize anything")

    @property
    def size(self) -> int:
        return self.s0.shape[0]

    def box_lower(self) -> np.ndarray:
        return (1 - self.psi) * self.s0 * self.populations * self.b1

    def box_upper(self) -> np.ndarray:
        return self.s0 * self.populations * self.b1


@dataclass
class BilinearIterate:
    """Allocation plus the positive direction certifying discrete stability."""

    v: np.ndarray
    d: np.ndarray


@dataclass
class AllocationResult:
    v: np.ndarray
    u: np.ndarray
    doses: float
    dose_vector: np.ndarray
    certificate: StabilityCertificate
    stats: SolverStats
    alpha: float
    direction: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# LMI engine
# ---------------------------------------------------------------------------

def lmi_box_maximize(bound: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                     weights: np.ndarray, *, violation_tol: float = 1e-9,
                     max_iter: int = 5000) -> tuple[np.ndarray, SolverStats]:
    """Maximize weights'u subject to diag(u) <= bound and lower <= u <= upper.

    bound must be symmetric. The violation tolerance is relative to the
    spectral norm of bound. Raises InfeasibleAllocationError when even the
    lower box corner violates the matrix constraint.
    """
    bound = 0.5 * (bound + bound.T)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    weights = np.asarray(weights, dtype=float)
    scale = max(1.0, float(np.max(np.abs(scipy.linalg.eigvalsh(bound)))))
    tol_abs = violation_tol * scale

    floor_eig = scipy.linalg.eigvalsh(bound - np.diag(lower))[0]
    if floor_eig < -tol_abs:
        raise InfeasibleAllocationError(
            "even the maximal allocation violates the matrix constraint; "
            "the requested decay rate is unachievable")

    def min_eig(u: np.ndarray) -> tuple[float, np.ndarray]:
        evals, evecs = scipy.linalg.eigh(bound - np.diag(u),
                                         subset_by_index=[0, 0])
        return float(evals[0]), evecs[:, 0]

    cut_rows: list[np.ndarray] = []
    cut_rhs: list[float] = []
    u = upper.copy()
    bounds = list(zip(lower, upper))
    objective = -weights / max(1.0, float(np.abs(weights).max()))
    lp_options = {"primal_feasibility_tolerance": 1e-9,
                  "dual_feasibility_tolerance": 1e-9}
    stalled = False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        lam, w = min_eig(u)
        if lam >= -tol_abs:
            return u, SolverStats(iterations=iteration, cuts=len(cut_rows),
                                  min_eigenvalue=lam, gap=0.0,
                                  converged=True, method="lmi-cutting-plane")
        row = w * w
        rhs = float(w @ bound @ w)
        # the known-feasible lower corner must stay inside every cut
        rhs = max(rhs, float(row @ lower))
        cut_rows.append(row)
        cut_rhs.append(rhs)
        res = scipy.optimize.linprog(objective, A_ub=np.array(cut_rows),
                                     b_ub=np.array(cut_rhs), bounds=bounds,
                                     method="highs", options=lp_options)
        if res.status == 2:
            raise InfeasibleAllocationError("cut system infeasible within the box")
        if not res.success:
            raise SolverError(f"inner linear program failed: {res.message}")
        if np.max(np.abs(res.x - u)) < 1e-13 * max(1.0, float(np.abs(u).max())):
            stalled = True
            u = res.x
            break
        u = res.x
    if not stalled and iteration == max_iter:
        raise SolverError(
            f"cutting-plane loop did not converge in {max_iter} iterations")

    # The LP vertex satisfies the cut model to solver precision but may sit
    # a hair outside the matrix constraint. Restore exact feasibility by a
    # line search toward the feasible lower corner (lambda_min is monotone
    # along that segment), giving up an objective sliver recorded as the gap.
    bound_obj = float(weights @ u)
    lo_t, hi_t = 0.0, 1.0
    for _ in range(80):
        mid = 0.5 * (lo_t + hi_t)
        lam_mid, _ = min_eig(u + mid * (lower - u))
        if lam_mid >= -tol_abs:
            hi_t = mid
        else:
            lo_t = mid
        if hi_t - lo_t < 1e-14:
            break
    u = u + hi_t * (lower - u)
    lam, _ = min_eig(u)
    achieved = float(weights @ u)
    gap = (bound_obj - achieved) / max(1.0, abs(bound_obj))
    if lam < -2 * tol_abs:
        raise SolverError("polish step failed to restore matrix feasibility")
    return u, SolverStats(iterations=iteration, cuts=len(cut_rows),
                          min_eigenvalue=lam, gap=gap, converged=True,
                          method="lmi-cutting-plane")


# ---------------------------------------------------------------------------
# bilinear engine
# ---------------------------------------------------------------------------

def _perron(mat: np.ndarray) -> tuple[float, np.ndarray]:
    """Spectral radius and (nonnegative, sum-1) Perron vector."""
    vals, vecs = np.linalg.eig(mat)
    k = int(np.argmax(vals.real))
    rho = float(vals[k].real)
    d = np.abs(vecs[:, k].real)
    total = d.sum()
    d = d / total if total > 0 else np.full(mat.shape[0], 1.0 / mat.shape[0])
    return max(rho, 0.0), d


def spectral_box_minimize(K: np.ndarray, p0: np.ndarray, p1: np.ndarray,
                          weights: np.ndarray, vmax: np.ndarray, *,
                          max_iter: int = 500, tol: float = 1e-8,
                          restarts: int = 3, seed: int = 0,
                          init_d: Optional[np.ndarray] = None,
                          ) -> tuple[np.ndarray, np.ndarray, SolverStats]:
    """Minimize weights'v subject to rho(diag(p0 - p1*v) K) <= 1 over the box.

    Returns (v, d, stats) where d is the Perron direction certifying
    (diag(p0 - p1 v) K) d <= d at the solution.
    """
    K = np.asarray(K, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    weights = np.asarray(weights, dtype=float)
    vmax = np.asarray(vmax, dtype=float)
    m = K.shape[0]
    if np.any(K < 0):
        warnings.warn("coupling matrix has negative entries; Perron certificates "
                      "may be invalid", stacklevel=2)
    n_comp, _ = scipy.sparse.csgraph.connected_components(
        scipy.sparse.csr_matrix(K > 0), connection="strong")
    if n_comp > 1:
        warnings.warn("coupling matrix is reducible; the bilinear scheme may "
                      "return a conservative allocation", stacklevel=2)

    def radius(v: np.ndarray) -> float:
        return _perron((p0 - p1 * v)[:, None] * K)[0]

    rho0, d0 = _perron(p0[:, None] * K)
    if rho0 <= 1.0 + 1e-12:
        return (np.zeros(m), d0,
                SolverStats(iterations=0, spectral_radius=rho0, converged=True,
                            method="bilinear-slp"))
    if radius(vmax) > 1.0 + 1e-9:
        raise InfeasibleAllocationError(
            "even the maximal allocation leaves the system unstable")

    def restore(v: np.ndarray) -> np.ndarray:
        """Scale the diagonal onto the rho = 1 surface (never decreases v)."""
        for _ in range(60):
            rho = radius(v)
            if rho <= 1.0 + 1e-13:
                return v
            v = np.minimum((p0 - (p0 - p1 * v) / rho) / p1, vmax)
        return v

    def direction_step(d: np.ndarray) -> Optional[np.ndarray]:
        """Min-dose v satisfying (diag(p0 - p1 v) K) d <= d for this d."""
        kd = K @ d
        needed = np.zeros(m)
        pos = kd > 0
        needed[pos] = (p0[pos] - d[pos] / kd[pos]) / p1[pos]
        if np.any(needed > vmax + 1e-12):
            return None
        return np.clip(needed, 0.0, vmax)

    rng = np.random.default_rng(seed)
    tiny = 1e-14

    def slp(v_start: np.ndarray) -> tuple[np.ndarray, int, bool]:
        v = restore(np.clip(v_start, 0.0, vmax))
        doses = float(weights @ v)
        trust = max(float(vmax.max()), 1e-6) * 0.5
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            P = (p0 - p1 * v)[:, None] * K
            rho, d = _perron(P)
            _, w = _perron(P.T)
            denom = float(w @ d)
            if denom < tiny:
                break
            grad = -p1 * w * (K @ d) / denom
            lo = np.maximum(0.0, v - trust)
            hi = np.minimum(vmax, v + trust)
            res = scipy.optimize.linprog(
                weights, A_ub=grad[None, :],
                b_ub=np.array([1.0 - rho + float(grad @ v)]),
                bounds=list(zip(lo, hi)), method="highs")
            if not res.success:
                break
            v_new = restore(np.clip(res.x, 0.0, vmax))
            doses_new = float(weights @ v_new)
            if doses_new < doses - tol * max(1.0, abs(doses)):
                v, doses = v_new, doses_new
                trust = min(trust * 1.5, float(vmax.max()))
            else:
                trust *= 0.5
                if trust < 1e-12 * max(1.0, float(vmax.max())):
                    converged = True
                    break
        return v, it, converged

    # jumpstart from the Perron direction of the unvaccinated system,
    # then random positive directions
    starts: list[np.ndarray] = []
    v0 = direction_step(d0)
    starts.append(v0 if v0 is not None else vmax.copy())
    if init_d is not None:
        v_init = direction_step(np.asarray(init_d, dtype=float))
        if v_init is not None:
            starts.append(v_init)
    for _ in range(restarts):
        d_rand = rng.dirichlet(np.ones(m))
        v_r = direction_step(d_rand)
        if v_r is not None:
            starts.append(v_r)

    best_v = None
    best_doses = np.inf
    total_iters = 0
    any_converged = False
    for v_start in starts:
        v_cand, iters, conv = slp(v_start)
        total_iters += iters
        any_converged = any_converged or conv
        doses_cand = float(weights @ v_cand)
        if radius(v_cand) <= 1.0 + 1e-9 and doses_cand < best_doses:
            best_v, best_doses = v_cand, doses_cand
    if best_v is None:
        raise SolverError("bilinear scheme found no feasible iterate")
    rho_final, d_final = _perron((p0 - p1 * best_v)[:, None] * K)
    stats = SolverStats(iterations=total_iters, spectral_radius=rho_final,
                        restarts=len(starts) - 1, converged=any_converged,
                        method="bilinear-slp")
    return best_v, d_final, stats


# ---------------------------------------------------------------------------
# problem assembly and model-facing solvers
# ---------------------------------------------------------------------------

def build_problem(state: EpidemicState, net: NetworkInstance,
                  params: DiseaseParams,
                  contacts: Optional[ContactStructure],
                  alpha: float) -> AllocationProblem:
    """Assemble the reduced allocation problem at decay rate alpha from the
    current susceptible profile."""
    b1 = compute_b1(params, alpha)
    if params.is_demographic:
        coupling = np.kron(build_flow_matrix(net)[1], contacts.gamma)
        b1_cells = np.tile(np.atleast_1d(b1), net.n)
    else:
        coupling = build_flow_matrix(net)[1]
        b1_cells = np.full(net.n, float(b1))
    return AllocationProblem(coupling=coupling, b1=b1_cells, s0=state.s.copy(),
                             populations=net.cell_populations().copy(),
                             psi=params.psi, alpha=alpha, state=state, net=net,
                             params=params, contacts=contacts)


def coupling_is_positive_definite(prob: AllocationProblem,
                                  tol: float = 1e-10) -> bool:
    """Scale-free PD routing check on the symmetric coupling matrix."""
    evals = scipy.linalg.eigvalsh(0.5 * (prob.coupling + prob.coupling.T))
    return bool(evals[0] > tol * max(1.0, evals[-1]) and evals[-1] > 0)


def _certificate(prob: AllocationProblem, v: np.ndarray) -> StabilityCertificate:
    return check_decay_certificate(prob.state, prob.net, prob.params,
                                   prob.contacts, v, prob.alpha)


def _radius_restore(prob: AllocationProblem, v: np.ndarray,
                    margin: float = 1e-9) -> np.ndarray:
    """Nudge v so the reduced discrete matrix has radius strictly below 1,
    absorbing solver-tolerance slack (raises doses by an O(margin) sliver)."""
    flow = prob.coupling * prob.populations[None, :]
    p0 = prob.b1 * prob.s0
    p1 = prob.psi * prob.b1
    for _ in range(50):
        radius = float(np.max(np.abs(np.linalg.eigvals(
            (p0 - p1 * v)[:, None] * flow))))
        if radius <= 1.0 - margin:
            break
        v = np.clip((p0 - (p0 - p1 * v) / (radius * (1 + 2 * margin))) / p1,
                    0.0, prob.s0)
    return v


def _finish(prob: AllocationProblem, v: np.ndarray, stats: SolverStats,
            direction: Optional[np.ndarray] = None) -> AllocationResult:
    v = np.clip(v, 0.0, prob.s0)
    cert = _certificate(prob, v)
    if not cert.satisfied and cert.spectral_radius < 1 + 1e-4:
        v = _radius_restore(prob, v)
        cert = _certificate(prob, v)
    u = prob.populations * prob.b1 * (prob.s0 - prob.psi * v)
    dose_vec = prob.populations * v
    return AllocationResult(v=v, u=u, doses=float(dose_vec.sum()),
                            dose_vector=dose_vec, certificate=cert,
                            stats=stats, alpha=prob.alpha, direction=direction)


def solve_diagonal_lmi(prob: AllocationProblem) -> AllocationResult:
    """SDP route: diag(u) <= coupling^{-1} with the diagonal variable scaled
    to susceptibility units for conditioning."""
    if not coupling_is_positive_definite(prob):
        raise NotPositiveDefiniteError(
            "coupling matrix is not positive definite; use solve_bilinear")
    scale = np.sqrt(prob.populations * prob.b1)
    scaled = scale[:, None] * prob.coupling * scale[None, :]
    bound = np.linalg.inv(scaled)
    u_prime, stats = lmi_box_maximize(bound, (1 - prob.psi) * prob.s0, prob.s0,
                                      prob.populations)
    v = (prob.s0 - u_prime) / prob.psi
    return _finish(prob, v, stats)


def solve_bilinear(prob: AllocationProblem,
                   init: Optional[BilinearIterate] = None,
                   seed: int = 0) -> AllocationResult:
    """Perron-direction route; works for indefinite coupling matrices."""
    flow = prob.coupling * prob.populations[None, :]
    p0 = prob.b1 * prob.s0
    p1 = prob.psi * prob.b1
    v, d, stats = spectral_box_minimize(flow, p0, p1, prob.populations,
                                        prob.s0, seed=seed,
                                        init_d=init.d if init else None)
    return _finish(prob, v, stats, direction=d)


def solve_allocation(prob: AllocationProblem) -> AllocationResult:
    """Route to the SDP path when the coupling is positive definite,
    otherwise fall back to the bilinear path."""
    if coupling_is_positive_definite(prob):
        return solve_diagonal_lmi(prob)
    return solve_bilinear(prob)


def max_decay_binary_search(state: EpidemicState, net: NetworkInstance,
                            params: DiseaseParams,
                            contacts: Optional[ContactStructure],
                            budget: float,
                            alpha_range: Optional[tuple[float, float]] = None,
                            width: float = 1e-5,
                            ) -> tuple[float, AllocationResult]:
    """Largest decay rate whose minimum dose requirement fits the budget.

    Bisects alpha; at each probe the min-dose problem is solved and declared
    feasible when its dose total is within the budget.
    """
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    if alpha_range is None:
        alpha_range = (-2.0, max_certificate_rate(params) - 1e-4)
    lo, hi = alpha_range
    dose_eps = 1e-9 * (1.0 + budget)

    def attempt(alpha: float) -> Optional[AllocationResult]:
        try:
            result = solve_allocation(build_problem(state, net, params,
                                                    contacts, alpha))
        except InfeasibleAllocationError:
            return None
        return result if result.doses <= budget + dose_eps else None

    best = attempt(lo)
    if best is None:
        raise InfeasibleAllocationError(
            f"budget insufficient even at the bracket low end alpha={lo}")
    top = attempt(hi)
    if top is not None:
        return hi, top
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        candidate = attempt(mid)
        if candidate is not None:
            lo, best = mid, candidate
        else:
            hi = mid
    return lo, best


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def problem_to_dict(prob: AllocationProblem) -> dict:
    return {
        "coupling": prob.coupling.tolist(),
        "b1": prob.b1.tolist(),
        "s0": prob.s0.tolist(),
        "populations": prob.populations.tolist(),
        "psi": prob.psi,
        "alpha": prob.alpha,
    }


def result_to_dict(result: AllocationResult) -> dict:
    doc = {
        "v": result.v.tolist(),
        "u": result.u.tolist(),
        "doses": result.doses,
        "dose_vector": result.dose_vector.tolist(),
        "alpha": result.alpha,
        "certificate": {
            "alpha": result.certificate.alpha,
            "lambda_max": result.certificate.lambda_max,
            "spectral_radius": result.certificate.spectral_radius,
            "satisfied": result.certificate.satisfied,
        },
        "solver": {
            "method": result.stats.method,
            "iterations": result.stats.iterations,
            "cuts": result.stats.cuts,
            "gap": result.stats.gap,
            "converged": result.stats.converged,
        },
    }
    if result.direction is not None:
        doc["direction"] = result.direction.tolist()
    return doc
