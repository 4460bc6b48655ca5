"""Forward integration of the epidemic models with discrete vaccination
events and full case accounting.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .ingest import EpidemicInstance
from .model import (ContactStructure, DiseaseParams, EpidemicState,
                    NetworkInstance, flow_for_model, _cell_rates)

log = logging.getLogger(__name__)

DEFAULT_STEP = 0.05


@dataclass
class VaccinationSchedule:
    """Dose supply pattern: daily_rate and total_budget are fractions of the
    total population; an interval's doses arrive at its start."""

    daily_rate: float
    interval_days: int = 1
    total_budget: float = 0.0
    leftover_rule: str = "even-split"

    def __post_init__(self):
        if self.daily_rate < 0:
            raise ValueError("daily rate must be nonnegative")
        if self.interval_days < 1:
            raise ValueError("supply interval must be at least one day")
        if not 0.0 <= self.total_budget <= 1.0:
            raise ValueError("budget must be a fraction of the population")
        if self.leftover_rule not in ("even-split", "none"):
            raise ValueError("leftover rule must be 'even-split' or 'none'")


@dataclass
class Trajectory:
    """Daily records of a simulated scenario. Compartment columns are
    fractions; counter columns are persons (cumulative doses administered)."""

    times: np.ndarray
    s: np.ndarray
    xa: np.ndarray
    xs: np.ndarray
    e: np.ndarray
    h: np.ndarray
    vax: np.ndarray
    new_cases: np.ndarray
    cum_cases: np.ndarray
    cum_deaths: np.ndarray
    doses: np.ndarray
    clamp_events: int = 0
    labels: Sequence[str] = field(default_factory=list)

    def final_cumulative_cases(self) -> float:
        return float(self.cum_cases[-1].sum())

    def final_cumulative_deaths(self) -> float:
        return float(self.cum_deaths[-1].sum())

    def total_doses(self) -> float:
        return float(self.doses[-1].sum())

    def to_csv(self, path) -> None:
        cells = self.s.shape[1]
        labels = (list(self.labels) if self.labels
                  else [str(i) for i in range(cells)])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "cell", "s", "xa", "xs", "e", "h",
                             "new_cases", "cum_cases", "cum_deaths", "doses"])
            for k, t in enumerate(self.times):
                for i in range(cells):
                    writer.writerow([
                        f"{t:.6g}", labels[i],
                        f"{self.s[k, i]:.12g}", f"{self.xa[k, i]:.12g}",
                        f"{self.xs[k, i]:.12g}", f"{self.e[k, i]:.12g}",
                        f"{self.h[k, i]:.12g}", f"{self.new_cases[k, i]:.12g}",
                        f"{self.cum_cases[k, i]:.12g}",
                        f"{self.cum_deaths[k, i]:.12g}",
                        f"{self.doses[k, i]:.12g}"])


# ---------------------------------------------------------------------------
# right-hand sides
# ---------------------------------------------------------------------------

def _covid_derivative_blocks(s, xa, xs, flow, beta_a, beta_s, eps, r_a, r_s, kappa):
    force = beta_s * (flow @ xs) + beta_a * (flow @ xa)
    ds = -s * force
    dxa = s * force - (eps + r_a) * xa
    dxs = eps * xa - (r_s + kappa) * xs
    de = kappa * xs
    dh = r_a * xa + r_s * xs
    return ds, dxa, dxs, de, dh


def rhs_covid(state: EpidemicState, net: NetworkInstance,
              params: DiseaseParams):
    """Derivatives (ds, dxa, dxs, de, dh) of the homogeneous network model."""
    flow = flow_for_model(net, params, None)
    return _covid_derivative_blocks(state.s, state.xa, state.xs, flow,
                                    params.beta_a, params.beta_s, params.eps,
                                    params.r_a, params.r_s, params.kappa)


def rhs_covid_demographic(state: EpidemicState, net: NetworkInstance,
                          params: DiseaseParams, contacts: ContactStructure):
    """Derivatives of the age-structured model; infection inflow into the
    asymptomatic track is positive, mirroring the homogeneous equations."""
    flow = flow_for_model(net, params, contacts)
    beta_a, beta_s, r_s, kappa = _cell_rates(net, params)
    return _covid_derivative_blocks(state.s, state.xa, state.xs, flow,
                                    beta_a, beta_s, params.eps, params.r_a,
                                    r_s, kappa)


def covid_rhs_factory(net: NetworkInstance, params: DiseaseParams,
                      contacts: Optional[ContactStructure] = None,
                      ) -> Callable[[float, np.ndarray], np.ndarray]:
    """Flat right-hand side over y = [s | xa | xs | e | h]."""
    flow = flow_for_model(net, params, contacts)
    if params.is_demographic:
        beta_a, beta_s, r_s, kappa = _cell_rates(net, params)
    else:
        beta_a, beta_s = params.beta_a, params.beta_s
        r_s, kappa = params.r_s, params.kappa
    eps, r_a = params.eps, params.r_a
    m = flow.shape[0]

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        s, xa, xs = y[:m], y[m:2 * m], y[2 * m:3 * m]
        blocks = _covid_derivative_blocks(s, xa, xs, flow, beta_a, beta_s,
                                          eps, r_a, r_s, kappa)
        return np.concatenate(blocks)

    return rhs


# ---------------------------------------------------------------------------
# integrator
# ---------------------------------------------------------------------------

def integrate(rhs: Callable[[float, np.ndarray], np.ndarray],
              y0: np.ndarray, t_span: tuple[float, float], step: float,
              clamp: Optional[tuple[float, Optional[float]]] = (0.0, 1.0),
              ) -> tuple[np.ndarray, np.ndarray, int]:
    """Classical fixed-step fourth-order Runge-Kutta integration.

    Returns (times, states, clamp_events) where states[k] is the state at
    times[k]. States are clamped into the given bounds after every step;
    clamps larger than 1e-12 are counted and logged.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    t0, t1 = t_span
    n_steps = int(round((t1 - t0) / step))
    if n_steps < 1 or abs(t0 + n_steps * step - t1) > 1e-9 * max(1.0, abs(t1)):
        raise ValueError("span must be a whole number of steps")
    y = np.asarray(y0, dtype=float).copy()
    times = t0 + step * np.arange(n_steps + 1)
    out = np.empty((n_steps + 1, y.size))
    out[0] = y
    clamp_events = 0
    for k in range(n_steps):
        t = times[k]
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * step, y + 0.5 * step * k1)
        k3 = rhs(t + 0.5 * step, y + 0.5 * step * k2)
        k4 = rhs(t + step, y + step * k3)
        if not np.all(np.isfinite(k4)):
            raise FloatingPointError(f"non-finite derivative at t={t + step}")
        y = y + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if clamp is not None:
            lo, hi = clamp
            clipped = np.clip(y, lo, hi)
            drift = float(np.max(np.abs(clipped - y))) if y.size else 0.0
            if drift > 1e-12:
                clamp_events += 1
                log.debug("clamped state by %.3g at t=%.4f", drift, t + step)
            y = clipped
        out[k + 1] = y
    return times, out, clamp_events


def apply_vaccination_event(state: EpidemicState, v: np.ndarray,
                            psi: float) -> EpidemicState:
    """Move psi*v of each cell from susceptible into the vaccinated-immune
    pool; v is the vaccinated fraction per cell and must not exceed s."""
    v = np.asarray(v, dtype=float)
    if np.any(v < -1e-12) or np.any(v > state.s + 1e-9):
        raise ValueError("vaccination fractions must satisfy 0 <= v_i <= s_i")
    moved = psi * np.clip(v, 0.0, state.s)
    new = state.copy()
    new.s = np.clip(state.s - moved, 0.0, None)
    new.vax = state.vax + moved
    return new


# ---------------------------------------------------------------------------
# policy simulation loop
# ---------------------------------------------------------------------------

def simulate_policy(instance: EpidemicInstance, policy, schedule: VaccinationSchedule,
                    horizon: int, step: float = DEFAULT_STEP,
                    extinction_threshold: float = 1.0) -> Trajectory:
    """Run one policy: every supply interval the policy converts that epoch's
    doses into a vaccination event, then the model integrates to the next
    epoch. New cases per day are the inflow into the infected chain scaled by
    residents; dosing stops (or switches to the leftover rule) once the count
    of active infected persons drops below the extinction threshold.
    """
    from . import policies as policies_mod

    planner = policies_mod.DosePlanner(policy, instance, schedule)
    net, params, contacts = instance.net, instance.params, instance.contacts
    pops = instance.cell_populations()
    total_pop = float(pops.sum())
    rhs = covid_rhs_factory(net, params, contacts)
    m = pops.shape[0]

    state = instance.state0.copy()
    budget_left = schedule.total_budget * total_pop
    administered = np.zeros(m)
    clamp_events = 0

    times = np.arange(horizon + 1, dtype=float)
    cols = {name: np.zeros((horizon + 1, m)) for name in
            ("s", "xa", "xs", "e", "h", "vax", "new_cases", "cum_cases",
             "cum_deaths", "doses")}

    def record(day: int):
        for name in ("s", "xa", "xs", "e", "h", "vax"):
            cols[name][day] = getattr(state, name)
        cols["cum_cases"][day] = (state.xa + state.xs + state.e + state.h) * pops
        cols["cum_deaths"][day] = state.e * pops
        cols["doses"][day] = administered
        if day > 0:
            cols["new_cases"][day] = np.clip(
                cols["cum_cases"][day] - cols["cum_cases"][day - 1], 0.0, None)

    dosing_policy = getattr(policy, "kind", None) != "no-vaccine"
    for day in range(horizon + 1):
        if day % schedule.interval_days == 0 and day < horizon and dosing_policy:
            epoch_supply = min(schedule.daily_rate * total_pop
                               * schedule.interval_days, budget_left)
            if epoch_supply > 0:
                active_persons = float(((state.xa + state.xs) * pops).sum())
                headroom = state.s * pops
                if active_persons < extinction_threshold:
                    doses = policies_mod.leftover_redistribute(
                        state, epoch_supply, schedule.leftover_rule, pops)
                else:
                    doses = planner.epoch_doses(state, epoch_supply, budget_left)
                doses = np.minimum(doses, headroom)
                if doses.sum() > epoch_supply * (1 + 1e-9):
                    raise RuntimeError("policy emitted more doses than supplied")
                if doses.sum() > 0:
                    state = apply_vaccination_event(state, doses / pops, params.psi)
                    administered = administered + doses
                    budget_left -= float(doses.sum())
        record(day)
        if day < horizon:
            _, states, clamps = integrate(rhs, _state_to_flat(state),
                                          (float(day), float(day + 1)), step)
            clamp_events += clamps
            state = _flat_to_state(states[-1], state, t=float(day + 1))

    return Trajectory(times=times, clamp_events=clamp_events,
                      labels=_cell_labels(instance), **cols)


def _state_to_flat(state: EpidemicState) -> np.ndarray:
    return np.concatenate([state.s, state.xa, state.xs, state.e, state.h])


def _flat_to_state(y: np.ndarray, template: EpidemicState, t: float) -> EpidemicState:
    m = template.size
    return EpidemicState(s=y[:m], xa=y[m:2 * m], xs=y[2 * m:3 * m],
                         e=y[3 * m:4 * m], h=y[4 * m:5 * m],
                         vax=template.vax.copy(), t=t)


def _cell_labels(instance: EpidemicInstance) -> list[str]:
    n = instance.net.n
    if not instance.is_demographic:
        return [f"loc{i}" for i in range(n)]
    g = instance.net.n_groups
    return [f"loc{i}:g{b}" for i in range(n) for b in range(g)]
