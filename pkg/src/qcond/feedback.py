"""Closed-loop cooling of the continuously measured particle.

The controller output u enters the plant as the linear potential term
-u * x (a uniform control force), computed from data available through
step n and applied during step n+1 (a digital controller cannot act on
the sample it is still measuring).

Two controllers are provided besides the do-nothing baseline:

* direct: feed back the low-passed photocurrent itself, u = -g * I_s
  with I_s an exponential moving average of dy/dt (time constant tau_c).
  The smoothing lag is what turns a position-proportional force into
  effective damping, at the cost of feeding measurement noise into the
  plant.
* estimator: run the Gaussian belief filter on the record and damp the
  momentum estimate, u = -g * p_belief.

Scores are mean plant energies with the control term excluded, so
policies are compared on what they do to the particle, not on the work
the actuator performs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import PositionGrid, QcondError, SystemSpec, gaussian_wavefunction, wavefunction_moments
from .cumulant import GaussianBelief, centroid_step
from .noise import generate
from .qdyn import MeasurementSpec, PureStepper

__all__ = [
    "FeedbackPolicy",
    "CoolingResult",
    "ClosedLoopRun",
    "direct_control",
    "estimator_control",
    "run_closed_loop",
    "cooling_experiment",
    "paired_gap",
]


class FilterDivergenceError(QcondError):
    """Estimator covariance blew past the physical scale of the problem."""


@dataclass(frozen=True)
class FeedbackPolicy:
    """Control law selector: kind in {none, direct, estimator}."""

    kind: str
    gain: float = 0.0
    smoothing_time: float = 0.0   # direct kind only
    u_max: float = np.inf

    def __post_init__(self):
        if self.kind not in ("none", "direct", "estimator"):
            raise ValueError(f"unknown feedback kind {self.kind!r}")
        if self.u_max <= 0:
            raise ValueError("u_max must be positive")

    def clamp(self, u: float) -> float:
        return float(np.clip(u, -self.u_max, self.u_max))


def direct_control(record_increments, policy: FeedbackPolicy, dt) -> np.ndarray:
    """Offline form of the direct controller: u series for a record tail.

    u_n is computed from increments through n (inclusive); the closed
    loop applies it during step n+1.
    """
    if policy.smoothing_time < 5.0 * dt:
        raise ValueError("smoothing_time must be at least 5*dt")
    alpha = dt / policy.smoothing_time
    u = np.empty(len(record_increments))
    smoothed = 0.0
    for i, dy in enumerate(record_increments):
        smoothed += alpha * (dy / dt - smoothed)
        u[i] = policy.clamp(-policy.gain * smoothed)
    return u


def estimator_control(belief: GaussianBelief, policy: FeedbackPolicy) -> float:
    """Momentum-damping force from the current belief."""
    return policy.clamp(-policy.gain * belief.p_mean)


@dataclass(frozen=True)
class ClosedLoopRun:
    """Energy trace of one closed-loop realization (control term excluded)."""

    times: np.ndarray
    energy: np.ndarray
    final_control: float


def run_closed_loop(state0_params, system: SystemSpec, meas: MeasurementSpec,
                    policy: FeedbackPolicy, noise, sample_stride=10,
                    belief0: GaussianBelief = None) -> ClosedLoopRun:
    """Plant-measure-control loop over one noise path.

    state0_params = (grid, x_mean, p_mean, sigma_x).  The energy score
    uses the control-free Hamiltonian at each sample time.
    """
    grid, x0, p0, sigma_x = state0_params
    hbar = system.hbar
    dt = noise.dt
    if policy.kind == "direct" and policy.smoothing_time < 5.0 * dt:
        raise ValueError("smoothing_time must be at least 5*dt")

    psi = gaussian_wavefunction(grid, x0, p0, sigma_x, hbar)
    stepper = PureStepper(grid, system, meas, dt)
    scoring_system = system.with_control(0.0)

    belief = belief0
    if policy.kind == "estimator" and belief is None:
        belief = GaussianBelief(x0, p0, sigma_x**2, 0.0, hbar**2 / (4 * sigma_x**2),
                                quantum=True, hbar=hbar)
    sqrt8k = np.sqrt(8.0 * meas.strength)
    grid_span = grid.x_max - grid.x_min

    n = noise.n_steps
    n_samples = n // sample_stride
    times = dt * sample_stride * (1 + np.arange(n_samples))
    energy = np.empty(n_samples)

    alpha = dt / policy.smoothing_time if policy.kind == "direct" else 0.0
    smoothed_current = 0.0
    u_apply = 0.0     # one-step actuation delay: nothing known at t=0
    t = 0.0
    isample = 0
    for i in range(n):
        stepper.control = u_apply
        psi, dy = stepper.conditioned(psi, t, noise.increments[i])
        t = (i + 1) * dt

        if policy.kind == "direct":
            smoothed_current += alpha * (dy / dt - smoothed_current)
            u_apply = policy.clamp(-policy.gain * smoothed_current)
        elif policy.kind == "estimator":
            dw_b = sqrt8k * (dy - belief.x_mean * dt)
            belief = centroid_step(belief, system.with_control(u_apply), meas,
                                   dt, dw_b, t - dt)
            if belief.c_xx > grid_span**2:
                raise FilterDivergenceError(
                    f"belief position variance {belief.c_xx:.3e} exceeds grid scale"
                )
            u_apply = estimator_control(belief, policy)

        if (i + 1) % sample_stride == 0:
            m = wavefunction_moments(grid, psi, hbar, scoring_system, t)
            energy[isample] = m.energy
            isample += 1
    return ClosedLoopRun(times, energy, u_apply)


@dataclass(frozen=True)
class CoolingResult:
    """Ensemble energy statistics for one policy."""

    policy: FeedbackPolicy
    times: np.ndarray
    energy_mean: np.ndarray
    energy_se: np.ndarray
    steady_per_realization: np.ndarray
    steady_mean: float
    steady_se: float
    stream_indices: np.ndarray


def _steady_window(n_samples: int) -> slice:
    # Steady-state scoring must exclude at least the first half-horizon.
    return slice(n_samples // 2, None)


def cooling_experiment(state0_params, system, meas, policies: dict,
                       n_realizations: int, horizon: float, dt: float,
                       master_seed: int, sample_stride=10, max_retries=3) -> dict:
    """Common-random-number comparison of feedback policies.

    Every policy sees the same per-realization noise path, so policy
    differences are paired samples.  A realization on which any policy
    aborts is rerun for all policies under a fresh stream index (logged),
    keeping the pairing intact.
    """
    n_steps = int(round(horizon / dt))
    runs = {name: [] for name in policies}
    indices = []
    next_index = 0
    accepted = 0
    while accepted < n_realizations:
        index = next_index
        next_index += 1
        if index - accepted > max_retries * max(1, n_realizations):
            raise QcondError("too many aborted closed-loop realizations")
        noise = generate(master_seed, index, n_steps, dt)
        try:
            batch = {name: run_closed_loop(state0_params, system, meas, pol,
                                           noise, sample_stride)
                     for name, pol in policies.items()}
        except QcondError as err:
            warnings.warn(f"realization {index} aborted ({err}); retrying with fresh stream")
            continue
        for name, run in batch.items():
            runs[name].append(run)
        indices.append(index)
        accepted += 1

    out = {}
    for name, pol in policies.items():
        energies = np.stack([r.energy for r in runs[name]])
        times = runs[name][0].times
        window = _steady_window(energies.shape[1])
        steady = energies[:, window].mean(axis=1)
        out[name] = CoolingResult(
            policy=pol,
            times=times,
            energy_mean=energies.mean(axis=0),
            energy_se=energies.std(axis=0, ddof=1) / np.sqrt(accepted),
            steady_per_realization=steady,
            steady_mean=float(steady.mean()),
            steady_se=float(steady.std(ddof=1) / np.sqrt(accepted)),
            stream_indices=np.array(indices),
        )
    return out


def paired_gap(hot: CoolingResult, cold: CoolingResult):
    """(mean gap, standard error) of paired steady-state energy differences."""
    d = hot.steady_per_realization - cold.steady_per_realization
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size))
