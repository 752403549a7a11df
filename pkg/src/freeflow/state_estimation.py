"""Kalman filtering of noisy sensor streams into density/queue estimates.

The filter is a plain linear Kalman filter.  Each metered ramp owns one
two-state instance (local density, ramp queue) whose prediction model is
local conservation driven by the measured boundary and ramp flows; the
update fuses the noisy density reading and queue measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericalBreakdown(RuntimeError):
    """Innovation covariance became non-invertible."""


@dataclass
class KalmanFilter:
    """Linear Kalman filter with identity dynamics plus known inputs.

    State transition is x' = x + u with process noise Q; measurements are
    z = x + v with noise R.  Covariances stay symmetric PSD (Joseph-form
    update plus explicit symmetrization); states are projected onto the
    non-negative orthant after each update, which is the physically
    feasible region for densities and queue lengths.
    """

    state: np.ndarray
    covariance: np.ndarray
    process_noise: np.ndarray
    measurement_noise: np.ndarray
    project_nonnegative: bool = True

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=float).copy()
        n = self.state.shape[0]
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(n, n).copy()
        self.process_noise = np.asarray(self.process_noise, dtype=float).reshape(n, n).copy()
        self.measurement_noise = np.asarray(self.measurement_noise, dtype=float).reshape(n, n).copy()

    def predict(self, inputs: np.ndarray) -> "KalmanFilter":
        """Propagate by the conservation model: x += inputs, P += Q."""
        u = np.asarray(inputs, dtype=float)
        self.state = self.state + u
        if self.project_nonnegative:
            self.state = np.maximum(self.state, 0.0)
        self.covariance = self.covariance + self.process_noise
        self.covariance = 0.5 * (self.covariance + self.covariance.T)
        return self

    def update(self, measurement: np.ndarray) -> "KalmanFilter":
        z = np.asarray(measurement, dtype=float)
        P = self.covariance
        S = P + self.measurement_noise
        try:
            gain = np.linalg.solve(S, P).T  # K = P S^{-1}
        except np.linalg.LinAlgError as exc:
            raise NumericalBreakdown(f"innovation covariance singular: {exc}") from exc
        if not np.all(np.isfinite(gain)):
            raise NumericalBreakdown("non-finite Kalman gain")
        self.state = self.state + gain @ (z - self.state)
        identity = np.eye(P.shape[0])
        J = identity - gain
        P_new = J @ P @ J.T + gain @ self.measurement_noise @ gain.T
        self.covariance = 0.5 * (P_new + P_new.T)
        if self.project_nonnegative:
            self.state = np.maximum(self.state, 0.0)
        return self


@dataclass
class RampAreaEstimator:
    """Density + queue estimator for one metered on-ramp area."""

    cell_length_km: float
    tick_hours: float
    process_noise_density: float = 1.0  # veh^2/km^2 per tick
    process_noise_queue: float = 0.5  # veh^2 per tick
    measurement_noise_density: float = 4.0
    measurement_noise_queue: float = 1.0
    filter: KalmanFilter = field(init=False)

    def __post_init__(self):
        self.filter = KalmanFilter(
            state=np.zeros(2),
            covariance=np.diag([100.0, 100.0]),
            process_noise=np.diag([self.process_noise_density, self.process_noise_queue]),
            measurement_noise=np.diag(
                [self.measurement_noise_density, self.measurement_noise_queue]
            ),
        )

    def step(
        self,
        inflow_vph: float,
        outflow_vph: float,
        arrivals_vph: float,
        ramp_flow_vph: float,
        density_meas: float,
        queue_meas: float,
    ) -> tuple[float, float]:
        """One predict/update cycle; returns (density, queue) estimates."""
        T = self.tick_hours
        self.filter.predict(
            np.array(
                [
                    (T / self.cell_length_km) * (inflow_vph - outflow_vph),
                    T * (arrivals_vph - ramp_flow_vph),
                ]
            )
        )
        self.filter.update(np.array([density_meas, queue_meas]))
        return self.density_estimate, self.queue_estimate

    @property
    def density_estimate(self) -> float:
        return float(self.filter.state[0])

    @property
    def queue_estimate(self) -> float:
        return float(self.filter.state[1])
