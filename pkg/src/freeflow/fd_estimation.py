"""Data-driven identification of the fundamental diagram.

A small exact Gaussian-process regressor (squared-exponential kernel with
per-dimension length scales, fixed hyperparameters) backs three tasks:
reconstructing the 1D flow-density curve, locating the critical density
and capacity, and estimating the capacity-drop fraction from the 2D
(upstream density, downstream density) -> flow surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .fundamental import FundamentalDiagram

#: Grid resolution for locating the critical density (veh/km).
DENSITY_GRID_STEP = 0.5

#: Half-width of the 90% credible interval in posterior standard deviations.
Z_90 = 1.645


class SingularKernel(ValueError):
    """Kernel matrix plus noise is not positive definite."""


class DimensionMismatch(ValueError):
    """Query dimensionality differs from the training inputs."""


class InsufficientRegimeCoverage(ValueError):
    """Samples do not span both the free-flow and congested regimes."""


@dataclass(frozen=True)
class GPHyperparams:
    signal_variance: float
    length_scales: tuple[float, ...]  # one per input dimension
    noise_variance: float

    def __post_init__(self):
        if self.signal_variance <= 0.0 or self.noise_variance <= 0.0:
            raise ValueError("variances must be positive")
        if not self.length_scales or any(l <= 0.0 for l in self.length_scales):
            raise ValueError("length scales must be positive")


class GPModel:
    """Exact GP posterior with a zero prior mean; immutable after fit."""

    def __init__(self, inputs: np.ndarray, targets: np.ndarray, hyper: GPHyperparams):
        self.inputs = inputs
        self.targets = targets
        self.hyper = hyper
        K = self._kernel(inputs, inputs)
        K[np.diag_indices_from(K)] += hyper.noise_variance
        try:
            self._chol = cho_factor(K, lower=True)
        except (LinAlgError, ValueError) as exc:
            raise SingularKernel(f"kernel factorization failed: {exc}") from exc
        self._alpha = cho_solve(self._chol, targets)

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        scales = np.asarray(self.hyper.length_scales)
        d = (a[:, None, :] - b[None, :, :]) / scales
        return self.hyper.signal_variance * np.exp(-0.5 * np.sum(d * d, axis=2))

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def predict(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of the latent function at queries."""
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        if queries.shape[1] != self.dim:
            raise DimensionMismatch(f"expected {self.dim}-d queries, got {queries.shape[1]}-d")
        k_star = self._kernel(queries, self.inputs)
        mean = k_star @ self._alpha
        v = cho_solve(self._chol, k_star.T)
        var = self.hyper.signal_variance - np.sum(k_star * v.T, axis=1)
        return mean, np.maximum(var, 0.0)

    def predict_interval(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Mean with the 90% band: mean +/- 1.645 posterior std."""
        mean, var = self.predict(queries)
        half = Z_90 * np.sqrt(var)
        return mean, mean - half, mean + half


def gp_fit(points, targets, hyper: GPHyperparams) -> GPModel:
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    targets = np.asarray(targets, dtype=float)
    if points.shape[0] == 0 or points.shape[0] != targets.shape[0]:
        raise ValueError("need at least one (point, target) pair")
    if not (np.isfinite(points).all() and np.isfinite(targets).all()):
        raise ValueError("inputs must be finite")
    if points.shape[1] != len(hyper.length_scales):
        raise DimensionMismatch("one length scale per input dimension required")
    return GPModel(points, targets, hyper)


def gp_predict(model: GPModel, query) -> tuple[float, float]:
    mean, var = model.predict(np.atleast_2d(query))
    return float(mean[0]), float(var[0])


def default_1d_hyperparams(densities: np.ndarray, flows: np.ndarray) -> GPHyperparams:
    spread = max(float(np.std(flows)), 1.0)
    span = max(float(np.ptp(densities)), 1.0)
    return GPHyperparams(
        signal_variance=spread**2 * 4.0,
        length_scales=(max(span / 8.0, 1.0),),
        noise_variance=max(spread**2 * 1e-3, 1e-6),
    )


def estimate_critical_density(samples, hyper: GPHyperparams | None = None) -> FundamentalDiagram:
    """Fit the 1D diagram from (density, flow) pairs.

    The critical density is the argmax of the GP posterior mean over a
    0.5 veh/km grid; the affine branches are then least-squares fits on
    each side.  Raises when the congested regime is unobserved (the mean
    peaks at the edge of the sampled range).
    """
    samples = np.asarray(sorted(map(tuple, samples)), dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 2 or samples.shape[0] < 4:
        raise ValueError("need at least 4 (density, flow) samples")
    rho, phi = samples[:, 0], samples[:, 1]
    if hyper is None:
        hyper = default_1d_hyperparams(rho, phi)
    model = gp_fit(rho, phi, hyper)

    grid = np.arange(0.0, float(rho.max()) + DENSITY_GRID_STEP, DENSITY_GRID_STEP)
    mean, _ = model.predict(grid[:, None])
    peak = int(np.argmax(mean))
    rho_c = float(grid[peak])
    capacity = float(mean[peak])
    if capacity <= 0.0:
        raise InsufficientRegimeCoverage("no positive flow observed")
    if rho_c >= 0.95 * float(rho.max()) or (rho > rho_c).sum() < 3:
        raise InsufficientRegimeCoverage(
            "samples do not extend past the flow peak; congested regime unobserved"
        )

    free = rho <= rho_c
    congested = ~free
    if free.sum() < 2:
        raise InsufficientRegimeCoverage("free-flow regime unobserved")
    # Free branch through the origin: flow = v * rho.
    v_free = float(rho[free] @ phi[free] / max(rho[free] @ rho[free], 1e-12))
    # Congested branch: flow = a - w * rho, jam density at the zero crossing.
    A = np.vstack([np.ones(congested.sum()), rho[congested]]).T
    coef, *_ = np.linalg.lstsq(A, phi[congested], rcond=None)
    intercept, slope = float(coef[0]), float(coef[1])
    if slope >= -1e-9:
        jam = 2.0 * rho_c  # congested branch flat: fall back to a symmetric diagram
    else:
        jam = intercept / (-slope)
    jam = max(jam, rho_c * 1.05)
    # Keep the affine consistency capacity = v_f * rho_c exact.
    v_f = capacity / rho_c if rho_c > 0 else v_free
    return FundamentalDiagram(
        critical_density=rho_c,
        jam_density=jam,
        capacity=capacity,
        free_flow_speed=v_f,
    )


def estimate_capacity_drop(samples, hyper: GPHyperparams | None = None) -> float:
    """Estimate the drop fraction from (rho_us, rho_ds, flow) triples.

    Fits the 2D GP surface, reads the capacity at the free-flow ridge and
    the discharge flow under congested-upstream / free-downstream
    conditions; the drop is one minus their ratio, clamped to [0, 1).
    """
    samples = np.asarray(sorted(map(tuple, samples)), dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 3 or samples.shape[0] < 8:
        raise ValueError("need at least 8 (rho_us, rho_ds, flow) samples")
    X, phi = samples[:, :2], samples[:, 2]
    if hyper is None:
        spread = max(float(np.std(phi)), 1.0)
        hyper = GPHyperparams(
            signal_variance=spread**2 * 4.0,
            length_scales=(
                max(float(np.ptp(X[:, 0])) / 8.0, 1.0),
                max(float(np.ptp(X[:, 1])) / 8.0, 1.0),
            ),
            noise_variance=max(spread**2 * 1e-3, 1e-6),
        )
    model = gp_fit(X, phi, hyper)

    rho_ds_free = float(np.quantile(X[:, 1], 0.1))
    grid = np.arange(0.0, float(X[:, 0].max()) + DENSITY_GRID_STEP, DENSITY_GRID_STEP)
    queries = np.column_stack([grid, np.full_like(grid, rho_ds_free)])
    mean, _ = model.predict(queries)
    peak = int(np.argmax(mean))
    rho_c = float(grid[peak])
    capacity = float(mean[peak])
    if capacity <= 0.0 or rho_c >= 0.95 * float(X[:, 0].max()):
        raise InsufficientRegimeCoverage("free-flow capacity peak unobserved")

    congested = X[:, 0] >= 1.2 * rho_c
    if congested.sum() < 3:
        raise InsufficientRegimeCoverage("congested-upstream regime unobserved")
    us_band = np.linspace(1.2 * rho_c, float(X[congested, 0].max()), 16)
    q2 = np.column_stack([us_band, np.full_like(us_band, rho_ds_free)])
    discharge = float(np.mean(model.predict(q2)[0]))
    return float(np.clip(1.0 - discharge / capacity, 0.0, 1.0 - 1e-9))
