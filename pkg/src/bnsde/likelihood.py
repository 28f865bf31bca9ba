"""Gaussian observation model, Monte Carlo marginal likelihood and priors.

The observation density is an isotropic Gaussian with a single learnable
noise scale carried in the parameter set as ``log_obs_noise``. Marginalizing
the latent terminal state over M simulated paths averages *probabilities*,
not log-probabilities, so the estimator is computed as a stable
log-mean-exp over per-path log densities.

For time series the likelihood factorizes over inter-observation segments
with teacher forcing: each segment restarts the paths at the previously
observed value, is integrated with Euler sub-steps no longer than ``dt_max``
and is scored against the next observation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .sde import simulate_span

__all__ = [
    "LOG_2PI",
    "ObsModel",
    "PriorSpec",
    "DegenerateLikelihoodError",
    "gaussian_loglik",
    "gaussian_loglik_node",
    "simulated_loglik",
    "segment_steps",
    "trajectory_loglik",
    "log_prior",
]

LOG_2PI = math.log(2.0 * math.pi)


class DegenerateLikelihoodError(RuntimeError):
    """Every Monte Carlo path carried zero observation probability."""


@dataclass(frozen=True)
class ObsModel:
    """Learnable observation noise: sigma_obs = exp(log_obs_noise) > 0."""

    output_dim: int
    param_key: str = "obs.log_noise"

    def sigma(self, params: ad.ParamSet) -> float:
        return float(np.exp(params.values[self.param_key]))

    def log_sigma_node(self, params: ad.ParamSet) -> ad.Node:
        return params.leaf(self.param_key)


@dataclass(frozen=True)
class PriorSpec:
    """Zero-mean Gaussian prior scales: one std for weights, one for the
    observation log-noise."""

    weight_std: float = 1.0
    log_noise_std: float = 1.0

    def __post_init__(self):
        if self.weight_std <= 0 or self.log_noise_std <= 0:
            raise ValueError("prior stds must be > 0")

    def std_for(self, block_name: str) -> float:
        return self.log_noise_std if block_name.endswith("log_noise") else self.weight_std


def gaussian_loglik(y, mean, sigma: float):
    """Plain numpy Gaussian log density, summed over the trailing output axis."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    y = np.asarray(y, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    o = mean.shape[-1]
    sq = np.sum((y - mean) ** 2, axis=-1)
    return -0.5 * o * LOG_2PI - o * math.log(sigma) - 0.5 * sq / sigma**2


def gaussian_loglik_node(y, mean: ad.Node, log_sigma) -> ad.Node:
    """Tape version of :func:`gaussian_loglik`, differentiable through the
    predicted mean and (when a node) the log noise scale."""
    y = np.asarray(y, dtype=np.float64)
    o = mean.shape[-1]
    sq = ad.ssum(ad.square(ad.sub(mean, y)), axis=-1)
    if isinstance(log_sigma, ad.Node):
        if log_sigma.shape != ():
            raise ad.ShapeError("log_sigma must be a scalar node")
        precision = ad.exp(ad.mul(log_sigma, -2.0))
        quad = ad.mul(ad.mul(sq, precision), -0.5)
        return ad.add(ad.add(quad, ad.mul(log_sigma, -float(o))), -0.5 * o * LOG_2PI)
    ls = float(log_sigma)
    return ad.add(ad.mul(sq, -0.5 * math.exp(-2.0 * ls)), -0.5 * o * LOG_2PI - o * ls)


def simulated_loglik(y, terminal: ad.Node, head_fn: Callable[[ad.Node], ad.Node] | None, log_sigma) -> ad.Node:
    """Monte Carlo marginal log likelihood log[(1/M) sum_m p(y | h_m)].

    ``terminal`` is (..., M, D); ``head_fn`` maps it to predicted means
    (identity when None, e.g. state-space time series). ``y`` must be
    (..., O) with the same leading batch shape. Returns a (...)-shaped node.
    """
    pred = head_fn(terminal) if head_fn is not None else terminal
    y = np.asarray(y, dtype=np.float64)
    if y.shape != pred.shape[:-2] + pred.shape[-1:]:
        raise ad.ShapeError(f"y shaped {y.shape} does not match predictions {pred.shape}")
    per_path = gaussian_loglik_node(y[..., None, :], pred, log_sigma)  # (..., M)
    if np.isneginf(per_path.value).all(axis=-1).any():
        raise DegenerateLikelihoodError("all path likelihoods underflowed to zero")
    return ad.logmeanexp(per_path, axis=-1)


def segment_steps(t_start: float, t_end: float, dt_max: float) -> int:
    """Euler sub-steps for one observation gap: ceil(gap / dt_max)."""
    gap = t_end - t_start
    if gap <= 0:
        raise ValueError("observation times must be strictly increasing")
    return max(1, int(math.ceil(gap / dt_max - 1e-12)))


def trajectory_loglik(
    times,
    values,
    *,
    dt_max: float,
    n_paths: int,
    rank: int,
    drift,
    diffusion,
    log_sigma,
    rng: np.random.Generator,
    segments: Iterable[int] | None = None,
    record_graph: bool = True,
) -> ad.Node:
    """Teacher-forced log likelihood of a time-stamped trajectory.

    Conditions on the first observation as the exact initial state; each
    segment (x_{j-1} -> x_j) restarts the M paths at the observed x_{j-1},
    integrates with per-segment uniform Euler sub-steps and scores x_j under
    the simulated marginal. ``segments`` selects a subset of 1-based segment
    indices (used for minibatching); noise is drawn per segment in ascending
    index order so the draw is independent of internal batching.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] != times.shape[0]:
        values = values.T
    n_obs, dim = values.shape
    if times.shape != (n_obs,):
        raise ValueError("times and values lengths differ")
    if np.any(np.diff(times) <= 0):
        raise ValueError("observation times must be strictly increasing")

    n_segments = n_obs - 1
    seg_list = sorted(segments) if segments is not None else list(range(1, n_segments + 1))
    if any(j < 1 or j > n_segments for j in seg_list):
        raise ValueError(f"segment indices must lie in 1..{n_segments}")
    if not seg_list:
        return ad.constant(0.0)

    drawn = []
    for j in seg_list:
        n_sub = segment_steps(times[j - 1], times[j], dt_max)
        dt_j = (times[j] - times[j - 1]) / n_sub
        dw = rng.normal(0.0, 1.0, size=(n_paths, n_sub, rank)) * math.sqrt(dt_j)
        drawn.append((j, n_sub, dt_j, dw))

    # segments with equal sub-step counts integrate as one batch
    groups: dict[int, list[tuple]] = {}
    for entry in drawn:
        groups.setdefault(entry[1], []).append(entry)

    total: ad.Node | None = None
    for n_sub in sorted(groups):
        entries = groups[n_sub]
        js = [e[0] for e in entries]
        x0 = values[[j - 1 for j in js]]
        t0 = times[[j - 1 for j in js]]
        dts = np.array([e[2] for e in entries])
        noise = np.stack([e[3] for e in entries])  # (Kg, M, n_sub, P)
        batch = simulate_span(x0, t0, dts, noise, drift, diffusion, record_graph=record_graph)
        ll = simulated_loglik(values[js], batch.terminal, None, log_sigma)  # (Kg,)
        part = ad.ssum(ll)
        total = part if total is None else ad.add(total, part)
    return total


def log_prior(params: ad.ParamSet, spec: PriorSpec) -> tuple[float, np.ndarray]:
    """Gaussian log prior (additive constant dropped) and its exact gradient.

    Returns ``(sum_p -p^2 / (2 sigma_p^2), grad)`` with ``grad`` laid out
    like ``params.flat()``.
    """
    value = 0.0
    grad = np.empty(params.n_params)
    for name in params.names:
        std = spec.std_for(name)
        p = params.values[name]
        value -= float(np.sum(p * p)) / (2.0 * std * std)
        grad[params.block_slice(name)] = (-p / (std * std)).ravel()
    return value, grad
