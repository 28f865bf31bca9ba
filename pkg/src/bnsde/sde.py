"""Euler-Maruyama simulation of the latent SDE, differentiable end to end.

A path batch is advanced as ``h <- h + m(h, t) dt + L(h, t) dW`` with
``dW ~ N(0, dt I_P)``. Drift and diffusion enter as callables building tape
nodes, so gradients of any scalar function of the terminal states flow back
into network parameters while the pre-drawn noise stays fixed
(reparameterized paths). With ``record_graph=False`` the chain is cut after
every step, which keeps memory constant for large Monte Carlo runs while
using the exact same arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .nets import DiffusionForm

__all__ = [
    "SdeConfig",
    "WienerNoise",
    "PathBatch",
    "PathDivergenceError",
    "sample_noise",
    "em_step",
    "simulate",
    "simulate_span",
]

DIVERGENCE_GUARD = 1e6

DriftFn = Callable[[ad.Node, object], ad.Node]
DiffusionFn = Callable[[ad.Node, object, np.ndarray], ad.Node]


class PathDivergenceError(RuntimeError):
    """A simulated state left the finite / |h| <= guard region."""

    def __init__(self, step: int, k: int | None = None, m: int | None = None):
        loc = f"path (k={k}, m={m}), " if k is not None else ""
        super().__init__(f"state diverged at {loc}step {step}")
        self.step = step
        self.k = k
        self.m = m


@dataclass(frozen=True)
class SdeConfig:
    """Integration setup: horizon, resolution, Monte Carlo width and state shape."""

    flow_time: float = 1.0
    n_steps: int = 20
    n_paths: int = 8
    state_dim: int = 1
    form: DiffusionForm | None = None

    def __post_init__(self):
        if self.flow_time <= 0:
            raise ValueError("flow_time must be > 0")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        form = self.form if self.form is not None else DiffusionForm.diagonal(self.state_dim)
        object.__setattr__(self, "form", form)
        form.validate(self.state_dim)

    @property
    def dt(self) -> float:
        return self.flow_time / self.n_steps

    @property
    def rank(self) -> int:
        return self.form.rank


@dataclass(frozen=True)
class WienerNoise:
    """Pre-drawn increments, marginally N(0, dt), shaped (n_paths, n_steps, rank)."""

    increments: np.ndarray
    dt: float
    stream_key: tuple | None = None


def _as_generator(rng_stream) -> np.random.Generator:
    if isinstance(rng_stream, np.random.Generator):
        return rng_stream
    return np.random.default_rng(rng_stream)


def sample_noise(config: SdeConfig, rng_stream) -> WienerNoise:
    """Draw the full increment block for one simulation.

    ``rng_stream`` is a numpy Generator or anything accepted as a seed; the
    same stream id always yields bit-identical noise.
    """
    key = None if isinstance(rng_stream, np.random.Generator) else (rng_stream,)
    rng = _as_generator(rng_stream)
    shape = (config.n_paths, config.n_steps, config.rank)
    inc = rng.normal(0.0, 1.0, size=shape) * np.sqrt(config.dt)
    return WienerNoise(increments=inc, dt=config.dt, stream_key=key)


def em_step(
    h,
    t,
    dt,
    dw: np.ndarray,
    drift: DriftFn,
    diffusion: DiffusionFn,
    step_index: int = 0,
    check: bool = True,
) -> ad.Node:
    """One Euler-Maruyama update h + m(h,t) dt + L(h,t) dW as a tape node."""
    h = h if isinstance(h, ad.Node) else ad.constant(h)
    dt_arr = np.asarray(dt, dtype=np.float64)
    if dt_arr.ndim > 0:
        # per-element step sizes: (K,) against states (K, ..., D)
        dt_arr = dt_arr.reshape(dt_arr.shape + (1,) * (h.value.ndim - dt_arr.ndim))
    out = ad.add(ad.add(h, ad.mul(drift(h, t), dt_arr)), diffusion(h, t, dw))
    if check and not np.all(np.isfinite(out.value)):
        raise PathDivergenceError(step=step_index)
    return out


@dataclass
class PathBatch:
    """Simulated trajectories: recorded states plus the differentiable terminal node.

    ``states[k, m, 0, :]`` is exactly the initial condition; the terminal
    slice sits at index ``n_steps``.
    """

    states: np.ndarray  # (K, M, n_steps + 1, D)
    terminal: ad.Node  # (K, M, D)
    t0: float | np.ndarray
    dt: float | np.ndarray

    @property
    def n_steps(self) -> int:
        return self.states.shape[2] - 1


def _normalize_noise(noise, k: int) -> np.ndarray:
    inc = noise.increments if isinstance(noise, WienerNoise) else np.asarray(noise, dtype=np.float64)
    if inc.ndim == 3:
        inc = np.broadcast_to(inc, (k,) + inc.shape)
    if inc.ndim != 4 or inc.shape[0] != k:
        raise ad.ShapeError(f"noise must be (M, S, P) or (K, M, S, P) with K={k}, got {inc.shape}")
    return inc


def simulate_span(
    x0_batch: np.ndarray,
    t0,
    dt,
    noise,
    drift: DriftFn,
    diffusion: DiffusionFn,
    record_graph: bool = True,
    guard: float = DIVERGENCE_GUARD,
) -> PathBatch:
    """Integrate a batch of initial states over ``noise.shape[-2]`` steps.

    ``t0`` and ``dt`` may be scalars or per-element (K,) arrays (used when
    scoring trajectory segments of unequal length in one batch).
    """
    x0 = np.asarray(x0_batch, dtype=np.float64)
    if x0.ndim != 2:
        raise ad.ShapeError(f"x0_batch must be (K, D), got {x0.shape}")
    k, d = x0.shape
    inc = _normalize_noise(noise, k)
    m, n_steps = inc.shape[1], inc.shape[2]

    states = np.empty((k, m, n_steps + 1, d))
    states[:, :, 0, :] = x0[:, None, :]
    h = ad.constant(np.broadcast_to(x0[:, None, :], (k, m, d)))

    t0_arr = np.asarray(t0, dtype=np.float64)
    dt_arr = np.asarray(dt, dtype=np.float64)
    for s in range(n_steps):
        t = t0_arr + s * dt_arr
        h = em_step(h, t, dt_arr, inc[:, :, s, :], drift, diffusion, step_index=s, check=False)
        if guard is not None:
            over = ~np.isfinite(h.value) | (np.abs(h.value) > guard)
            if over.any():
                raise _locate_divergence(h.value, s, guard)
        states[:, :, s + 1, :] = h.value
        if not record_graph:
            h = ad.constant(h.value)
    return PathBatch(states=states, terminal=h, t0=t0, dt=dt)


def _locate_divergence(values: np.ndarray, step: int, guard: float = DIVERGENCE_GUARD) -> PathDivergenceError:
    bad = ~np.isfinite(values) | (np.abs(values) > guard)
    where = np.argwhere(bad.any(axis=-1))
    k, m = (int(where[0][0]), int(where[0][1])) if len(where) else (None, None)
    return PathDivergenceError(step=step, k=k, m=m)


def simulate(
    x0_batch: np.ndarray,
    config: SdeConfig,
    noise,
    drift: DriftFn,
    diffusion: DiffusionFn,
    record_graph: bool = True,
) -> PathBatch:
    """Run the flow over [0, flow_time] with the configured resolution."""
    inc = noise.increments if isinstance(noise, WienerNoise) else np.asarray(noise)
    if inc.shape[-2] != config.n_steps or inc.shape[-1] != config.rank:
        raise ad.ShapeError(
            f"noise shaped {inc.shape} does not match n_steps={config.n_steps}, rank={config.rank}"
        )
    return simulate_span(
        x0_batch, 0.0, config.dt, noise, drift, diffusion, record_graph=record_graph
    )
