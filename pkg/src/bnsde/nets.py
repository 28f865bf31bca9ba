"""Drift and diffusion networks over the latent SDE state.

The drift net maps a state (and optionally normalized time) to a velocity in
R^D. The diffusion net produces a D x P matrix under one of three output
parameterizations:

* ``diagonal``  -- softplus of D raw outputs on the diagonal (P = D),
* ``cholesky``  -- lower-triangular factor with softplus diagonal (P = D),
  so L L^T is symmetric positive semi-definite by construction,
* ``lowrank``   -- raw outputs reshaped to D x P for a chosen 0 < P <= D.

Both nets are plain tanh MLPs evaluated through the autodiff tape, so every
forward pass is differentiable with respect to state and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "MlpSpec",
    "DiffusionForm",
    "DriftNet",
    "DiffusionNet",
    "init_params",
    "mlp_forward",
]

_ACTIVATIONS = {"tanh": ad.tanh, "softplus": ad.softplus}


@dataclass(frozen=True)
class MlpSpec:
    """Layer layout of one network. ``input_dim`` already includes the extra
    time feature when time conditioning is enabled."""

    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        sizes = (self.input_dim, *self.hidden, self.output_dim)
        if any(s < 1 for s in sizes):
            raise ValueError(f"all layer sizes must be >= 1, got {sizes}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        sizes = (self.input_dim, *self.hidden, self.output_dim)
        return [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


@dataclass(frozen=True)
class DiffusionForm:
    """Output structure of the diffusion matrix."""

    kind: str  # diagonal | cholesky | lowrank
    rank: int  # P

    KINDS = ("diagonal", "cholesky", "lowrank")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"diffusion form must be one of {self.KINDS}, got {self.kind!r}")

    @classmethod
    def diagonal(cls, state_dim: int) -> "DiffusionForm":
        return cls("diagonal", state_dim)

    @classmethod
    def cholesky(cls, state_dim: int) -> "DiffusionForm":
        return cls("cholesky", state_dim)

    @classmethod
    def lowrank(cls, state_dim: int, rank: int) -> "DiffusionForm":
        form = cls("lowrank", rank)
        form.validate(state_dim)
        return form

    def validate(self, state_dim: int) -> None:
        if self.kind in ("diagonal", "cholesky") and self.rank != state_dim:
            raise ValueError(f"{self.kind} form requires rank == state_dim ({state_dim}), got {self.rank}")
        if not 0 < self.rank <= state_dim:
            raise ValueError(f"rank must satisfy 0 < P <= D, got P={self.rank}, D={state_dim}")

    def raw_output_dim(self, state_dim: int) -> int:
        self.validate(state_dim)
        if self.kind == "diagonal":
            return state_dim
        if self.kind == "cholesky":
            return state_dim * (state_dim + 1) // 2
        return state_dim * self.rank


def init_params(spec: MlpSpec, seed, scale: float = 1.0, prefix: str = "") -> dict[str, np.ndarray]:
    """Draw weights i.i.d. N(0, scale^2 / fan_in), biases zero.

    ``seed`` may be an int or an existing numpy Generator; the same seed
    always produces the same parameters.
    """
    if scale < 0:
        raise ValueError("scale must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    blocks: dict[str, np.ndarray] = {}
    for layer, (out_dim, in_dim) in enumerate(spec.layer_shapes):
        std = scale / np.sqrt(in_dim)
        blocks[f"{prefix}w{layer}"] = rng.normal(0.0, 1.0, size=(out_dim, in_dim)) * std
        blocks[f"{prefix}b{layer}"] = np.zeros(out_dim)
    return blocks


def mlp_forward(spec: MlpSpec, params: ad.ParamSet, prefix: str, x: ad.Node) -> ad.Node:
    if x.shape[-1] != spec.input_dim:
        raise ad.ShapeError(f"input has {x.shape[-1]} features, spec expects {spec.input_dim}")
    act = _ACTIVATIONS[spec.activation]
    h = x
    n_layers = len(spec.layer_shapes)
    for layer in range(n_layers):
        h = ad.affine(h, params.leaf(f"{prefix}w{layer}"), params.leaf(f"{prefix}b{layer}"))
        if layer < n_layers - 1:
            h = act(h)
    return h


def _time_column(shape: tuple[int, ...], t, time_scale: float) -> np.ndarray:
    """Constant time feature t / time_scale shaped (..., 1) to match a state batch."""
    col_shape = shape[:-1] + (1,)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full(col_shape, float(t) / time_scale)
    # per-element times: one value per leading batch entry, broadcast over the rest
    view = t.reshape(t.shape + (1,) * (len(col_shape) - t.ndim))
    return np.broadcast_to(view / time_scale, col_shape)


def _as_node(h) -> ad.Node:
    return h if isinstance(h, ad.Node) else ad.constant(h)


@dataclass(frozen=True)
class DriftNet:
    """MLP m(h, t) -> R^D giving the deterministic part of the dynamics."""

    state_dim: int
    hidden: tuple[int, ...] = (50,)
    time_input: bool = True
    time_scale: float = 1.0
    activation: str = "tanh"
    prefix: str = "drift"

    @property
    def spec(self) -> MlpSpec:
        extra = 1 if self.time_input else 0
        return MlpSpec(self.state_dim + extra, self.hidden, self.state_dim, self.activation)

    def init(self, seed, scale: float = 1.0) -> dict[str, np.ndarray]:
        return init_params(self.spec, seed, scale, prefix=f"{self.prefix}.")

    def forward(self, params: ad.ParamSet, h, t=0.0) -> ad.Node:
        h = _as_node(h)
        if h.shape[-1] != self.state_dim:
            raise ad.ShapeError(f"state has dim {h.shape[-1]}, drift net expects {self.state_dim}")
        x = ad.concat_const(h, _time_column(h.shape, t, self.time_scale)) if self.time_input else h
        return mlp_forward(self.spec, params, f"{self.prefix}.", x)


@dataclass(frozen=True)
class DiffusionNet:
    """MLP L(h, t) -> R^{D x P} scaling the Wiener increments."""

    state_dim: int
    form: DiffusionForm = field(default=None)  # type: ignore[assignment]
    hidden: tuple[int, ...] = (50,)
    time_input: bool = True
    time_scale: float = 1.0
    activation: str = "tanh"
    prefix: str = "diffusion"

    def __post_init__(self):
        form = self.form if self.form is not None else DiffusionForm.diagonal(self.state_dim)
        object.__setattr__(self, "form", form)
        form.validate(self.state_dim)

    @property
    def spec(self) -> MlpSpec:
        extra = 1 if self.time_input else 0
        return MlpSpec(
            self.state_dim + extra,
            self.hidden,
            self.form.raw_output_dim(self.state_dim),
            self.activation,
        )

    def init(self, seed, scale: float = 1.0) -> dict[str, np.ndarray]:
        return init_params(self.spec, seed, scale, prefix=f"{self.prefix}.")

    def _raw(self, params: ad.ParamSet, h, t) -> ad.Node:
        h = _as_node(h)
        if h.shape[-1] != self.state_dim:
            raise ad.ShapeError(f"state has dim {h.shape[-1]}, diffusion net expects {self.state_dim}")
        x = ad.concat_const(h, _time_column(h.shape, t, self.time_scale)) if self.time_input else h
        return mlp_forward(self.spec, params, f"{self.prefix}.", x)

    def _factor_vector(self, raw: ad.Node) -> ad.Node:
        """Structured entries before matrix assembly (softplus where positivity
        is required)."""
        d = self.state_dim
        if self.form.kind == "diagonal":
            return ad.softplus(raw)
        if self.form.kind == "cholesky":
            rows, cols = np.tril_indices(d)
            diag_mask = (rows == cols).astype(np.float64)
            return ad.add(
                ad.mul(ad.softplus(raw), diag_mask),
                ad.mul(raw, 1.0 - diag_mask),
            )
        return raw  # lowrank is unconstrained

    def matrix(self, params: ad.ParamSet, h, t=0.0) -> ad.Node:
        """Full (..., D, P) diffusion matrix satisfying the form's structure."""
        vec = self._factor_vector(self._raw(params, h, t))
        if self.form.kind == "diagonal":
            return ad.scatter_diag(vec)
        if self.form.kind == "cholesky":
            return ad.scatter_tril(vec, self.state_dim)
        return ad.reshape_last(vec, (self.state_dim, self.form.rank))

    def apply(self, params: ad.ParamSet, h, t, dw: np.ndarray) -> ad.Node:
        """L(h, t) @ dw without materializing the matrix when diagonal."""
        vec = self._factor_vector(self._raw(params, h, t))
        if self.form.kind == "diagonal":
            return ad.mul(vec, np.asarray(dw, dtype=np.float64))
        if self.form.kind == "cholesky":
            return ad.matvec(ad.scatter_tril(vec, self.state_dim), dw)
        return ad.matvec(ad.reshape_last(vec, (self.state_dim, self.form.rank)), dw)
