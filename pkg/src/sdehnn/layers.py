"""Layer primitives: dense, LSTM cell, dropout and spectral normalization.

Layers own their parameters as leaf :class:`Tensor` objects. ``layer.bind()``
prepares the effective weights for one forward pass (running the power
iteration when spectral normalization is on) and returns a plain callable,
so a layer evaluated at every Euler step pays for normalization only once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

SIGMA_FLOOR = 1e-12


def glorot_uniform(out_dim: int, in_dim: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def _unit(vec: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm < 1e-300:
        return fallback
    return vec / norm


class SpectralNorm:
    """Persistent power-iteration vectors for one weight matrix.

    ``u`` tracks the leading left singular vector and ``v`` the right one.
    On construction the iteration is run to convergence, so every later call
    starts warm.
    """

    def __init__(self, weight: np.ndarray, rng: np.random.Generator | None = None,
                 tol: float = 1e-13, max_iters: int = 10_000):
        rng = rng if rng is not None else np.random.default_rng(0)
        rows, cols = weight.shape
        self.u = _unit(rng.standard_normal((rows, 1)), np.ones((rows, 1)) / np.sqrt(rows))
        self.v = _unit(rng.standard_normal((cols, 1)), np.ones((cols, 1)) / np.sqrt(cols))
        self.converge(weight, tol=tol, max_iters=max_iters)

    def power_iterate(self, weight: np.ndarray, iters: int) -> float:
        if iters < 1:
            raise ConfigError(f"power iteration needs iters >= 1, got {iters}")
        for _ in range(iters):
            self.v = _unit(weight.T @ self.u, self.v)
            self.u = _unit(weight @ self.v, self.u)
        return self.sigma(weight)

    def converge(self, weight: np.ndarray, tol: float = 1e-13, max_iters: int = 10_000) -> float:
        prev = self.power_iterate(weight, 1)
        for _ in range(max_iters):
            cur = self.power_iterate(weight, 1)
            if abs(cur - prev) <= tol * max(cur, SIGMA_FLOOR):
                return cur
            prev = cur
        return prev

    def sigma(self, weight: np.ndarray) -> float:
        return float((self.u.T @ weight @ self.v)[0, 0])

    def state_dict(self) -> dict:
        return {"u": self.u.copy(), "v": self.v.copy()}

    def load_state_dict(self, state: dict) -> None:
        u = np.asarray(state["u"], dtype=np.float64).reshape(self.u.shape)
        v = np.asarray(state["v"], dtype=np.float64).reshape(self.v.shape)
        self.u, self.v = u, v


def spectral_normalize(weight: Tensor, iters: int, state: SpectralNorm,
                       update: bool = True) -> Tensor:
    """Divide ``weight`` by the power-iteration estimate of its largest singular value.

    With ``update`` the state vectors advance ``iters`` steps first (warm
    start from the previous call). The estimate ``u^T W v`` is part of the
    graph, so gradients see the normalization; ``u`` and ``v`` are constants.
    A matrix whose estimate is below 1e-12 is returned unchanged.
    """
    if update:
        state.power_iterate(weight.data, iters)
    if state.sigma(weight.data) < SIGMA_FLOOR:
        return weight
    sigma = Tensor(state.u.T) @ weight @ Tensor(state.v)
    return weight / sigma


class DenseLayer:
    """Affine map followed by an elementwise activation."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "tanh",
                 spectral_norm: bool = False, rng: np.random.Generator | None = None,
                 sn_iters: int = 5, name: str = "dense"):
        if activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}; choose from {sorted(ad.ACTIVATIONS)}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self.name = name
        self.sn_iters = sn_iters
        self.weight = Tensor(glorot_uniform(out_dim, in_dim, rng), requires_grad=True,
                             name=f"{name}.weight")
        self.bias = Tensor(np.zeros((out_dim, 1)), requires_grad=True, name=f"{name}.bias")
        self.sn = SpectralNorm(self.weight.data, rng) if spectral_norm else None

    @property
    def spectral_norm(self) -> bool:
        return self.sn is not None

    def effective_weight(self, update: bool = False) -> Tensor:
        if self.sn is None:
            return self.weight
        return spectral_normalize(self.weight, self.sn_iters, self.sn, update=update)

    def bind(self, update: bool = False):
        weight = self.effective_weight(update)
        bias = self.bias
        act = ad.ACTIVATIONS[self.activation]
        in_dim = self.in_dim

        def apply(x: Tensor) -> Tensor:
            if x.rows != in_dim:
                raise DimensionError(f"{self.name}: expected {in_dim} input rows, got {x.rows}")
            return act(weight @ x + bias)

        return apply

    def __call__(self, x: Tensor, update: bool = False) -> Tensor:
        return self.bind(update)(x)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def sn_states(self) -> dict[str, SpectralNorm]:
        return {f"{self.name}.weight": self.sn} if self.sn is not None else {}


def dense_forward(x: Tensor, layer: DenseLayer) -> Tensor:
    return layer(x)


GATES = ("input", "forget", "cell", "output")


class RecurrentCell:
    """Standard LSTM cell with separate input/recurrent matrices per gate."""

    def __init__(self, in_dim: int, hidden: int, spectral_norm: bool = False,
                 rng: np.random.Generator | None = None, sn_iters: int = 5,
                 forget_bias: float = 1.0, name: str = "lstm"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.hidden = in_dim, hidden
        self.name = name
        self.sn_iters = sn_iters
        self.w_x: dict[str, Tensor] = {}
        self.w_h: dict[str, Tensor] = {}
        self.b: dict[str, Tensor] = {}
        self.sn: dict[str, SpectralNorm] = {}
        for gate in GATES:
            self.w_x[gate] = Tensor(glorot_uniform(hidden, in_dim, rng), requires_grad=True,
                                    name=f"{name}.{gate}.w_x")
            self.w_h[gate] = Tensor(glorot_uniform(hidden, hidden, rng), requires_grad=True,
                                    name=f"{name}.{gate}.w_h")
            bias = np.full((hidden, 1), forget_bias if gate == "forget" else 0.0)
            self.b[gate] = Tensor(bias, requires_grad=True, name=f"{name}.{gate}.b")
            if spectral_norm:
                self.sn[f"{name}.{gate}.w_x"] = SpectralNorm(self.w_x[gate].data, rng)
                self.sn[f"{name}.{gate}.w_h"] = SpectralNorm(self.w_h[gate].data, rng)

    @property
    def spectral_norm(self) -> bool:
        return bool(self.sn)

    def _effective(self, weight: Tensor, update: bool) -> Tensor:
        state = self.sn.get(weight.name)
        if state is None:
            return weight
        return spectral_normalize(weight, self.sn_iters, state, update=update)

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        return Tensor(np.zeros((self.hidden, batch))), Tensor(np.zeros((self.hidden, batch)))

    def bind(self, update: bool = False):
        wx = {g: self._effective(self.w_x[g], update) for g in GATES}
        wh = {g: self._effective(self.w_h[g], update) for g in GATES}
        b = self.b
        hidden, in_dim = self.hidden, self.in_dim

        def step(x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
            h, c = state
            if x.rows != in_dim:
                raise DimensionError(f"{self.name}: expected {in_dim} input rows, got {x.rows}")
            if h.rows != hidden or c.rows != hidden or h.shape != c.shape or h.cols != x.cols:
                raise DimensionError(
                    f"{self.name}: state shapes {h.shape}/{c.shape} do not match hidden={hidden}, batch={x.cols}")
            pre = {g: wx[g] @ x + wh[g] @ h + b[g] for g in GATES}
            i = ad.sigmoid(pre["input"])
            f = ad.sigmoid(pre["forget"])
            g_ = ad.tanh(pre["cell"])
            o = ad.sigmoid(pre["output"])
            c_new = f * c + i * g_
            h_new = o * ad.tanh(c_new)
            return h_new, c_new

        return step

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for gate in GATES:
            for t in (self.w_x[gate], self.w_h[gate], self.b[gate]):
                params[t.name] = t
        return params

    def sn_states(self) -> dict[str, SpectralNorm]:
        return dict(self.sn)


def recurrent_step(cell: RecurrentCell, x_t: Tensor, state: tuple[Tensor, Tensor]):
    return cell.bind()(x_t, state)


class RecurrentEncoder:
    """Runs an LSTM cell over a window and returns the last hidden state.

    Used as the init layer for multivariate windows: the input is a list of
    ``(D, B)`` tensors, one per time step.
    """

    def __init__(self, in_dim: int, hidden: int, rng=None, name: str = "init"):
        self.cell = RecurrentCell(in_dim, hidden, spectral_norm=False, rng=rng, name=name)
        self.in_dim, self.out_dim = in_dim, hidden

    def bind(self, update: bool = False):
        step = self.cell.bind(update)

        def apply(seq) -> Tensor:
            if isinstance(seq, Tensor):
                seq = [seq]
            state = self.cell.zero_state(seq[0].cols)
            for x_t in seq:
                state = step(x_t, state)
            return state[0]

        return apply

    def parameters(self):
        return self.cell.parameters()

    def sn_states(self):
        return self.cell.sn_states()


class RecurrentField:
    """An LSTM cell used as a drift or diffusion network ``R^H -> R^H``.

    The cell's own (h, c) state is carried across successive calls within one
    bound forward pass, i.e. along the Euler iterations, and starts from zero
    at every ``bind``.
    """

    def __init__(self, hidden: int, spectral_norm: bool = True, rng=None, name: str = "field"):
        self.cell = RecurrentCell(hidden, hidden, spectral_norm=spectral_norm, rng=rng, name=name)
        self.in_dim = self.out_dim = hidden

    @property
    def spectral_norm(self) -> bool:
        return self.cell.spectral_norm

    def bind(self, update: bool = False):
        step = self.cell.bind(update)
        state = {}

        def apply(z: Tensor) -> Tensor:
            if "hc" not in state:
                state["hc"] = self.cell.zero_state(z.cols)
            state["hc"] = step(z, state["hc"])
            return state["hc"][0]

        return apply

    def parameters(self):
        return self.cell.parameters()

    def sn_states(self):
        return self.cell.sn_states()


@dataclass
class DropoutMask:
    """Inverted-dropout mask: entries are 0 or 1/keep_probability."""

    keep_probability: float
    mask: np.ndarray
    seed: tuple = ()

    def apply(self, x: Tensor) -> Tensor:
        if self.mask.shape != x.shape:
            raise DimensionError(f"mask shape {self.mask.shape} does not match {x.shape}")
        return x * Tensor(self.mask)


def check_drop_probability(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must satisfy 0 <= p < 1, got {p}")


def sample_mask(shape: tuple, p: float, rng: np.random.Generator, seed: tuple = ()) -> DropoutMask:
    check_drop_probability(p)
    keep = 1.0 - p
    if p == 0.0:
        return DropoutMask(1.0, np.ones(shape), seed)
    kept = rng.random(shape) >= p
    return DropoutMask(keep, kept / keep, seed)


def dropout(x: Tensor, p: float, rng: np.random.Generator, active: bool = True,
            seed: tuple = ()) -> tuple[Tensor, DropoutMask]:
    """Zero each entry with probability ``p`` and rescale survivors by 1/(1-p).

    ``active`` covers both training and Monte-Carlo sampling at inference;
    inactive dropout and ``p == 0`` return ``x`` itself.
    """
    check_drop_probability(p)
    if not active or p == 0.0:
        return x, DropoutMask(1.0, np.ones(x.shape), seed)
    mask = sample_mask(x.shape, p, rng, seed)
    return mask.apply(x), mask
