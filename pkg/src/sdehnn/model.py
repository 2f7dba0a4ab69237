"""SDE-HNN: init layer -> neural SDE block -> mean and log-variance heads.

The hidden representation ``z0 = init(x)`` is integrated with
Euler–Maruyama under a drift network ``f`` and a diffusion network ``g``;
the mean is read from the terminal state, ``mu = h1(z_T)``, and the
log-variance from the diffusion re-evaluated there, ``s = h2(g(z_T))``.
With zero Euler steps the model is an ordinary heteroscedastic network.
"""
from __future__ import annotations

import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DimensionError
from .layers import DenseLayer, RecurrentEncoder, RecurrentField
from .sde import BrownianSource, SdeConfig, solve

CHECKPOINT_VERSION = 1
INIT_STREAM = 7


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: int = 64
    init_type: str = "dense"      # dense | recurrent
    field_type: str = "dense"     # dense | recurrent, for both drift and diffusion
    window: int = 1               # time steps per input for a recurrent init layer
    diffusion_activation: str = "softplus"
    diffusion_bias: float = -2.0
    init_scheme: str = "glorot"   # glorot | spread (dense init layer only, see SdeHnn.spread_init)

    def __post_init__(self):
        if self.init_scheme not in ("glorot", "spread"):
            raise ConfigError(f"init_scheme must be 'glorot' or 'spread', got {self.init_scheme!r}")
        if self.init_scheme == "spread" and self.init_type != "dense":
            raise ConfigError("init_scheme 'spread' needs a dense init layer")
        for label, value in (("init_type", self.init_type), ("field_type", self.field_type)):
            if value not in ("dense", "recurrent"):
                raise ConfigError(f"{label} must be 'dense' or 'recurrent', got {value!r}")
        if self.input_dim < 1 or self.hidden < 1 or self.window < 1:
            raise ConfigError("input_dim, hidden and window must be positive")


@dataclass
class Prediction:
    """Per-input mean and log-variance, each a ``(1, B)`` tensor."""

    mean: Tensor
    log_var: Tensor

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_var.data)


@dataclass(frozen=True)
class SamplingConfig:
    mc_samples: int = 20
    seed: int = 0
    workers: int = 1
    stream: int = 0

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")


@dataclass
class SampleSet:
    """Stacked Monte-Carlo predictions, arrays of shape ``(M, B)``."""

    means: np.ndarray
    variances: np.ndarray

    def __len__(self) -> int:
        return self.means.shape[0]


@dataclass
class UncertaintyEstimate:
    aleatoric: np.ndarray
    epistemic: np.ndarray
    total: np.ndarray
    mean: np.ndarray


class SdeHnn:
    """The full regressor. ``training`` controls spectral-norm state updates."""

    def __init__(self, arch: Architecture, sde: SdeConfig | None = None, seed: int = 0):
        self.arch = arch
        self.sde = sde if sde is not None else SdeConfig()
        self.seed = seed
        self.training = False
        rng = np.random.default_rng([seed, INIT_STREAM])
        h = arch.hidden
        if arch.init_type == "dense":
            self.init_layer = DenseLayer(arch.input_dim * arch.window, h, "tanh", rng=rng, name="init")
        else:
            self.init_layer = RecurrentEncoder(arch.input_dim, h, rng=rng, name="init")
        if arch.field_type == "dense":
            self.drift = DenseLayer(h, h, "tanh", spectral_norm=True, rng=rng, name="drift")
            self.diffusion = DenseLayer(h, h, arch.diffusion_activation, spectral_norm=True,
                                        rng=rng, name="diffusion")
            self.diffusion.bias.data[:] = arch.diffusion_bias
        else:
            self.drift = RecurrentField(h, spectral_norm=True, rng=rng, name="drift")
            self.diffusion = RecurrentField(h, spectral_norm=True, rng=rng, name="diffusion")
        self.mean_head = DenseLayer(h, 1, "identity", rng=rng, name="mean_head")
        self.var_head = DenseLayer(h, 1, "identity", rng=rng, name="var_head")

    @property
    def layers(self):
        return {"init": self.init_layer, "drift": self.drift, "diffusion": self.diffusion,
                "mean_head": self.mean_head, "var_head": self.var_head}

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for layer in self.layers.values():
            params.update(layer.parameters())
        return params

    def parameter_group(self, layer_name: str) -> dict[str, Tensor]:
        return dict(self.layers[layer_name].parameters())

    def sn_states(self) -> dict:
        states = {}
        for layer in self.layers.values():
            states.update(layer.sn_states())
        return states

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))

    def train(self) -> "SdeHnn":
        self.training = True
        return self

    def eval(self) -> "SdeHnn":
        self.training = False
        return self

    def encode(self, inputs: np.ndarray):
        """Turn an ``(N, w, D)`` or ``(N, d)`` array into the init layer's input layout."""
        arr = np.asarray(inputs, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if self.arch.init_type == "dense":
            flat = arr.reshape(arr.shape[0], -1)
            if flat.shape[1] != self.arch.input_dim * self.arch.window:
                raise DimensionError(
                    f"inputs flatten to width {flat.shape[1]}, model expects "
                    f"{self.arch.input_dim * self.arch.window}")
            return Tensor(flat.T)
        if arr.ndim == 2:
            arr = arr[:, :, None] if self.arch.input_dim == 1 else arr[:, None, :]
        if arr.shape[2] != self.arch.input_dim:
            raise DimensionError(f"inputs have {arr.shape[2]} variables, model expects {self.arch.input_dim}")
        return [Tensor(arr[:, t, :].T) for t in range(arr.shape[1])]

    def spread_init(self, inputs: np.ndarray, scale: float = 0.5) -> None:
        """Data-dependent init of the dense init layer.

        Each tanh unit is centred on a random training input and gets slopes of
        order ``scale * H / span`` per input column, so the units tile the
        observed input range instead of all switching at the origin.
        """
        if self.arch.init_type != "dense":
            raise ConfigError("spread_init needs a dense init layer")
        x = self.encode(inputs).data
        if x.shape[1] == 0:
            raise ConfigError("spread_init needs at least one input")
        d, h = x.shape[0], self.arch.hidden
        span = x.max(axis=1) - x.min(axis=1)
        span = np.where(span > 0, span, 1.0)
        rng = np.random.default_rng([self.seed, INIT_STREAM, 1])
        w = rng.uniform(-1.0, 1.0, (h, d)) * (scale * h / d) / span
        centres = x[:, rng.integers(0, x.shape[1], h)]
        self.init_layer.weight.data[...] = w
        self.init_layer.bias.data[...] = -np.sum(w * centres.T, axis=1, keepdims=True)

    def forward(self, x, source: BrownianSource, sample: int = 0, sde: SdeConfig | None = None):
        """One stochastic pass. Returns ``(Prediction, trajectory_or_None)``."""
        sde = sde if sde is not None else self.sde
        update = self.training
        init = self.init_layer.bind(update)
        drift = self.drift.bind(update)
        diffusion = self.diffusion.bind(update)
        z0 = init(x)
        z_t, trajectory = solve(z0, drift, diffusion, sde, source, sample)
        mean = self.mean_head.bind()(z_t)
        log_var = self.var_head.bind()(diffusion(z_t))
        return Prediction(mean, log_var), trajectory

    def __call__(self, x, source: BrownianSource, sample: int = 0) -> Prediction:
        return self.forward(x, source, sample)[0]

    # checkpoints
    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "architecture": asdict(self.arch),
            "sde": asdict(self.sde),
            "seed": self.seed,
            "parameters": {name: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
                           for name, t in self.parameters().items()},
            "spectral_state": {name: {"u": s.u.ravel().tolist(), "v": s.v.ravel().tolist()}
                               for name, s in self.sn_states().items()},
        }

    def load_state_dict(self, state: dict) -> None:
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format_version {state.get('format_version')!r}, expected {CHECKPOINT_VERSION}")
        params = self.parameters()
        stored = state.get("parameters", {})
        if set(stored) != set(params):
            missing = sorted(set(params) - set(stored))
            extra = sorted(set(stored) - set(params))
            raise CheckpointError(f"checkpoint layers do not match model: missing {missing}, unexpected {extra}")
        for name, tensor in params.items():
            entry = stored[name]
            if tuple(entry["shape"]) != tensor.shape:
                raise CheckpointError(f"{name}: checkpoint shape {entry['shape']} vs model {list(tensor.shape)}")
            tensor.data[...] = np.asarray(entry["values"], dtype=np.float64).reshape(tensor.shape)
        for name, sn in self.sn_states().items():
            if name in state.get("spectral_state", {}):
                sn.load_state_dict(state["spectral_state"][name])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.state_dict(), fh)

    @classmethod
    def load(cls, path) -> "SdeHnn":
        try:
            with open(path) as fh:
                state = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from exc
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format_version {state.get('format_version')!r}, expected {CHECKPOINT_VERSION}")
        model = cls(Architecture(**state["architecture"]), SdeConfig(**state["sde"]), seed=state["seed"])
        model.load_state_dict(state)
        return model

    def snapshot(self) -> dict:
        """In-memory copy of parameters and spectral state (for best-epoch restore)."""
        return {"params": {k: t.data.copy() for k, t in self.parameters().items()},
                "sn": {k: s.state_dict() for k, s in self.sn_states().items()}}

    def restore(self, snap: dict) -> None:
        for k, t in self.parameters().items():
            t.data[...] = snap["params"][k]
        for k, s in self.sn_states().items():
            s.load_state_dict(snap["sn"][k])


def forward(model: SdeHnn, x, source: BrownianSource, sample: int = 0) -> Prediction:
    return model(x, source, sample)


def nll_loss(pred: Prediction, y) -> Tensor:
    """Sum over the batch of (y - mu)^2 / 2 * exp(-s) + s / 2."""
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    if y.shape != pred.mean.shape:
        raise DimensionError(f"targets {y.shape} vs predictions {pred.mean.shape}")
    resid = Tensor(y) - pred.mean
    per_item = ad.square(resid) * ad.exp(-pred.log_var) * 0.5 + pred.log_var * 0.5
    return ad.total(per_item)


def sample_predictions(model: SdeHnn, x, cfg: SamplingConfig, sde: SdeConfig | None = None) -> SampleSet:
    """M inference passes; pass ``m`` uses Brownian/mask substream ``m`` of ``cfg.seed``."""
    source = BrownianSource(cfg.seed, cfg.stream)

    def one(m: int):
        pred, _ = model.forward(x, source, sample=m, sde=sde)
        return pred.mean.data[0].copy(), pred.variance[0].copy()

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(one, range(cfg.mc_samples)))
    else:
        results = [one(m) for m in range(cfg.mc_samples)]
    return SampleSet(np.stack([r[0] for r in results]), np.stack([r[1] for r in results]))


def decompose_uncertainty(samples: SampleSet) -> UncertaintyEstimate:
    """Aleatoric = mean of sampled variances; epistemic = population variance of sampled means."""
    means = np.asarray(samples.means, dtype=np.float64)
    variances = np.asarray(samples.variances, dtype=np.float64)
    if means.shape[0] < 2:
        raise ConfigError("epistemic uncertainty needs at least 2 Monte-Carlo samples")
    # shifting by the first sample keeps identical means at exactly zero spread
    shifted = means - means[0]
    epistemic = np.maximum(np.mean(shifted ** 2, axis=0) - np.mean(shifted, axis=0) ** 2, 0.0)
    aleatoric = np.mean(variances, axis=0)
    return UncertaintyEstimate(aleatoric, epistemic, aleatoric + epistemic, np.mean(means, axis=0))


_STD_NORMAL = statistics.NormalDist()


def normal_ppf(p: float) -> float:
    """Inverse standard-normal CDF (Wichura's AS241 rational approximation, ~1e-16 relative)."""
    if not 0.0 < p < 1.0:
        raise ConfigError(f"probability must lie in (0, 1), got {p}")
    return _STD_NORMAL.inv_cdf(p)


def quantile(mean, total_variance, p: float):
    """Gaussian quantile mean + z_p * sqrt(variance)."""
    z = normal_ppf(p)
    return np.asarray(mean) + z * np.sqrt(np.asarray(total_variance))


def predictive_interval(estimate, mean, confidence: float, variance: str = "total"):
    """Central interval mean -/+ z_{(1+c)/2} sqrt(var).

    ``estimate`` is an :class:`UncertaintyEstimate` (``variance`` picks the
    ``total`` or ``aleatoric`` field) or a plain variance array.
    """
    if not 0.0 < confidence < 1.0:
        raise ConfigError(f"confidence must lie in (0, 1), got {confidence}")
    var = getattr(estimate, variance) if isinstance(estimate, UncertaintyEstimate) else estimate
    half = normal_ppf((1.0 + confidence) / 2.0) * np.sqrt(np.asarray(var, dtype=np.float64))
    mean = np.asarray(mean, dtype=np.float64)
    return mean - half, mean + half
