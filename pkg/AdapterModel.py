"""Frozen base network with SVD-parameterised low-rank adapters.

An adapted layer uses W = W0 + U diag(sigma) V^T with U in St(k, d_out) and
V in St(k, d_in). The log posterior combines the softmax likelihood, Matrix
Langevin priors on U and V, and a N(0, tau^2) prior on each sigma_i. Prior
normalisers are U-independent and omitted, so log posterior values compare
only at fixed (d, k, kappa0).
"""
import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from MatrixLangevin import MatrixLangevin, PriorConfig, make_prior
from StiefelManifold import StiefelPoint, haar_sample

ACTIVATIONS = ("linear", "tanh")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{self.activation}'")
        weight = np.array(self.weight, dtype=np.float64, copy=True)
        bias = np.array(self.bias, dtype=np.float64, copy=True)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError(f"Inconsistent layer shapes: weight {weight.shape}, bias {bias.shape}")
        weight.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def d_out(self):
        return self.weight.shape[0]

    @property
    def d_in(self):
        return self.weight.shape[1]


@dataclass(frozen=True, eq=False)
class BaseModel:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("Base model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ValueError(f"Layer widths do not chain: {prev.d_out} -> {nxt.d_in}")
        if layers[-1].activation != "linear":
            raise ValueError("The output layer must be linear (softmax head)")
        object.__setattr__(self, "layers", layers)

    @property
    def d_in(self):
        return self.layers[0].d_in

    @property
    def n_classes(self):
        return self.layers[-1].d_out


@dataclass(frozen=True, eq=False)
class AdapterLayer:
    U: StiefelPoint
    sigma: np.ndarray
    V: StiefelPoint
    layer_index: int = 0

    def __post_init__(self):
        sigma = np.array(self.sigma, dtype=np.float64, copy=True).reshape(-1)
        if self.U.k != self.V.k or sigma.shape != (self.U.k,):
            raise ValueError(f"Adapter rank mismatch: U {self.U.shape}, V {self.V.shape}, sigma {sigma.shape}")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)

    @property
    def u_array(self):
        return self.U.data

    @property
    def v_array(self):
        return self.V.data

    @property
    def rank(self):
        return self.U.k

    def delta_weight(self):
        return (self.U.data * self.sigma) @ self.V.data.T


@dataclass(frozen=True, eq=False)
class AmbientAdapter:
    """Adapter whose factors are unconstrained matrices (off-manifold evaluation)."""
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    layer_index: int = 0

    @property
    def u_array(self):
        return self.U

    @property
    def v_array(self):
        return self.V

    @property
    def rank(self):
        return self.U.shape[1]

    def delta_weight(self):
        return (self.U * self.sigma) @ self.V.T


@dataclass(frozen=True)
class AdapterGrad:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: Optional[int] = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if inputs.ndim != 2 or inputs.shape[0] != labels.shape[0]:
            raise ValueError(f"Batch shapes disagree: inputs {inputs.shape}, labels {labels.shape}")
        if labels.size and (labels.min() < 0 or (self.n_classes is not None and labels.max() >= self.n_classes)):
            raise ValueError("Labels out of range")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index):
        return LabeledBatch(self.inputs[index], self.labels[index], self.n_classes)


@dataclass(frozen=True, eq=False)
class ModelPosteriorSpec:
    priors_U: tuple
    priors_V: tuple
    tau: float = 0.1

    def __post_init__(self):
        if len(self.priors_U) != len(self.priors_V):
            raise ValueError("One prior per Bayesian factor is required")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        object.__setattr__(self, "priors_U", tuple(self.priors_U))
        object.__setattr__(self, "priors_V", tuple(self.priors_V))


def _adapter_map(base, adapters):
    mapping = {}
    for adapter in adapters:
        idx = adapter.layer_index
        if idx in mapping or not 0 <= idx < len(base.layers):
            raise ValueError(f"Invalid or duplicate adapter layer index {idx}")
        layer = base.layers[idx]
        if adapter.u_array.shape[0] != layer.d_out or adapter.v_array.shape[0] != layer.d_in:
            raise ValueError(
                f"Adapter shapes {adapter.u_array.shape}/{adapter.v_array.shape} do not match layer {idx} "
                f"({layer.d_out}x{layer.d_in})")
        mapping[idx] = adapter
    return mapping


def _check_inputs(base, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != base.d_in:
        raise ValueError(f"Inputs must be n x {base.d_in}, got {x.shape}")
    return x


def _forward_cache(base, adapters, x):
    mapping = _adapter_map(base, adapters)
    activations = [x]
    weights = []
    a = x
    for idx, layer in enumerate(base.layers):
        W = layer.weight + mapping[idx].delta_weight() if idx in mapping else layer.weight
        z = a @ W.T + layer.bias
        a = np.tanh(z) if layer.activation == "tanh" else z
        weights.append(W)
        activations.append(a)
    return activations, weights, mapping


def forward(base, adapters, x):
    """Logits (n x C) of the adapted network."""
    x = _check_inputs(base, x)
    activations, _, _ = _forward_cache(base, adapters, x)
    return activations[-1]


def predict_proba(base, adapters, x, temperature=1.0):
    return softmax(forward(base, adapters, x) / temperature, axis=1)


def backward(base, adapters, x, dlogits):
    """Reverse pass: gradients of sum(dlogits * logits) w.r.t. each adapter's U, sigma, V."""
    x = _check_inputs(base, x)
    activations, weights, mapping = _forward_cache(base, adapters, x)
    g = np.asarray(dlogits, dtype=np.float64)
    grads = {}
    for idx in reversed(range(len(base.layers))):
        layer = base.layers[idx]
        if layer.activation == "tanh":
            g = g * (1.0 - activations[idx + 1] ** 2)
        if idx in mapping:
            adapter = mapping[idx]
            E = g.T @ activations[idx]
            U, V, sigma = adapter.u_array, adapter.v_array, adapter.sigma
            grads[idx] = AdapterGrad(
                U=(E @ V) * sigma,
                sigma=np.einsum("ai,ab,bi->i", U, E, V),
                V=(E.T @ U) * sigma,
            )
        if idx > 0:
            g = g @ weights[idx]
    return [grads[adapter.layer_index] for adapter in adapters]


def jvp_logits(base, adapters, x, directions):
    """Directional derivative of the logits along per-adapter (dU, dsigma, dV) directions.

    `directions` is aligned with `adapters`; None leaves that adapter fixed.
    Returns (logits, dlogits).
    """
    x = _check_inputs(base, x)
    mapping = _adapter_map(base, adapters)
    tangent = {adapter.layer_index: direction for adapter, direction in zip(adapters, directions)}
    a = x
    da = np.zeros_like(x)
    for idx, layer in enumerate(base.layers):
        W = layer.weight
        dW = None
        if idx in mapping:
            adapter = mapping[idx]
            W = W + adapter.delta_weight()
            direction = tangent.get(idx)
            if direction is not None:
                dU, dsigma, dV = direction
                U, V, sigma = adapter.u_array, adapter.v_array, adapter.sigma
                dW = (dU * sigma) @ V.T + (U * dsigma) @ V.T + (U * sigma) @ dV.T
        z = a @ W.T + layer.bias
        dz = da @ W.T
        if dW is not None:
            dz = dz + a @ dW.T
        if layer.activation == "tanh":
            a = np.tanh(z)
            da = (1.0 - a ** 2) * dz
        else:
            a, da = z, dz
    return a, da


def log_likelihood(base, adapters, batch):
    if len(batch) == 0:
        return 0.0
    logp = log_softmax(forward(base, adapters, batch.inputs), axis=1)
    return float(np.sum(logp[np.arange(len(batch)), batch.labels]))


def log_prior(adapters, spec):
    total = 0.0
    for adapter, prior_U, prior_V in zip(adapters, spec.priors_U, spec.priors_V):
        total += float(np.sum(prior_U.F * adapter.u_array) + np.sum(prior_V.F * adapter.v_array))
        total -= float(np.sum(adapter.sigma ** 2)) / (2.0 * spec.tau ** 2)
    return total


def log_posterior(base, adapters, spec, batch, data_scale=1.0):
    """Log posterior up to the omitted prior normalisers.

    `data_scale` multiplies the likelihood, e.g. N / n when a subset stands in for N points.
    """
    _check_spec(adapters, spec)
    return data_scale * log_likelihood(base, adapters, batch) + log_prior(adapters, spec)


def _check_spec(adapters, spec):
    if len(spec.priors_U) != len(adapters):
        raise ValueError(f"Posterior spec has {len(spec.priors_U)} priors for {len(adapters)} adapters")
    for adapter, prior_U, prior_V in zip(adapters, spec.priors_U, spec.priors_V):
        if prior_U.shape != adapter.u_array.shape or prior_V.shape != adapter.v_array.shape:
            raise ValueError("Posterior spec does not match adapter structure")


def likelihood_grad(base, adapters, batch):
    if len(batch) == 0:
        return [AdapterGrad(np.zeros_like(a.u_array), np.zeros_like(a.sigma), np.zeros_like(a.v_array)) for a in adapters]
    probs = predict_proba(base, adapters, batch.inputs)
    dlogits = -probs
    dlogits[np.arange(len(batch)), batch.labels] += 1.0
    return backward(base, adapters, batch.inputs, dlogits)


def grad_log_posterior(base, adapters, spec, batch, data_scale=1.0):
    """Exact ambient gradients (pre-projection) of log_posterior for each adapter."""
    _check_spec(adapters, spec)
    grads = []
    for adapter, g, prior_U, prior_V in zip(adapters, likelihood_grad(base, adapters, batch), spec.priors_U, spec.priors_V):
        grads.append(AdapterGrad(
            U=data_scale * g.U + prior_U.F,
            sigma=data_scale * g.sigma - adapter.sigma / spec.tau ** 2,
            V=data_scale * g.V + prior_V.F,
        ))
    return grads


def init_base_model(d_in, hidden, n_classes, rng, activation="linear"):
    """Two frozen layers: W0 (hidden x d_in) with the given activation, then a linear head."""
    first = DenseLayer(rng.standard_normal((hidden, d_in)) / np.sqrt(d_in), np.zeros(hidden), activation)
    head = DenseLayer(rng.standard_normal((n_classes, hidden)) / np.sqrt(hidden), np.zeros(n_classes), "linear")
    return BaseModel((first, head))


def init_adapters(base, rank, rng, layer_indices=(0,)):
    """Haar-initialised factors with sigma = 0, so the adapted model starts at the base model."""
    adapters = []
    for idx in layer_indices:
        layer = base.layers[idx]
        adapters.append(AdapterLayer(
            U=haar_sample(layer.d_out, rank, rng),
            sigma=np.zeros(rank),
            V=haar_sample(layer.d_in, rank, rng),
            layer_index=idx,
        ))
    return adapters


def make_posterior_spec(adapters, prior_config):
    return ModelPosteriorSpec(
        priors_U=tuple(make_prior(a.U, prior_config) for a in adapters),
        priors_V=tuple(make_prior(a.V, prior_config) for a in adapters),
        tau=prior_config.tau,
    )


def base_fingerprint(base):
    digest = hashlib.sha256()
    for layer in base.layers:
        digest.update(layer.activation.encode())
        digest.update(np.ascontiguousarray(layer.weight).tobytes())
        digest.update(np.ascontiguousarray(layer.bias).tobytes())
    return digest.hexdigest()


def save_checkpoint(path, base, parameter_sets, spec, prior_config, metadata=None, extra_arrays=None):
    """Write a versioned .npz checkpoint.

    `parameter_sets` is a list of adapter lists (one for a MAP model, several for an ensemble).
    """
    arrays = {}
    header = {
        "format_version": CHECKPOINT_VERSION,
        "activations": [layer.activation for layer in base.layers],
        "n_sets": len(parameter_sets),
        "layer_indices": [a.layer_index for a in parameter_sets[0]] if parameter_sets else [],
        "prior": prior_config.model_dump(),
        "tau": spec.tau,
        "base_fingerprint": base_fingerprint(base),
        "metadata": metadata or {},
        "extra": sorted((extra_arrays or {}).keys()),
    }
    for i, layer in enumerate(base.layers):
        arrays[f"base_{i}_weight"] = layer.weight
        arrays[f"base_{i}_bias"] = layer.bias
    for s, adapters in enumerate(parameter_sets):
        for j, adapter in enumerate(adapters):
            arrays[f"set_{s}_{j}_U"] = adapter.u_array
            arrays[f"set_{s}_{j}_sigma"] = adapter.sigma
            arrays[f"set_{s}_{j}_V"] = adapter.v_array
    for j, (prior_U, prior_V) in enumerate(zip(spec.priors_U, spec.priors_V)):
        arrays[f"prior_{j}_FU"] = prior_U.F
        arrays[f"prior_{j}_FV"] = prior_V.F
    for name, value in (extra_arrays or {}).items():
        arrays[f"extra_{name}"] = np.asarray(value)
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"Unsupported checkpoint version {header.get('format_version')}")
        layers = tuple(
            DenseLayer(data[f"base_{i}_weight"], data[f"base_{i}_bias"], activation)
            for i, activation in enumerate(header["activations"]))
        base = BaseModel(layers)
        parameter_sets = []
        for s in range(header["n_sets"]):
            parameter_sets.append([
                AdapterLayer(StiefelPoint(data[f"set_{s}_{j}_U"]), data[f"set_{s}_{j}_sigma"],
                             StiefelPoint(data[f"set_{s}_{j}_V"]), layer_index=idx)
                for j, idx in enumerate(header["layer_indices"])])
        n_adapters = len(header["layer_indices"])
        spec = ModelPosteriorSpec(
            priors_U=tuple(MatrixLangevin(data[f"prior_{j}_FU"]) for j in range(n_adapters)),
            priors_V=tuple(MatrixLangevin(data[f"prior_{j}_FV"]) for j in range(n_adapters)),
            tau=header["tau"],
        )
        extra = {name: np.array(data[f"extra_{name}"]) for name in header["extra"]}
    if base_fingerprint(base) != header["base_fingerprint"]:
        raise ValueError("Checkpoint base weights do not match their fingerprint")
    return {
        "base": base,
        "parameter_sets": parameter_sets,
        "spec": spec,
        "prior": PriorConfig(**header["prior"]),
        "metadata": header["metadata"],
        "extra": extra,
    }
