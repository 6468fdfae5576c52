"""CPAC: CNN-pooling blocks, primary capsules, capsule self-attention and
dynamic routing to one class capsule per emotion.

Capsule tensors are ``(batch, num_capsules, capsule_dim)``.  Primary capsules
are laid out position-major: capsule ``i`` at spatial position ``i // T`` has
type ``i % T`` for ``T = num_primary_caps`` capsule types, and routing
transforms are shared by all capsules of a type.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import ops
from .tensor import ContractError, Tensor, as_tensor

DROPOUT_RATE = 0.25


class ConfigurationError(ValueError):
    """Model or run configuration is internally inconsistent."""


@dataclass(frozen=True)
class CpacConfig:
    num_classes: int = 5  # number of DigitCaps, K
    input_frames: int = 64
    num_coeffs: int = 39
    conv_filters: int = 64
    num_blocks: int = 3
    num_primary_caps: int = 16  # capsule types per spatial position
    primary_dim: int = 8
    primary_kernel: int = 3
    primary_stride: int = 2
    digit_dim: int = 16
    routing_iters: int = 3
    dropout: float = DROPOUT_RATE
    # ablation switches
    frontend: str = "cnn_pool"  # "cnn_pool" | "single_conv"
    attention: bool = True
    aggregator: str = "routing"  # "routing" | "recurrent"
    attention_output: str = "weights_times_opri"  # | "qkv_then_opri"
    single_conv_kernel: int = 9
    single_conv_stride: int = 8

    def __post_init__(self):
        counts = dict(
            num_classes=self.num_classes, input_frames=self.input_frames, num_coeffs=self.num_coeffs,
            conv_filters=self.conv_filters, num_primary_caps=self.num_primary_caps,
            primary_dim=self.primary_dim, digit_dim=self.digit_dim, routing_iters=self.routing_iters,
        )
        for name, value in counts.items():
            if value < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}")
        if self.frontend not in ("cnn_pool", "single_conv"):
            raise ConfigurationError(f"unknown frontend {self.frontend!r}")
        if self.aggregator not in ("routing", "recurrent"):
            raise ConfigurationError(f"unknown aggregator {self.aggregator!r}")
        if self.attention_output not in ("weights_times_opri", "qkv_then_opri"):
            raise ConfigurationError(f"unknown attention_output {self.attention_output!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CpacConfig":
        return cls(**d)

    def frontend_shape(self) -> tuple[int, int, int]:
        """Spatial size and channel count of the map fed to PrimaryCaps."""
        h, w = self.input_frames, self.num_coeffs
        if self.frontend == "cnn_pool":
            for _ in range(self.num_blocks):
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise ConfigurationError(
                        f"input {self.input_frames}x{self.num_coeffs} too small for {self.num_blocks} pooling blocks"
                    )
        else:
            k, s, p = self.single_conv_kernel, self.single_conv_stride, (self.single_conv_kernel - 1) // 2
            h, w = ops.conv_output_size(h, k, s, p), ops.conv_output_size(w, k, s, p)
        return h, w, self.conv_filters

    def num_input_caps(self) -> int:
        h, w, _ = self.frontend_shape()
        k, s = self.primary_kernel, self.primary_stride
        p = (k - 1) // 2
        return ops.conv_output_size(h, k, s, p) * ops.conv_output_size(w, k, s, p) * self.num_primary_caps


def ablation_config(config: CpacConfig, algorithm: int | None) -> CpacConfig:
    """Switch settings reproducing the single-corpus ablations.

    1: original single-convolution CapsNet frontend instead of CNN-pooling;
    2: self-attention removed; 3: capsule routing replaced by a recurrent
    aggregator, attention removed.  ``None`` is the full model.
    """
    if algorithm is None:
        return config
    if algorithm == 1:
        return replace(config, frontend="single_conv")
    if algorithm == 2:
        return replace(config, attention=False)
    if algorithm == 3:
        return replace(config, aggregator="recurrent", attention=False)
    raise ConfigurationError(f"single-corpus ablations are 1..3, got {algorithm}")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamSet:
    """Ordered name -> Tensor map; buffers (batch-norm running stats) are not trained."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    def add(self, name: str, value: np.ndarray, buffer: bool = False) -> Tensor:
        if name in self._tensors:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=not buffer)
        self._tensors[name] = t
        if buffer:
            self._buffers.add(name)
        return t

    def adopt(self, name: str, tensor: Tensor, buffer: bool = False) -> None:
        self._tensors[name] = tensor
        if buffer:
            self._buffers.add(name)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def is_buffer(self, name: str) -> bool:
        return name in self._buffers

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._tensors.items() if k not in self._buffers}

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self, names=None) -> dict[str, np.ndarray]:
        out = {}
        for k, t in self.trainable().items():
            if names is not None and k not in names:
                continue
            out[k] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._tensors.items()}

    def component_names(self, component: str) -> list[str]:
        return [k for k in self._tensors if k.split(".", 1)[0] == component]


class CpacParams(ParamSet):
    def __init__(self, config: CpacConfig):
        super().__init__()
        self.config = config

    def copy(self) -> "CpacParams":
        out = CpacParams(self.config)
        for k, t in self.items():
            out.add(k, t.data.copy(), buffer=self.is_buffer(k))
        return out


def component_rng(seed: int, component: str) -> np.random.Generator:
    """Independent stream per component so ablations leave other inits byte-identical."""
    return np.random.default_rng([int(seed), zlib.crc32(component.encode())])


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(config: CpacConfig, seed: int = 0) -> CpacParams:
    p = CpacParams(config)
    f = config.conv_filters
    if config.frontend == "cnn_pool":
        cin = 1
        for i in range(1, config.num_blocks + 1):
            rng = component_rng(seed, f"block{i}")
            p.add(f"block{i}.kernel", _he(rng, (3, 3, cin, f), 9 * cin))
            p.add(f"block{i}.bn_gamma", np.ones(f))
            p.add(f"block{i}.bn_beta", np.zeros(f))
            p.add(f"block{i}.bn_mean", np.zeros(f), buffer=True)
            p.add(f"block{i}.bn_var", np.ones(f), buffer=True)
            cin = f
    else:
        k = config.single_conv_kernel
        rng = component_rng(seed, "frontend")
        p.add("frontend.kernel", _he(rng, (k, k, 1, f), k * k))
        p.add("frontend.bias", np.zeros(f))

    t, d = config.num_primary_caps, config.primary_dim
    k = config.primary_kernel
    rng = component_rng(seed, "primary")
    p.add("primary.kernel", rng.normal(0.0, np.sqrt(1.0 / (k * k * f)), size=(k, k, f, t * d)))
    p.add("primary.bias", np.zeros(t * d))

    if config.attention:
        rng = component_rng(seed, "attention")
        for name in ("query", "key", "value"):
            p.add(f"attention.{name}", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)))

    n_out, e = config.num_classes, config.digit_dim
    if config.aggregator == "routing":
        rng = component_rng(seed, "routing")
        p.add("routing.transforms", rng.normal(0.0, 1.0 / np.sqrt(d), size=(t, n_out, e, d)))
    else:
        hidden = n_out * e
        rng = component_rng(seed, "recurrent")
        p.add("recurrent.input", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden)))
        p.add("recurrent.hidden", rng.normal(0.0, 0.5 / np.sqrt(hidden), size=(hidden, hidden)))
        p.add("recurrent.bias", np.zeros(hidden))
    return p


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def cnn_pool_block(
    x,
    params: ParamSet,
    index: int,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    bn_mode: str | None = None,
    dropout_mode: str | None = None,
    dropout_rate: float = DROPOUT_RATE,
) -> Tensor:
    """conv 3x3 (same) -> batch norm -> elu -> 2x2 average pool -> dropout.

    ``bn_mode`` / ``dropout_mode`` override ``mode`` for one stochastic source.
    """
    x = as_tensor(x)
    pre = f"block{index}"
    h = ops.conv2d(x, params[f"{pre}.kernel"], stride=1, padding="same")
    h = ops.batch_norm(
        h, params[f"{pre}.bn_gamma"], params[f"{pre}.bn_beta"],
        params[f"{pre}.bn_mean"], params[f"{pre}.bn_var"], mode=bn_mode or mode,
    )
    h = ops.elu(h)
    h = ops.avg_pool2d(h, (2, 2), (2, 2))
    return ops.dropout(h, dropout_rate, dropout_mode or mode, rng)


def single_conv_frontend(x, params: ParamSet, config: CpacConfig) -> Tensor:
    """Original CapsNet front: one large ReLU convolution."""
    h = ops.conv2d(
        x, params["frontend.kernel"], stride=config.single_conv_stride, padding="same",
        bias=params["frontend.bias"],
    )
    return ops.relu(h)


def squash(s, axis: int = -1) -> Tensor:
    return ops.squash(s, axis=axis)


def primary_caps(feature_map, params: ParamSet, config: CpacConfig) -> Tensor:
    """Strided conv, regroup activations into ``primary_dim`` vectors, squash."""
    conv = ops.conv2d(
        feature_map, params["primary.kernel"], stride=config.primary_stride, padding="same",
        bias=params["primary.bias"],
    )
    if conv.ndim == 3:
        conv = conv.reshape((1,) + conv.shape)
    n, h, w, c = conv.shape
    if c % config.primary_dim:
        raise ConfigurationError(f"{c} primary channels do not split into capsules of dim {config.primary_dim}")
    caps = conv.reshape(n, h * w * (c // config.primary_dim), config.primary_dim)
    return squash(caps)


def attention_weights(caps, query, key) -> Tensor:
    caps = as_tensor(caps)
    d = caps.shape[-1]
    q = caps @ query
    k = caps @ key
    return ops.softmax((q @ ops.swap_last(k)) * (1.0 / np.sqrt(d)), axis=-1)


def capsule_self_attention(caps, proj, output: str = "weights_times_opri", return_weights: bool = False):
    """Scaled dot-product attention among capsules.

    ``proj`` is ``(query, key, value)``, each ``(d, d)``.  The default output is
    ``softmax(Q K^T / sqrt(d)) @ caps``; ``"qkv_then_opri"`` instead takes the
    usual ``softmax(...) @ V`` and gates it elementwise by ``caps``.
    """
    caps = as_tensor(caps)
    query, key, value = (as_tensor(m) for m in proj)
    d = caps.shape[-1]
    for m in (query, key, value):
        if m.shape != (d, d):
            raise ConfigurationError(f"attention projections must be ({d}, {d}), got {m.shape}")
    weights = attention_weights(caps, query, key)
    if output == "weights_times_opri":
        out = weights @ caps
    elif output == "qkv_then_opri":
        out = (weights @ (caps @ value)) * caps
    else:
        raise ConfigurationError(f"unknown attention output {output!r}")
    return (out, weights) if return_weights else out


def predict_vectors(in_caps, transforms) -> Tensor:
    """``u_hat[b, i, j] = W[i mod T, j] @ u[b, i]`` -> ``(batch, n_in, n_out, d_out)``."""
    u = as_tensor(in_caps)
    w = as_tensor(transforms)
    n, n_in, d_in = u.shape
    types = w.shape[0]
    if w.shape[-1] != d_in:
        raise ConfigurationError(f"transforms expect dim {w.shape[-1]}, capsules have {d_in}")
    if n_in % types:
        raise ConfigurationError(f"{n_in} input capsules are not a whole number of {types} types")
    grouped = u.reshape(n, n_in // types, types, d_in)
    u_hat = ops.einsum("bptd,tjed->bptje", grouped, w)
    return u_hat.reshape(n, n_in, w.shape[1], w.shape[2])


def dynamic_routing(in_caps, transforms, iters: int = 3, return_couplings: bool = False):
    """Routing-by-agreement from input capsules to ``transforms.shape[1]`` outputs."""
    if iters < 1:
        raise ContractError(f"routing needs at least one iteration, got {iters}")
    u_hat = predict_vectors(in_caps, transforms)
    n, n_in, n_out, _ = u_hat.shape
    logits = Tensor(np.zeros((n, n_in, n_out)))
    couplings = []
    v = None
    for it in range(iters):
        c = ops.softmax(logits, axis=2)
        couplings.append(c.data)
        s = ops.einsum("bij,bije->bje", c, u_hat)
        v = squash(s)
        if it < iters - 1:
            logits = logits + ops.einsum("bije,bje->bij", u_hat, v)
    return (v, couplings) if return_couplings else v


def recurrent_aggregate(in_caps, params: ParamSet, config: CpacConfig) -> Tensor:
    """Elman recurrence over the capsule sequence standing in for the capsule layer."""
    u = as_tensor(in_caps)
    n, steps, _ = u.shape
    hidden = params["recurrent.hidden"]
    proj = u @ params["recurrent.input"] + params["recurrent.bias"]
    h = ops.tanh(proj[:, 0, :])
    for t in range(1, steps):
        h = ops.tanh(proj[:, t, :] + h @ hidden)
    return squash(h.reshape(n, config.num_classes, config.digit_dim))


@dataclass
class CpacOutput:
    probs: Tensor  # (batch, K) softmax over capsule lengths
    lengths: Tensor  # (batch, K)
    digit_caps: Tensor  # (batch, K, digit_dim)
    embedding: Tensor  # (batch, K * digit_dim)
    primary: Tensor = field(repr=False)
    attention: np.ndarray | None = field(default=None, repr=False)
    couplings: list | None = field(default=None, repr=False)


def _as_input_batch(features, config: CpacConfig) -> Tensor:
    if isinstance(features, (list, tuple)):
        shapes = {np.shape(getattr(f, "matrix", f)) for f in features}
        if len(shapes) != 1:
            raise ContractError(f"batch mixes frame counts/shapes: {sorted(shapes)}")
        features = np.stack([np.asarray(getattr(f, "matrix", f), dtype=np.float64) for f in features])
    x = as_tensor(features)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.ndim == 3:
        x = x.reshape(*x.shape, 1)
    if x.shape[1:3] != (config.input_frames, config.num_coeffs):
        raise ContractError(
            f"features must be padded to {config.input_frames}x{config.num_coeffs}, got {x.shape[1:3]}"
        )
    return x


def cpac_features(x, params: ParamSet, config: CpacConfig, mode: str, rng) -> Tensor:
    if config.frontend == "cnn_pool":
        h = x
        for i in range(1, config.num_blocks + 1):
            h = cnn_pool_block(h, params, i, mode, rng, dropout_rate=config.dropout)
        return h
    return single_conv_frontend(x, params, config)


def cpac_forward(
    features,
    params: ParamSet,
    config: CpacConfig | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> CpacOutput:
    """Full CPAC pass on a batch ``(batch, frames, coeffs)`` of padded MFCCs."""
    config = config or params.config
    x = _as_input_batch(features, config)
    h = cpac_features(x, params, config, mode, rng)
    prim = primary_caps(h, params, config)
    weights = None
    if config.attention:
        dig_in, w = capsule_self_attention(
            prim,
            (params["attention.query"], params["attention.key"], params["attention.value"]),
            output=config.attention_output,
            return_weights=True,
        )
        weights = w.data
    else:
        dig_in = prim
    couplings = None
    if config.aggregator == "routing":
        digit, couplings = dynamic_routing(
            dig_in, params["routing.transforms"], config.routing_iters, return_couplings=True
        )
    else:
        digit = recurrent_aggregate(dig_in, params, config)
    lengths = ops.vector_norm(digit, axis=-1)
    probs = ops.softmax(lengths, axis=-1)
    n = digit.shape[0]
    embedding = digit.reshape(n, config.num_classes * config.digit_dim)
    return CpacOutput(probs, lengths, digit, embedding, prim, weights, couplings)


def predict(class_scores) -> np.ndarray | int:
    """Argmax with ties going to the lowest index; 1-D input gives an int."""
    scores = np.asarray(class_scores.data if isinstance(class_scores, Tensor) else class_scores)
    if scores.ndim == 1:
        return int(np.argmax(scores))
    return np.argmax(scores, axis=-1)
