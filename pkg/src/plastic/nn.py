"""Layers, initializers and role-tagged networks.

A :class:`Network` owns its parameters in a flat name -> Tensor map; layers
only hold hyperparameters and look their weights up by name at call time. That
makes it cheap to evaluate a network at substituted parameters (a SAM
perturbation, or a flat vector handed to a Hessian-vector product).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from plastic import tensor as T
from plastic.tensor import ContractError, Tensor

BACKBONE, HEAD = "backbone", "head"
MEAN, NOISE_SCALE, PLAIN = "mean", "noise-scale", "plain"


class SpecError(ValueError):
    """An architecture descriptor is internally inconsistent."""


@dataclass(frozen=True)
class Init:
    """Initializer descriptor, stored so resets can redraw from the same law."""

    kind: str  # "uniform" or "constant"
    bound: float = 0.0
    value: float = 0.0

    def draw(self, rng: np.random.Generator, shape: tuple) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(-self.bound, self.bound, size=shape)
        if self.kind == "constant":
            return np.full(shape, self.value, dtype=np.float64)
        raise SpecError(f"unknown initializer {self.kind!r}")


@dataclass
class ParamInfo:
    shape: tuple
    part: str  # backbone | head
    kind: str  # mean | noise-scale | plain
    init: Init


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    kind = "layer"
    has_params = False

    def __init__(self, name: str = ""):
        self.name = name

    def param_specs(self) -> dict[str, tuple[tuple, str, Init]]:
        return {}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def __call__(self, x: Tensor, p: dict[str, Tensor]) -> Tensor:
        raise NotImplementedError


class Linear(Layer):
    kind = "linear"
    has_params = True

    def __init__(self, in_features: int, out_features: int, name: str = ""):
        super().__init__(name)
        self.in_features, self.out_features = in_features, out_features

    def param_specs(self):
        bound = 1.0 / math.sqrt(self.in_features)
        return {
            "weight": ((self.in_features, self.out_features), PLAIN, Init("uniform", bound)),
            "bias": ((self.out_features,), PLAIN, Init("uniform", bound)),
        }

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise SpecError(f"{self.name}: expects input ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def __call__(self, x, p):
        return T.linear(x, p[self.name + ".weight"], p[self.name + ".bias"])


class NoisyLinear(Layer):
    """Affine layer whose weights are ``mu + sigma * eps`` with elementwise Gaussian ``eps``."""

    kind = "noisy-linear"
    has_params = True

    def __init__(self, in_features: int, out_features: int, sigma0: float = 0.5, name: str = ""):
        super().__init__(name)
        self.in_features, self.out_features, self.sigma0 = in_features, out_features, sigma0
        self.noise: dict[str, np.ndarray] | None = None  # None means the zero draw

    def param_specs(self):
        bound = 1.0 / math.sqrt(self.in_features)
        sigma = Init("constant", value=self.sigma0 / math.sqrt(self.in_features))
        w, b = (self.in_features, self.out_features), (self.out_features,)
        return {
            "mu_weight": (w, MEAN, Init("uniform", bound)),
            "sigma_weight": (w, NOISE_SCALE, sigma),
            "mu_bias": (b, MEAN, Init("uniform", bound)),
            "sigma_bias": (b, NOISE_SCALE, sigma),
        }

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise SpecError(f"{self.name}: expects input ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def sample_noise(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        self.noise = {
            "weight": rng.standard_normal((self.in_features, self.out_features)),
            "bias": rng.standard_normal(self.out_features),
        }
        return self.noise

    def __call__(self, x, p):
        return noisy_forward(self, x, self.noise, p)


def noisy_forward(layer: NoisyLinear, x: Tensor, noise: dict[str, np.ndarray] | None,
                  p: dict[str, Tensor]) -> Tensor:
    """Affine map with effective weight ``mu + sigma * noise``; ``noise=None`` is the zero draw."""
    n = layer.name
    if noise is None:
        return T.linear(x, p[n + ".mu_weight"], p[n + ".mu_bias"])
    w_shape, b_shape = (layer.in_features, layer.out_features), (layer.out_features,)
    if noise["weight"].shape != w_shape or noise["bias"].shape != b_shape:
        raise ContractError(f"{n}: noise shapes {noise['weight'].shape}/{noise['bias'].shape} "
                            f"do not match {w_shape}/{b_shape}")
    w = T.add(p[n + ".mu_weight"], T.mul(p[n + ".sigma_weight"], noise["weight"]))
    b = T.add(p[n + ".mu_bias"], T.mul(p[n + ".sigma_bias"], noise["bias"]))
    return T.linear(x, w, b)


class Conv2d(Layer):
    kind = "conv2d"
    has_params = True

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 pad: int = 0, name: str = ""):
        super().__init__(name)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.pad = kernel, stride, pad

    def param_specs(self):
        fan_in = self.in_channels * self.kernel * self.kernel
        bound = 1.0 / math.sqrt(fan_in)
        k = self.kernel
        return {
            "weight": ((self.out_channels, self.in_channels, k, k), PLAIN, Init("uniform", bound)),
            "bias": ((self.out_channels,), PLAIN, Init("uniform", bound)),
        }

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise SpecError(f"{self.name}: expects ({self.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        oh = (h + 2 * self.pad - self.kernel) // self.stride + 1
        ow = (w + 2 * self.pad - self.kernel) // self.stride + 1
        if oh < 1 or ow < 1:
            raise SpecError(f"{self.name}: kernel {self.kernel} does not fit {h}x{w}")
        return (self.out_channels, oh, ow)

    def __call__(self, x, p):
        return T.conv2d(x, p[self.name + ".weight"], p[self.name + ".bias"], self.stride, self.pad)


class LayerNorm(Layer):
    """Normalizes each sample over all non-batch dimensions, then an elementwise affine map."""

    kind = "layernorm"
    has_params = True
    eps = 1e-5

    def __init__(self, shape: tuple, name: str = ""):
        super().__init__(name)
        self.shape = tuple(shape)

    def param_specs(self):
        return {
            "gain": (self.shape, PLAIN, Init("constant", value=1.0)),
            "shift": (self.shape, PLAIN, Init("constant", value=0.0)),
        }

    def out_shape(self, in_shape):
        if tuple(in_shape) != self.shape:
            raise SpecError(f"{self.name}: normalizes {self.shape}, got {in_shape}")
        return in_shape

    def __call__(self, x, p):
        return T.layer_norm(x, p[self.name + ".gain"], p[self.name + ".shift"], self.eps)


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x, p):
        return T.relu(x)


class CReLU(Layer):
    """Concatenated ReLU along the feature/channel axis; doubles that axis."""

    kind = "crelu"

    def out_shape(self, in_shape):
        return (2 * in_shape[0],) + tuple(in_shape[1:])

    def __call__(self, x, p):
        return crelu(x)


def crelu(x: Tensor, axis: int = 1) -> Tensor:
    return T.crelu(x, axis)


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x, p):
        return T.flatten(x, 1)


_ACTIVATIONS = (ReLU, CReLU)


# ---------------------------------------------------------------------------
# architecture descriptors
# ---------------------------------------------------------------------------

@dataclass
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 0


@dataclass
class ArchSpec:
    """Conv backbone followed by a fully-connected stack.

    ``fc`` lists hidden widths then the output width. The first ``backbone_fc``
    FC layers count as backbone (useful for conv-free networks); the conv stack
    always does.
    """

    input_shape: tuple
    conv: list[ConvSpec] = field(default_factory=list)
    fc: list[int] = field(default_factory=lambda: [64, 10])
    backbone_fc: int = 0
    activation: str = "relu"
    layernorm: bool = False
    noisy: bool = False
    ln_on_noisy: bool = True
    sigma0: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["conv"] = [c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in d.get("conv", [])]
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown architecture fields: {sorted(unknown)}")
        return cls(**d)


def _act(kind: str, name: str) -> Layer:
    if kind == "relu":
        return ReLU(name)
    if kind == "crelu":
        return CReLU(name)
    raise SpecError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    """Ordered layer stack with role-tagged parameters."""

    def __init__(self, layers: list[Layer], input_shape: tuple, parts: dict[str, str] | None = None,
                 seed: int = 0, arch: ArchSpec | None = None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.arch = arch
        self.parts = parts = parts or {}
        self.info: dict[str, ParamInfo] = {}
        shape = self.input_shape
        for i, layer in enumerate(layers):
            if not layer.name:
                layer.name = f"{layer.kind}{i}"
            shape = layer.out_shape(shape)
            for pname, (pshape, kind, init) in layer.param_specs().items():
                self.info[f"{layer.name}.{pname}"] = ParamInfo(
                    tuple(pshape), parts.get(layer.name, HEAD), kind, init)
        self.output_shape = shape
        self.params: dict[str, Tensor] = {}
        self.reinitialize(np.random.default_rng(seed))

    # -- parameters ----------------------------------------------------
    def reinitialize(self, rng: np.random.Generator) -> None:
        for name, info in self.info.items():
            self.params[name] = Tensor(info.init.draw(rng, info.shape), requires_grad=True, name=name)

    def draw_init(self, rng: np.random.Generator, names=None) -> dict[str, np.ndarray]:
        """Fresh initializer draws for ``names`` (all parameters by default), in network order."""
        wanted = set(self.info if names is None else names)
        return {n: info.init.draw(rng, info.shape) for n, info in self.info.items() if n in wanted}

    @property
    def role_map(self) -> dict[str, tuple[str, str]]:
        return {n: (i.part, i.kind) for n, i in self.info.items()}

    @property
    def init_spec(self) -> dict[str, Any]:
        return {"seed": self.seed,
                "params": {n: asdict(i.init) for n, i in self.info.items()}}

    def names(self, part: str | None = None) -> list[str]:
        return [n for n, i in self.info.items() if part in (None, "all") or i.part == part]

    def parameters(self, part: str | None = None) -> list[Tensor]:
        return [self.params[n] for n in self.names(part)]

    def num_params(self) -> int:
        return sum(int(np.prod(i.shape)) for i in self.info.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        off = 0
        for p in self.params.values():
            k = p.data.size
            p.data = np.array(vec[off:off + k], dtype=np.float64).reshape(p.shape)
            off += k

    def unflatten(self, flat: Tensor) -> dict[str, Tensor]:
        """Differentiable views of a flat parameter tensor, keyed like ``params``."""
        out, off = {}, 0
        for n, info in self.info.items():
            k = int(np.prod(info.shape))
            out[n] = T.reshape(T.index(flat, slice(off, off + k)), info.shape)
            off += k
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, a in arrays.items():
            if a.shape != self.params[n].shape:
                raise ContractError(f"{n}: shape {a.shape} != {self.params[n].shape}")
            self.params[n].data = np.array(a, dtype=np.float64)

    def copy(self) -> Network:
        twin = rebuild(self)
        twin.load_arrays(self.state_arrays())
        return twin

    # -- noise ---------------------------------------------------------
    @property
    def noisy_layers(self) -> list[NoisyLinear]:
        return [l for l in self.layers if isinstance(l, NoisyLinear)]

    def sample_noise(self, rng: np.random.Generator) -> None:
        for layer in self.noisy_layers:
            layer.sample_noise(rng)

    def zero_noise(self) -> None:
        for layer in self.noisy_layers:
            layer.noise = None

    def get_noise(self) -> list:
        return [l.noise for l in self.noisy_layers]

    def set_noise(self, draws: list) -> None:
        for layer, d in zip(self.noisy_layers, draws):
            layer.noise = d

    # -- forward -------------------------------------------------------
    def activation_parts(self) -> list[tuple[str, str]]:
        """(layer name, part) of each activation layer, in order."""
        return [(l.name, self.parts.get(l.name, HEAD)) for l in self.layers
                if isinstance(l, _ACTIVATIONS)]

    def forward(self, x, params: dict[str, Tensor] | None = None,
                record: list | None = None) -> Tensor:
        p = self.params if params is None else params
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if h.shape[1:] != self.input_shape:
            raise ContractError(f"network expects inputs of shape (N, {self.input_shape}), got {h.shape}")
        for layer in self.layers:
            h = layer(h, p)
            if record is not None and isinstance(layer, _ACTIVATIONS):
                record.append((layer.name, h.data))
        return h

    __call__ = forward


def build_network(spec: ArchSpec, seed: int) -> Network:
    """Instantiate ``spec``: conv stack (backbone) then FC stack; LN pre-activation."""
    if not spec.fc:
        raise SpecError("an architecture needs at least the output layer in `fc`")
    if not 0 <= spec.backbone_fc < len(spec.fc):
        raise SpecError(f"backbone_fc={spec.backbone_fc} must leave the output layer in the head")
    layers: list[Layer] = []
    parts: dict[str, str] = {}
    shape = tuple(spec.input_shape)

    def push(layer: Layer, part: str):
        nonlocal shape
        layer.name = layer.name or f"{layer.kind.replace('-', '_')}{len(layers)}"
        shape = layer.out_shape(shape)
        layers.append(layer)
        parts[layer.name] = part

    if spec.conv and len(shape) != 3:
        raise SpecError(f"conv layers need (C, H, W) inputs, got {shape}")
    for cs in spec.conv:
        push(Conv2d(shape[0], cs.channels, cs.kernel, cs.stride, cs.pad), BACKBONE)
        if spec.layernorm:
            push(LayerNorm(shape), BACKBONE)
        push(_act(spec.activation, ""), BACKBONE)
    if len(shape) != 1:
        push(Flatten(), BACKBONE)
    for i, width in enumerate(spec.fc):
        part = BACKBONE if i < spec.backbone_fc else HEAD
        is_out = i == len(spec.fc) - 1
        noisy = spec.noisy and part == HEAD
        if noisy:
            push(NoisyLinear(shape[0], width, spec.sigma0), part)
        else:
            push(Linear(shape[0], width), part)
        if is_out:
            break
        if spec.layernorm and (spec.ln_on_noisy or not noisy):
            push(LayerNorm(shape), part)
        push(_act(spec.activation, ""), part)
    return Network(layers, spec.input_shape, parts, seed=seed, arch=spec)


def rebuild(net: Network) -> Network:
    """Fresh network from the same descriptor and seed."""
    if net.arch is None:
        raise SpecError("network was not built from an ArchSpec")
    return build_network(net.arch, net.seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _arrays_to_json(arrays: dict[str, np.ndarray]) -> dict:
    return {n: {"shape": list(a.shape), "data": a.reshape(-1).tolist()} for n, a in arrays.items()}


def _arrays_from_json(d: dict) -> dict[str, np.ndarray]:
    return {n: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for n, v in d.items()}


def checkpoint_dict(net: Network, extra: dict | None = None) -> dict:
    if net.arch is None:
        raise SpecError("only networks built from an ArchSpec can be checkpointed")
    out = {
        "arch": net.arch.to_dict(),
        "init_spec": net.init_spec,
        "role_map": {n: list(r) for n, r in net.role_map.items()},
        "params": _arrays_to_json(net.state_arrays()),
    }
    if extra:
        out.update(extra)
    return out


def network_from_checkpoint(d: dict) -> Network:
    net = build_network(ArchSpec.from_dict(d["arch"]), d["init_spec"]["seed"])
    net.load_arrays(_arrays_from_json(d["params"]))
    return net


def save_checkpoint(path: str | Path, net: Network, extra: dict | None = None) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(checkpoint_dict(net, extra)))


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    d = json.loads(Path(path).read_text())
    return network_from_checkpoint(d), d
