"""Layer descriptors, architecture specs and the named presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Union

ACTIVATIONS = ("relu", "erf", "exp_normalized", "identity")


def _check_extents(name, values):
    if any(int(v) < 1 for v in values):
        raise ValueError(f"{name} extents must be >= 1, got {values}")


@dataclass(frozen=True)
class DenseAffine:
    w_var: float
    b_var: float = 0.0

    def __post_init__(self):
        if not self.w_var > 0:
            raise ValueError("w_var must be positive")
        if self.b_var < 0:
            raise ValueError("b_var must be nonnegative")


@dataclass(frozen=True)
class ConvAffine:
    w_var: float
    b_var: float
    filter_shape: tuple
    padding: str = "SAME"

    def __post_init__(self):
        object.__setattr__(self, "filter_shape", tuple(int(f) for f in self.filter_shape))
        if not self.w_var > 0:
            raise ValueError("w_var must be positive")
        if self.b_var < 0:
            raise ValueError("b_var must be nonnegative")
        if len(self.filter_shape) not in (1, 2):
            raise ValueError("filter_shape must be 1D or 2D")
        _check_extents("filter", self.filter_shape)
        if self.padding != "SAME":
            raise ValueError("only SAME padding is supported")


@dataclass(frozen=True)
class Activation:
    kind: str

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class AvgPool:
    window: tuple
    strides: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        strides = self.window if self.strides is None else self.strides
        object.__setattr__(self, "strides", tuple(int(s) for s in strides))
        _check_extents("window", self.window)
        _check_extents("strides", self.strides)
        if len(self.window) != len(self.strides):
            raise ValueError("window and strides must have the same rank")


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class LayerNorm:
    include_spatial: bool = False


@dataclass(frozen=True)
class GraphAggregate:
    self_loops: bool = True


LayerDescriptor = Union[
    DenseAffine, ConvAffine, Activation, AvgPool, GlobalAvgPool, Flatten, LayerNorm, GraphAggregate
]

_LAYER_TYPES = {
    "dense": DenseAffine,
    "conv": ConvAffine,
    "activation": Activation,
    "avg_pool": AvgPool,
    "global_avg_pool": GlobalAvgPool,
    "flatten": Flatten,
    "layer_norm": LayerNorm,
    "aggregate": GraphAggregate,
}
_TYPE_NAMES = {cls: name for name, cls in _LAYER_TYPES.items()}

# layers that mix distinct spatial positions and therefore need full P x P covariances
_MIXING = (AvgPool, GlobalAvgPool, GraphAggregate)


def layer_to_dict(layer) -> dict:
    out = {"type": _TYPE_NAMES[type(layer)]}
    for f in dataclasses.fields(layer):
        v = getattr(layer, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def layer_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    try:
        cls = _LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer type {kind!r}") from None
    return cls(**d)


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple
    kernel_kind: str = "nngp"
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.kernel_kind not in ("nngp", "ntk"):
            raise ValueError("kernel_kind must be 'nngp' or 'ntk'")
        if not self.layers or not isinstance(self.layers[-1], DenseAffine):
            raise ValueError("the last layer must be a DenseAffine readout")
        spatial = any(isinstance(l, (ConvAffine, AvgPool, GraphAggregate)) for l in self.layers)
        if spatial and not any(isinstance(l, (Flatten, GlobalAvgPool)) for l in self.layers):
            raise ValueError("spatial architectures need Flatten or GlobalAvgPool before the readout")

    @property
    def needs_full_covariance(self) -> bool:
        """True when some layer mixes positions, so off-diagonal pixel pairs matter."""
        return any(isinstance(l, _MIXING) for l in self.layers)

    @property
    def has_graph(self) -> bool:
        return any(isinstance(l, GraphAggregate) for l in self.layers)

    def with_kind(self, kernel_kind: str) -> "ArchSpec":
        return dataclasses.replace(self, kernel_kind=kernel_kind)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kernel_kind": self.kernel_kind,
            "layers": [layer_to_dict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            layers=tuple(layer_from_dict(l) for l in d["layers"]),
            kernel_kind=d.get("kernel_kind", "nngp"),
            name=d.get("name", "custom"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------- presets


def fc3(kernel_kind="nngp", depth=3):
    w, b = 2.0, 0.1**2
    layers = [Flatten()]
    for _ in range(depth):
        layers += [DenseAffine(w, b), Activation("relu")]
    layers += [DenseAffine(w, b)]
    return ArchSpec(tuple(layers), kernel_kind, "FC3")


def cv8(kernel_kind="nngp", depth=8):
    w, b = 2.0, 0.1**2
    layers = []
    for _ in range(depth):
        layers += [ConvAffine(w, b, (3, 3)), Activation("relu")]
    layers += [Flatten(), DenseAffine(w, b)]
    return ArchSpec(tuple(layers), kernel_kind, "CV8")


def myrtle(kernel_kind="nngp"):
    w, b = 2.0, 0.1**2

    def block(n):
        return [ConvAffine(w, b, (3, 3)), Activation("relu")] * n

    layers = block(1) + block(2) + [AvgPool((2, 2), (2, 2))]
    layers += block(3) + [AvgPool((2, 2), (2, 2))]
    layers += block(3) + [GlobalAvgPool(), Flatten(), DenseAffine(w, b)]
    return ArchSpec(tuple(layers), kernel_kind, "Myrtle")


def tuned_myrtle(kernel_kind="nngp"):
    w, b = 2.0**2, 0.01**2
    norm = LayerNorm(include_spatial=True)
    act = Activation("exp_normalized")

    def block(n, f=(3, 3)):
        return [ConvAffine(w, b, f), norm, act] * n

    layers = block(1, (2, 2)) + block(2) + [AvgPool((2, 2), (2, 2))]
    layers += block(4) + [AvgPool((2, 2), (2, 2))]
    layers += block(2) + [GlobalAvgPool(), Flatten()]
    # head order follows the listing: Dense, LayerNorm, activation
    for _ in range(2):
        layers += [DenseAffine(w, b), LayerNorm(include_spatial=False), act]
    layers += [DenseAffine(w, b)]
    return ArchSpec(tuple(layers), kernel_kind, "TunedMyrtle")


def simple_gnn(kernel_kind="nngp", depth=25, self_loops=True):
    w, b = 0.6**2, 0.1**2
    w_out, b_out = 0.1**2, 0.03**2
    layers = []
    for _ in range(depth):
        layers += [DenseAffine(w, b), Activation("erf"), GraphAggregate(self_loops)]
    layers += [GlobalAvgPool(), DenseAffine(w_out, b_out)]
    return ArchSpec(tuple(layers), kernel_kind, "SimpleGNN")


def one_dim_conv(kernel_kind="nngp", depth=5, filter_size=15):
    w, b = 1.7**2, 0.5**2
    w_out, b_out = 1.0, 0.0
    layers = []
    for _ in range(depth):
        layers += [ConvAffine(w, b, (filter_size,)), Activation("erf")]
    layers += [GlobalAvgPool(), Flatten(), DenseAffine(w_out, b_out)]
    return ArchSpec(tuple(layers), kernel_kind, "OneDimConv")


PRESETS = {
    "FC3": fc3,
    "CV8": cv8,
    "Myrtle": myrtle,
    "TunedMyrtle": tuned_myrtle,
    "SimpleGNN": simple_gnn,
    "OneDimConv": one_dim_conv,
}

# regularized ZCA strength paired with each image preset
ZCA_EPS = {"CV8": 3.0, "Myrtle": 0.1, "TunedMyrtle": 0.1}


def preset_name(name: str) -> str | None:
    """Canonical preset name for a case-insensitive match, else None."""
    for key in PRESETS:
        if key.lower() == str(name).lower():
            return key
    return None


def preset(name: str, kernel_kind: str = "nngp") -> ArchSpec:
    key = preset_name(name)
    if key is None:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[key](kernel_kind)


def load_arch(ref, kernel_kind: str | None = None) -> ArchSpec:
    """Resolve a preset name, a JSON file path, or a dict into an ArchSpec."""
    if isinstance(ref, ArchSpec):
        arch = ref
    elif isinstance(ref, dict):
        arch = ArchSpec.from_dict(ref)
    elif preset_name(ref) is not None:
        arch = preset(ref)
    else:
        with open(ref) as fh:
            arch = ArchSpec.from_dict(json.load(fh))
    if kernel_kind is not None:
        arch = arch.with_kind(kernel_kind)
    return arch
