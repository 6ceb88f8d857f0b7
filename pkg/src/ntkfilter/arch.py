"""Architecture descriptions shared by the kernel engine and the finite simulator.

An ArchSpec is a flat layer list (conv / relu / down / up) plus the input
geometry and channel counts. The same object drives both the analytic
covariance recursion and the finite-width network, which keeps the two sides
of every comparison aligned by construction.
"""

from __future__ import annotations

import dataclasses
import json

from .errors import ConfigError

RESAMPLE_KINDS = ("nearest", "bilinear")


@dataclasses.dataclass(frozen=True)
class Conv:
    kernel_size: int

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd and positive, got {self.kernel_size}")


@dataclasses.dataclass(frozen=True)
class Relu:
    pass


@dataclasses.dataclass(frozen=True)
class Down:
    mode: str = "bilinear"

    def __post_init__(self):
        if self.mode not in RESAMPLE_KINDS:
            raise ConfigError(f"down mode must be one of {RESAMPLE_KINDS}, got {self.mode!r}")


@dataclasses.dataclass(frozen=True)
class Up:
    mode: str = "bilinear"

    def __post_init__(self):
        if self.mode not in RESAMPLE_KINDS:
            raise ConfigError(f"up mode must be one of {RESAMPLE_KINDS}, got {self.mode!r}")


Layer = Conv | Relu | Down | Up


@dataclasses.dataclass(frozen=True)
class ArchSpec:
    """Layer stack with geometry and channel bookkeeping.

    Validation enforces: the stack starts and ends with a conv, every
    downsample has a matching upsample (the output geometry equals the input
    geometry), and no downsample is asked to halve an odd side.
    """

    layers: tuple[Layer, ...]
    height: int
    width: int
    input_channels: int = 1
    output_channels: int = 1
    sigma_w_sq: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigError("architecture needs at least one layer")
        if not isinstance(self.layers[0], Conv) or not isinstance(self.layers[-1], Conv):
            raise ConfigError("layer stack must start and end with a conv")
        if self.input_channels not in (1, 3):
            raise ConfigError(f"input channels must be 1 or 3, got {self.input_channels}")
        if self.output_channels < 1:
            raise ConfigError("output channels must be positive")
        if self.sigma_w_sq <= 0:
            raise ConfigError("sigma_w_sq must be positive")
        if self.height < 2 or self.width < 2:
            raise ConfigError(f"geometry too small: {self.height}x{self.width}")
        self.geometry_trace()  # raises on unbalanced or impossible resampling

    @property
    def geometry(self) -> tuple[int, int]:
        return (self.height, self.width)

    def geometry_trace(self) -> list[tuple[int, int]]:
        """Geometry seen by each layer, plus the final output geometry at the end."""
        g = (self.height, self.width)
        trace = []
        depth = 0
        for layer in self.layers:
            trace.append(g)
            if isinstance(layer, Down):
                if g[0] % 2 or g[1] % 2:
                    raise ConfigError(f"cannot downsample odd geometry {g[0]}x{g[1]}")
                g = (g[0] // 2, g[1] // 2)
                depth += 1
            elif isinstance(layer, Up):
                g = (2 * g[0], 2 * g[1])
                depth -= 1
                if depth < 0:
                    raise ConfigError("upsample without a preceding downsample")
        if depth != 0:
            raise ConfigError(f"unbalanced resampling: {depth} more down than up")
        if g != (self.height, self.width):
            raise ConfigError("output geometry does not return to the input geometry")
        trace.append(g)
        return trace

    def conv_layers(self) -> list[Conv]:
        return [l for l in self.layers if isinstance(l, Conv)]

    @property
    def num_convs(self) -> int:
        return len(self.conv_layers())

    def is_single_hidden_conv(self) -> bool:
        """True for the plain conv -> relu -> conv stack the closed-form kernel covers."""
        return (
            len(self.layers) == 3
            and isinstance(self.layers[0], Conv)
            and isinstance(self.layers[1], Relu)
            and isinstance(self.layers[2], Conv)
        )

    def to_json(self) -> str:
        doc = {
            "geometry": {"height": self.height, "width": self.width},
            "input_channels": self.input_channels,
            "output_channels": self.output_channels,
            "sigma_w_sq": self.sigma_w_sq,
            "layers": [_layer_to_doc(l) for l in self.layers],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid architecture JSON: {exc}") from exc
        try:
            geom = doc["geometry"]
            layers = tuple(_layer_from_doc(item) for item in doc["layers"])
            return cls(
                layers=layers,
                height=int(geom["height"]),
                width=int(geom["width"]),
                input_channels=int(doc.get("input_channels", 1)),
                output_channels=int(doc.get("output_channels", 1)),
                sigma_w_sq=float(doc.get("sigma_w_sq", 2.0)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"architecture JSON missing field: {exc}") from exc


def _layer_to_doc(layer: Layer) -> dict:
    if isinstance(layer, Conv):
        return {"kind": "conv", "kernel_size": layer.kernel_size}
    if isinstance(layer, Relu):
        return {"kind": "relu"}
    if isinstance(layer, Down):
        return {"kind": "down", "mode": layer.mode}
    if isinstance(layer, Up):
        return {"kind": "up", "mode": layer.mode}
    raise ConfigError(f"unknown layer {layer!r}")


def _layer_from_doc(doc: dict) -> Layer:
    kind = doc.get("kind")
    if kind == "conv":
        return Conv(kernel_size=int(doc["kernel_size"]))
    if kind == "relu":
        return Relu()
    if kind == "down":
        return Down(mode=doc.get("mode", "bilinear"))
    if kind == "up":
        return Up(mode=doc.get("mode", "bilinear"))
    raise ConfigError(f"unknown layer kind {kind!r}")


def vanilla_arch(
    height: int,
    width: int,
    kernel_size: int = 11,
    input_channels: int = 1,
    output_channels: int = 1,
) -> ArchSpec:
    """Single hidden layer: conv(r) -> relu -> conv(1)."""
    return ArchSpec(
        layers=(Conv(kernel_size), Relu(), Conv(1)),
        height=height,
        width=width,
        input_channels=input_channels,
        output_channels=output_channels,
    )


def deep_vanilla_arch(
    height: int,
    width: int,
    num_convs: int,
    kernel_size: int = 3,
    input_channels: int = 1,
    output_channels: int = 1,
) -> ArchSpec:
    """A stack of num_convs convolutions with relu between them, no resampling."""
    if num_convs < 2:
        raise ConfigError("deep stack needs at least two conv layers")
    layers: list[Layer] = []
    for i in range(num_convs):
        layers.append(Conv(kernel_size))
        if i < num_convs - 1:
            layers.append(Relu())
    return ArchSpec(
        layers=tuple(layers),
        height=height,
        width=width,
        input_channels=input_channels,
        output_channels=output_channels,
    )


def autoencoder_arch(
    height: int,
    width: int,
    kernel_size: int = 3,
    mode: str = "bilinear",
    input_channels: int = 1,
    output_channels: int = 1,
) -> ArchSpec:
    """Three-level hourglass: [conv relu down] x3, conv relu, conv, then [up conv relu] x3
    capped by a 1x1 conv. All resampling is factor 2 with the given mode."""
    k = kernel_size
    layers: tuple[Layer, ...] = (
        Conv(k), Relu(), Down(mode),
        Conv(k), Relu(), Down(mode),
        Conv(k), Relu(), Down(mode),
        Conv(k), Relu(),
        Conv(k),
        Up(mode), Conv(k), Relu(),
        Up(mode), Conv(k), Relu(),
        Up(mode), Conv(k), Relu(),
        Conv(1),
    )
    return ArchSpec(
        layers=layers,
        height=height,
        width=width,
        input_channels=input_channels,
        output_channels=output_channels,
    )
