"""Dense-Vnet segmentation network at configurable width.

Wiring: a stride-2 input convolution, then three dense feature stacks at
full, half and quarter internal resolution (stride-2 convolutions between
them). Each stack's unit outputs pass through one 3x3x3 skip convolution;
the skip outputs are trilinearly resized to the full internal resolution,
concatenated, mapped to class logits by a 1x1x1 convolution, and resized
back to the input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from brainstrip import autodiff as ad
from brainstrip.autodiff import Tensor
from brainstrip.volume import Volume3D, resample_to_grid, whiten

INPUT_MODES = {"t1gd": ("t1gd",), "flair": ("flair",), "both": ("t1gd", "flair")}
LEAK = 0.01


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DenseVnetConfig:
    in_channels: int = 2
    num_classes: int = 2
    stack_growth: tuple[int, int, int] = (4, 8, 16)
    units_per_stack: tuple[int, int, int] = (4, 4, 4)
    input_window: int = 48
    initial_channels: int = 8
    skip_channels: tuple[int, int, int] = (4, 8, 16)
    input_mode: str = "both"

    def __post_init__(self):
        object.__setattr__(self, "stack_growth", tuple(int(g) for g in self.stack_growth))
        object.__setattr__(self, "units_per_stack", tuple(int(u) for u in self.units_per_stack))
        object.__setattr__(self, "skip_channels", tuple(int(c) for c in self.skip_channels))
        self.validate()

    def validate(self) -> None:
        if self.in_channels not in (1, 2):
            raise ConfigError(f"in_channels must be 1 or 2, got {self.in_channels}")
        if self.num_classes != 2:
            raise ConfigError(f"num_classes must be 2 (background, brain), got {self.num_classes}")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {sorted(INPUT_MODES)}")
        if len(INPUT_MODES[self.input_mode]) != self.in_channels:
            raise ConfigError(f"input_mode {self.input_mode!r} does not supply {self.in_channels} channel(s)")
        for name in ("stack_growth", "units_per_stack", "skip_channels"):
            vals = getattr(self, name)
            if len(vals) != 3:
                raise ConfigError(f"{name} needs exactly three levels, got {vals}")
            if any(v < 1 for v in vals):
                raise ConfigError(f"{name} entries must be positive, got {vals}")
        if self.initial_channels < 1:
            raise ConfigError("initial_channels must be positive")
        check_window(self.input_window)

    @property
    def channels(self) -> tuple[str, ...]:
        return INPUT_MODES[self.input_mode]

    def to_record(self) -> dict[str, str]:
        join = lambda t: ",".join(str(v) for v in t)  # noqa: E731
        return {
            "in_channels": str(self.in_channels),
            "num_classes": str(self.num_classes),
            "stack_growth": join(self.stack_growth),
            "units_per_stack": join(self.units_per_stack),
            "spatial_window_size": str(self.input_window),
            "initial_channels": str(self.initial_channels),
            "skip_channels": join(self.skip_channels),
            "input_mode": self.input_mode,
        }

    @classmethod
    def from_record(cls, rec: dict[str, str]) -> DenseVnetConfig:
        ints = lambda s: tuple(int(v) for v in s.split(","))  # noqa: E731
        return cls(
            in_channels=int(rec["in_channels"]),
            num_classes=int(rec["num_classes"]),
            stack_growth=ints(rec["stack_growth"]),
            units_per_stack=ints(rec["units_per_stack"]),
            input_window=int(rec["spatial_window_size"]),
            initial_channels=int(rec["initial_channels"]),
            skip_channels=ints(rec["skip_channels"]),
            input_mode=rec["input_mode"],
        )


def check_window(size: int) -> None:
    if size < 8 or size % 4:
        raise ConfigError(f"spatial size {size} must be >= 8 and divisible by 4")


def level_input_channels(cfg: DenseVnetConfig, level: int) -> int:
    return cfg.initial_channels * 2**level


def layer_shapes(cfg: DenseVnetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) of every parameter."""
    shapes = [("init.w", (cfg.initial_channels, cfg.in_channels, 3, 3, 3)), ("init.b", (cfg.initial_channels,))]
    prev_out = None
    for lvl in range(3):
        c_in = level_input_channels(cfg, lvl)
        if lvl > 0:
            shapes += [(f"L{lvl}.down.w", (c_in, prev_out, 3, 3, 3)), (f"L{lvl}.down.b", (c_in,))]
        g = cfg.stack_growth[lvl]
        for u in range(cfg.units_per_stack[lvl]):
            shapes += [(f"L{lvl}.unit{u}.w", (g, c_in + u * g, 3, 3, 3)), (f"L{lvl}.unit{u}.b", (g,))]
        prev_out = g * cfg.units_per_stack[lvl]
        skip = cfg.skip_channels[lvl]
        shapes += [(f"L{lvl}.skip.w", (skip, prev_out, 3, 3, 3)), (f"L{lvl}.skip.b", (skip,))]
    total_skip = sum(cfg.skip_channels)
    shapes += [("final.w", (cfg.num_classes, total_skip, 1, 1, 1)), ("final.b", (cfg.num_classes,))]
    return shapes


@dataclass
class Network:
    config: DenseVnetConfig
    params: dict[str, Tensor]

    def parameter_count(self) -> int:
        return sum(p.values.size for p in self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ConfigError(f"parameter {name}: shape {arrays[name].shape} != {p.shape}")
            p.values = np.array(arrays[name], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> Network:
        return Network(self.config, {k: Tensor(v.values.copy(), True, k) for k, v in self.params.items()})

    def frozen(self) -> Network:
        """View sharing parameter values but recording no graph (inference)."""
        return Network(self.config, {k: Tensor(v.values, False, k) for k, v in self.params.items()})


def build_dense_vnet(cfg: DenseVnetConfig, seed: int = 0) -> Network:
    """Fresh network with He-style uniform init (bound sqrt(6 / fan_in)), zero biases."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layer_shapes(cfg):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        else:
            values = np.zeros(shape)
        params[name] = Tensor(values, requires_grad=True, name=name)
    return Network(cfg, params)


def _conv(net: Network, name: str, x: Tensor, stride: int = 1, act: bool = True) -> Tensor:
    w = net.params[name + ".w"]
    pad = w.shape[2] // 2
    y = ad.conv3d(x, w, net.params[name + ".b"], stride=stride, pad=pad)
    return ad.leaky_relu(y, LEAK) if act else y


def forward(net: Network, x) -> Tensor:
    """Logits of shape (batch, num_classes, *spatial) for x (batch, C, *spatial)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    cfg = net.config
    if x.values.ndim != 5:
        raise ConfigError(f"input must be (batch, channels, x, y, z), got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ConfigError(f"network expects {cfg.in_channels} channel(s), got {x.shape[1]}")
    for n in x.shape[2:]:
        check_window(n)

    h = _conv(net, "init", x, stride=2)
    skips = []
    for lvl in range(3):
        if lvl > 0:
            h = _conv(net, f"L{lvl}.down", h, stride=2)
        features = [h]
        outputs = []
        for u in range(cfg.units_per_stack[lvl]):
            inp = features[0] if len(features) == 1 else ad.concat(features)
            out = _conv(net, f"L{lvl}.unit{u}", inp)
            features.append(out)
            outputs.append(out)
        h = outputs[0] if len(outputs) == 1 else ad.concat(outputs)
        skips.append(_conv(net, f"L{lvl}.skip", h, act=False))

    base = skips[0].shape[2:]
    merged = [skips[0]] + [ad.trilinear_resize(s, base) for s in skips[1:]]
    logits = _conv(net, "final", ad.concat(merged), act=False)
    return ad.trilinear_resize(logits, x.shape[2:])


def network_input(cfg: DenseVnetConfig, channels: Sequence[Volume3D]) -> np.ndarray:
    """Whiten each channel, resize to the network window: (C, s, s, s)."""
    if len(channels) != cfg.in_channels:
        raise ConfigError(f"expected {cfg.in_channels} channel volume(s), got {len(channels)}")
    window = (cfg.input_window,) * 3
    return np.stack([resample_to_grid(whiten(v), window, "trilinear").data for v in channels])


def mask_from_logits(logits: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over (2, ...) logits; ties go to background."""
    return (logits[1] > logits[0]).astype(np.uint8)


def predict_mask(net: Network, t1gd: Optional[Volume3D], flair: Optional[Volume3D] = None) -> Volume3D:
    cfg = net.config
    given = {"t1gd": t1gd, "flair": flair}
    missing = [c for c in cfg.channels if given[c] is None]
    if missing:
        raise ConfigError(f"network needs the {', '.join(missing)} channel")
    vols = [given[c] for c in cfg.channels]
    ref = vols[0]
    for v in vols[1:]:
        if v.dims != ref.dims:
            raise ConfigError("input channels are not on one grid")
    x = network_input(cfg, vols)[None]
    logits = forward(net.frozen(), Tensor(x)).values[0]
    window_mask = Volume3D(mask_from_logits(logits))
    back = resample_to_grid(window_mask, ref.dims, "nearest")
    return Volume3D(back.data, ref.spacing, ref.origin)


def save_network(path, net: Network, extra: Optional[dict[str, str]] = None, arrays=None) -> None:
    meta = {"kind": "densevnet", **net.config.to_record(), **(extra or {})}
    ad.save_arrays(path, net.arrays() if arrays is None else arrays, meta)


def load_network(path) -> tuple[Network, dict[str, str], dict[str, np.ndarray]]:
    """Returns the network, its metadata record and any non-parameter arrays."""
    arrays, meta = ad.load_arrays(path)
    if meta.get("kind") != "densevnet":
        raise ConfigError(f"{path}: not a network checkpoint")
    cfg = DenseVnetConfig.from_record(meta)
    net = build_dense_vnet(cfg, 0)
    net.load(arrays)
    extra = {k: v for k, v in arrays.items() if k not in net.params}
    return net, meta, extra
