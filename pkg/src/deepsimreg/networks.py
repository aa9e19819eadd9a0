"""U-Net style encoder-decoder networks for registration, segmentation and autoencoding."""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

ROLES = ("registration", "segmentation", "autoencoder")
FINAL_ACTIVATIONS = ("linear", "softmax_channels", "sigmoid")


@dataclass
class UNetConfig:
    role: str = "registration"
    stages: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    shortcuts: bool = True
    in_channels: int = 2
    out_channels: int = 2
    final_activation: str = "linear"
    dropout_p: float = 0.1
    smoothing_convs: int = 3
    leaky_alpha: float = 0.2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.role not in ROLES:
            raise ValueError(f"unknown network role {self.role!r}")
        if self.stages < 1 or len(self.channels) != self.stages:
            raise ValueError(f"need one channel count per stage: stages={self.stages}, channels={self.channels}")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"invalid channel progression {self.channels}")
        if self.role == "autoencoder" and self.shortcuts:
            raise ValueError("an autoencoder must not have shortcut connections")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(f"unknown final activation {self.final_activation!r}")
        if self.smoothing_convs < 1:
            raise ValueError("need at least one output convolution")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> UNetConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def registration_config(channels=(16, 32, 64), **kw) -> UNetConfig:
    return UNetConfig(role="registration", stages=len(channels), channels=channels, shortcuts=True,
                      in_channels=2, out_channels=2, final_activation="linear", **kw)


def segmentation_config(classes: int, channels=(16, 32, 64), **kw) -> UNetConfig:
    return UNetConfig(role="segmentation", stages=len(channels), channels=channels, shortcuts=True,
                      in_channels=1, out_channels=classes, final_activation="softmax_channels", **kw)


def autoencoder_config(channels=(16, 32, 64), **kw) -> UNetConfig:
    return UNetConfig(role="autoencoder", stages=len(channels), channels=channels, shortcuts=False,
                      in_channels=1, out_channels=1, final_activation="sigmoid", **kw)


class Network:
    """A configured U-Net with named parameters and batch-norm buffers.

    Parameters live in ``params`` (insertion order is the canonical order used
    by the optimizer and checkpoints); running batch-norm statistics live in
    ``buffers``.
    """

    def __init__(self, config: UNetConfig, params: OrderedDict, buffers: OrderedDict, seed: int = 0):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.training = True
        self.seed = seed
        self.rng = np.random.default_rng([seed, 1])

    # -- mode and parameter helpers -------------------------------------------------
    def train(self) -> Network:
        self.training = True
        return self

    def eval(self) -> Network:
        self.training = False
        return self

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self) -> Network:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())

    def state_dict(self) -> OrderedDict:
        state = OrderedDict((k, v.data) for k, v in self.params.items())
        state.update(self.buffers)
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = list(self.params) + list(self.buffers)
        missing = [k for k in expected if k not in state]
        unexpected = [k for k in state if k not in self.params and k not in self.buffers]
        wrong = [k for k in expected if k in state and np.shape(state[k]) != self.state_dict()[k].shape]
        if missing or unexpected or wrong:
            raise ValueError(f"state does not fit network: missing={missing} unexpected={unexpected} wrong_shape={wrong}")
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=p.dtype)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=self.buffers[k].dtype)

    # -- layers ----------------------------------------------------------------------
    def _conv(self, name: str, x: Tensor) -> Tensor:
        return T.conv2d(x, self.params[name + ".weight"], self.params[name + ".bias"], padding=1)

    def _bn(self, name: str, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm2d(
            x, self.params[name + ".gamma"], self.params[name + ".beta"],
            self.buffers[name + ".running_mean"], self.buffers[name + ".running_var"], training,
        )

    def _stage(self, name: str, x: Tensor, training: bool) -> Tensor:
        a = self.config.leaky_alpha
        x = self._bn(name + ".bn", x, training)
        x = T.leaky_relu(self._conv(name + ".conv1", x), a)
        x = T.leaky_relu(self._conv(name + ".conv2", x), a)
        return T.dropout(x, self.config.dropout_p, training, self.rng)

    def _check_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
        h, w = x.shape[2:]
        k = 2 ** cfg.stages
        if h % k or w % k:
            raise ValueError(f"spatial size {h}x{w} must be divisible by {k}")

    def _encode(self, x: Tensor, training: bool) -> tuple[Tensor, list[Tensor]]:
        taps = []
        for level in range(1, self.config.stages + 1):
            x = self._stage(f"enc{level}", x, training)
            taps.append(x)
            x = T.pool_avg2x2(x)
        return x, taps

    def forward(self, x, activate: bool = True) -> Tensor:
        """Run the full network; ``activate=False`` returns pre-activation outputs."""
        x = as_tensor(x)
        self._check_input(x)
        cfg = self.config
        training = self.training
        x, taps = self._encode(x, training)
        for level in range(cfg.stages, 0, -1):
            x = T.upsample_nn2x(x)
            if cfg.shortcuts:
                x = T.concat_channels(x, taps[level - 1])
            x = self._stage(f"dec{level}", x, training)
        for i in range(1, cfg.smoothing_convs + 1):
            x = self._conv(f"out{i}", x)
            if i < cfg.smoothing_convs:
                x = T.leaky_relu(x, cfg.leaky_alpha)
        if not activate:
            return x
        return T.map_activation(x, cfg.final_activation)

    __call__ = forward

    def features(self, image) -> list[Tensor]:
        """Encoder activations at every stage (before pooling), always in eval mode."""
        image = as_tensor(image)
        self._check_input(image)
        _, taps = self._encode(image, training=False)
        return taps


def _he_normal(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_unet(config: UNetConfig, seed: int = 0, dtype=None) -> Network:
    """Create a network with He fan-in initialized convolutions and zero biases.

    The last convolution of a registration network is zero-initialized so an
    untrained model predicts the identity transformation.
    """
    dtype = dtype or T.get_default_dtype()
    rng = np.random.default_rng([seed, 0])
    params: OrderedDict[str, Tensor] = OrderedDict()
    buffers: OrderedDict[str, np.ndarray] = OrderedDict()

    def bn(name: str, c: int):
        params[name + ".gamma"] = Tensor(np.ones(c), requires_grad=True, dtype=dtype)
        params[name + ".beta"] = Tensor(np.zeros(c), requires_grad=True, dtype=dtype)
        buffers[name + ".running_mean"] = np.zeros(c, dtype=dtype)
        buffers[name + ".running_var"] = np.ones(c, dtype=dtype)

    def conv(name: str, cin: int, cout: int, zero: bool = False):
        shape = (cout, cin, 3, 3)
        w = np.zeros(shape, dtype=dtype) if zero else _he_normal(rng, shape, dtype)
        params[name + ".weight"] = Tensor(w, requires_grad=True, dtype=dtype)
        params[name + ".bias"] = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)

    ch = config.channels
    cin = config.in_channels
    for level, c in enumerate(ch, start=1):
        bn(f"enc{level}.bn", cin)
        conv(f"enc{level}.conv1", cin, c)
        conv(f"enc{level}.conv2", c, c)
        cin = c
    for level in range(config.stages, 0, -1):
        c = ch[level - 1]
        stage_in = cin + (c if config.shortcuts else 0)
        bn(f"dec{level}.bn", stage_in)
        conv(f"dec{level}.conv1", stage_in, c)
        conv(f"dec{level}.conv2", c, c)
        cin = c
    for i in range(1, config.smoothing_convs + 1):
        last = i == config.smoothing_convs
        cout = config.out_channels if last else cin
        conv(f"out{i}", cin, cout, zero=last and config.role == "registration")
        cin = cout
    return Network(config, params, buffers, seed=seed)


def forward_registration(net: Network, moving, fixed) -> Tensor:
    """Displacement field ``(N, 2, H, W)`` in pixels mapping ``moving`` onto ``fixed``."""
    moving, fixed = as_tensor(moving), as_tensor(fixed)
    if net.config.out_channels != 2:
        raise ValueError("registration network must have 2 output channels")
    if moving.shape != fixed.shape:
        raise ValueError(f"moving {moving.shape} and fixed {fixed.shape} differ in shape")
    return net(T.concat_channels(moving, fixed))


def forward_segmentation(net: Network, image) -> Tensor:
    if net.config.final_activation != "softmax_channels":
        raise ValueError("segmentation network must end in a channel softmax")
    return net(image)


def forward_autoencoder(net: Network, image) -> Tensor:
    if net.config.shortcuts:
        raise ValueError("autoencoder must be built without shortcuts")
    return net(image)


def forward_features(net: Network, image) -> list[Tensor]:
    """The per-stage feature pyramid used by the DeepSim metric."""
    if net.config.role not in ("autoencoder", "segmentation"):
        raise ValueError("features come from an autoencoder or segmentation network")
    return net.features(image)
