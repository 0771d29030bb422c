"""ResNet-18/20 assembly on top of the kernels in :mod:`rsaforge.nn`.

The network is a stem (7x7/2 conv, BN, ReLU, 3x3/2 max-pool), four stages of
basic residual blocks and a head (global average pool, fully connected,
softmax). ResNet-20 differs from ResNet-18 only in running three blocks in the
first stage instead of two.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensor import read_archive, write_archive

TAP_NAMES = ("stage1", "stage2", "stage3", "stage4", "avgpool", "fc", "softmax")
CHECKPOINT_VERSION = 1


class CheckpointMismatch(ValueError):
    """A checkpoint does not fit the architecture it is being loaded into."""


@dataclass(frozen=True)
class ArchConfig:
    stage_blocks: tuple[int, ...] = (3, 2, 2, 2)
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    input_size: tuple[int, int] = (64, 64)
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.stage_blocks) != 4 or len(self.stage_channels) != 4:
            raise ValueError("stage_blocks and stage_channels need exactly four entries")
        if min(self.stage_blocks) < 1:
            raise ValueError(f"every stage needs at least one block, got {self.stage_blocks}")
        if min(self.stage_channels) < 1:
            raise ValueError(f"channel counts must be positive, got {self.stage_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ValueError(f"input_size must be (H, W) with positive entries, got {self.input_size}")

    @property
    def weighted_layers(self) -> int:
        return 1 + 2 * sum(self.stage_blocks) + 1


def resnet20(num_classes: int = 10, input_size=(64, 64)) -> ArchConfig:
    return ArchConfig((3, 2, 2, 2), (64, 128, 256, 512), tuple(input_size), num_classes)


def resnet18(num_classes: int = 10, input_size=(64, 64)) -> ArchConfig:
    return ArchConfig((2, 2, 2, 2), (64, 128, 256, 512), tuple(input_size), num_classes)


@dataclass
class _Conv:
    name: str
    stride: int
    padding: int
    weighted: bool = True  # projection shortcuts are not counted as network depth


@dataclass
class _Block:
    name: str
    stride: int
    conv1: _Conv
    conv2: _Conv
    proj: _Conv | None = None


@dataclass
class Model:
    """Parameters, batch-norm state and layer layout of one network."""

    config: ArchConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)
    bn: dict[str, nn.BatchNormState] = field(default_factory=dict)
    blocks: list[list[_Block]] = field(default_factory=list)
    _cache: list | None = field(default=None, repr=False)

    # ------------------------------------------------------------------ layout

    @property
    def layer_names(self) -> list[str]:
        names = ["stem.conv", "stem.bn", "stem.pool"]
        for stage in self.blocks:
            names.extend(b.name for b in stage)
        return names + ["avgpool", "fc", "softmax"]

    def weighted_layer_count(self) -> int:
        convs = [b.conv1 for s in self.blocks for b in s] + [b.conv2 for s in self.blocks for b in s]
        return 1 + sum(c.weighted for c in convs) + 1

    def parameters(self) -> dict[str, np.ndarray]:
        """All trainable arrays by name; BN affine arrays are shared with ``self.bn``."""
        out = dict(self.params)
        for name, state in self.bn.items():
            out[f"{name}.gamma"] = state.gamma
            out[f"{name}.beta"] = state.beta
        return out

    # ------------------------------------------------------------------ forward

    def _conv(self, conv: _Conv, x):
        return nn.conv2d_forward(x, self.params[f"{conv.name}.weight"],
                                 self.params[f"{conv.name}.bias"], conv.stride, conv.padding)

    def _block_forward(self, block: _Block, x, training, cache):
        h1 = self._conv(block.conv1, x)
        b1 = nn.batchnorm2d_forward(h1, self.bn[f"{block.name}.bn1"], training)
        r1 = nn.relu_forward(b1)
        h2 = self._conv(block.conv2, r1)
        b2 = nn.batchnorm2d_forward(h2, self.bn[f"{block.name}.bn2"], training)
        hp = None
        if block.proj is None:
            skip = x
        else:
            hp = self._conv(block.proj, x)
            skip = nn.batchnorm2d_forward(hp, self.bn[f"{block.name}.proj.bn"], training)
        s = nn.residual_add_forward(b2, skip)
        if cache is not None:
            cache.append((block, x, h1, b1, r1, h2, hp, s))
        return nn.relu_forward(s)

    def forward(self, x: np.ndarray, training: bool = False, taps: Iterable[str] = (),
                keep_cache: bool = False) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Run the network on ``x [N,3,H,W]``; returns ``(logits, taps)``.

        Tapped activations are flattened to ``[N, D]`` in channel-major,
        row-major order. ``keep_cache`` retains what :meth:`backward` needs.
        A float64 batch is kept in float64 (for gradient checking); anything
        else is cast to float32.
        """
        taps = list(taps)
        unknown = [t for t in taps if t not in TAP_NAMES]
        if unknown:
            raise KeyError(f"unknown tap(s) {unknown}; valid taps are {list(TAP_NAMES)}")
        x = np.asarray(x)
        x = np.ascontiguousarray(x, dtype=np.float64 if x.dtype == np.float64 else np.float32)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected an [N, 3, H, W] batch, got shape {x.shape}")
        out: dict[str, np.ndarray] = {}

        def tap(name, value):
            if name in taps:
                out[name] = value.reshape(value.shape[0], -1).copy()

        cache = [] if keep_cache else None
        stem = self.params["stem.conv.weight"]
        h = nn.conv2d_forward(x, stem, self.params["stem.conv.bias"], 2, 3)
        b = nn.batchnorm2d_forward(h, self.bn["stem.bn"], training)
        r = nn.relu_forward(b)
        p, arg = nn.maxpool2d_forward(r, 3, 2, 1)
        stem_cache = (x, h, b, r.shape, arg)
        for i, stage in enumerate(self.blocks, start=1):
            for block in stage:
                p = self._block_forward(block, p, training, cache)
            tap(f"stage{i}", p)
        feat_shape = p.shape
        pooled = nn.global_avgpool_forward(p)
        tap("avgpool", pooled)
        logits = nn.linear_forward(pooled, self.params["fc.weight"], self.params["fc.bias"])
        tap("fc", logits)
        if "softmax" in taps:
            out["softmax"] = nn.softmax(logits).astype(np.float32)
        self._cache = (stem_cache, cache, feat_shape, pooled) if keep_cache else None
        return logits, out

    # ------------------------------------------------------------------ backward

    def _conv_backward(self, conv: _Conv, x, dout, grads):
        dx, dw, db = nn.conv2d_backward(x, self.params[f"{conv.name}.weight"], dout,
                                        conv.stride, conv.padding)
        grads[f"{conv.name}.weight"] = dw
        grads[f"{conv.name}.bias"] = db
        return dx

    def _bn_backward(self, name, x, dout, grads):
        dx, dgamma, dbeta = nn.batchnorm2d_backward(x, self.bn[name], dout)
        grads[f"{name}.gamma"] = dgamma
        grads[f"{name}.beta"] = dbeta
        return dx

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every parameter given the gradient w.r.t. the logits.

        Requires a preceding ``forward(..., training=True, keep_cache=True)``.
        """
        if self._cache is None:
            raise RuntimeError("backward() needs a forward pass run with keep_cache=True")
        (x, h, b, r_shape, arg), cache, feat_shape, pooled = self._cache
        grads: dict[str, np.ndarray] = {}
        dpooled, dw, db = nn.linear_backward(pooled, self.params["fc.weight"], dlogits)
        grads["fc.weight"], grads["fc.bias"] = dw, db
        d = nn.global_avgpool_backward(feat_shape, dpooled)
        for block, bx, h1, b1, r1, h2, hp, s in reversed(cache):
            ds = nn.relu_backward(s, d)
            dmain, dskip = nn.residual_add_backward(ds)
            dh2 = self._bn_backward(f"{block.name}.bn2", h2, dmain, grads)
            dr1 = self._conv_backward(block.conv2, r1, dh2, grads)
            dh1 = self._bn_backward(f"{block.name}.bn1", h1, nn.relu_backward(b1, dr1), grads)
            d = self._conv_backward(block.conv1, bx, dh1, grads)
            if block.proj is None:
                d = d + dskip
            else:
                dhp = self._bn_backward(f"{block.name}.proj.bn", hp, dskip, grads)
                d = d + self._conv_backward(block.proj, bx, dhp, grads)
        d = nn.maxpool2d_backward(r_shape, arg, d, 3, 2, 1)
        d = nn.relu_backward(b, d)
        d = self._bn_backward("stem.bn", h, d, grads)
        self._conv_backward(_Conv("stem.conv", 2, 3), x, d, grads)
        self._cache = None
        return grads


def build(config: ArchConfig, seed: int = 0, zero_init_residual: bool = True) -> Model:
    """Construct and initialize a network deterministically from ``seed``.

    Conv and FC weights use He-uniform fan-in initialization, biases start at
    zero, batch-norm scale at one and shift at zero. With
    ``zero_init_residual`` the scale of the last batch norm on each residual
    branch starts at zero, so every block begins as the identity; without it
    training at lr 0.1 / momentum 0.9 on small batches diverges intermittently.
    """
    rng = np.random.default_rng(seed)
    model = Model(config)

    def add_conv(name, cin, cout, k, stride, padding, weighted=True):
        model.params[f"{name}.weight"] = nn.he_uniform(rng, (cout, cin, k, k), cin * k * k)
        model.params[f"{name}.bias"] = np.zeros(cout, np.float32)
        return _Conv(name, stride, padding, weighted)

    c0 = config.stage_channels[0]
    add_conv("stem.conv", 3, c0, 7, 2, 3)
    model.bn["stem.bn"] = nn.BatchNormState.fresh(c0)
    cin = c0
    for s, (n_blocks, cout) in enumerate(zip(config.stage_blocks, config.stage_channels), start=1):
        stage = []
        for bi in range(1, n_blocks + 1):
            name = f"stage{s}.block{bi}"
            stride = 2 if (bi == 1 and s > 1) else 1
            conv1 = add_conv(f"{name}.conv1", cin, cout, 3, stride, 1)
            model.bn[f"{name}.bn1"] = nn.BatchNormState.fresh(cout)
            conv2 = add_conv(f"{name}.conv2", cout, cout, 3, 1, 1)
            model.bn[f"{name}.bn2"] = nn.BatchNormState.fresh(cout)
            if zero_init_residual:
                model.bn[f"{name}.bn2"].gamma[...] = 0
            proj = None
            if stride != 1 or cin != cout:
                proj = add_conv(f"{name}.proj.conv", cin, cout, 1, stride, 0, weighted=False)
                model.bn[f"{name}.proj.bn"] = nn.BatchNormState.fresh(cout)
            stage.append(_Block(name, stride, conv1, conv2, proj))
            cin = cout
        model.blocks.append(stage)
    model.params["fc.weight"] = nn.he_uniform(rng, (config.num_classes, cin), cin)
    model.params["fc.bias"] = np.zeros(config.num_classes, np.float32)
    return model


def forward_with_taps(model: Model, batch: np.ndarray, taps: Iterable[str],
                      training: bool = False) -> dict[str, np.ndarray]:
    """Flattened ``[N, D]`` activations at each requested tap."""
    return model.forward(batch, training=training, taps=taps)[1]


def count_params(model) -> int:
    """Total trainable scalars of a :class:`Model` or a name -> array mapping."""
    params = model.parameters() if isinstance(model, Model) else model
    return int(sum(np.asarray(p).size for p in params.values()))


def save_checkpoint(model: Model, epoch: int) -> bytes:
    """Serialize parameters, batch-norm running stats and ``meta = [epoch, version]``."""
    tensors: dict[str, np.ndarray] = dict(model.parameters())
    for name, state in model.bn.items():
        tensors[f"{name}.running_mean"] = state.running_mean
        tensors[f"{name}.running_var"] = state.running_var
    tensors["meta"] = np.array([epoch, CHECKPOINT_VERSION], dtype=np.float32)
    return write_archive(tensors)


def load_checkpoint(model: Model, data: bytes) -> int:
    """Load a checkpoint into ``model`` in place and return its epoch."""
    tensors = read_archive(data)
    meta = tensors.pop("meta", None)
    if meta is None or meta.shape != (2,):
        raise CheckpointMismatch("checkpoint has no [epoch, version] meta tensor")
    if int(meta[1]) != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"unsupported checkpoint version {int(meta[1])}")
    expected = model.parameters()
    for name, state in model.bn.items():
        expected[f"{name}.running_mean"] = state.running_mean
        expected[f"{name}.running_var"] = state.running_var
    missing = [n for n in expected if n not in tensors]
    extra = [n for n in tensors if n not in expected]
    if missing or extra:
        layer = (missing or extra)[0].rsplit(".", 1)[0]
        raise CheckpointMismatch(
            f"checkpoint does not match architecture at layer {layer!r} "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, ref in expected.items():
        if tensors[name].shape != ref.shape:
            layer = name.rsplit(".", 1)[0]
            raise CheckpointMismatch(
                f"shape mismatch at layer {layer!r}: {name} is {tensors[name].shape} "
                f"in the checkpoint but {ref.shape} in the model"
            )
    for name in model.params:
        model.params[name] = tensors[name].copy()
    for name, state in model.bn.items():
        state.gamma[...] = tensors[f"{name}.gamma"]
        state.beta[...] = tensors[f"{name}.beta"]
        state.running_mean = tensors[f"{name}.running_mean"].copy()
        state.running_var = tensors[f"{name}.running_var"].copy()
    return int(meta[0])


def config_from_checkpoint(data: bytes | Mapping[str, np.ndarray],
                           input_size=(64, 64)) -> ArchConfig:
    """Recover the architecture of a checkpoint from its tensor names and shapes."""
    tensors = read_archive(data) if isinstance(data, (bytes, bytearray)) else data
    blocks, channels = [], []
    for s in range(1, 5):
        n = 0
        while f"stage{s}.block{n + 1}.conv1.weight" in tensors:
            n += 1
        if n == 0:
            raise CheckpointMismatch(f"checkpoint has no blocks for stage{s}")
        blocks.append(n)
        channels.append(tensors[f"stage{s}.block1.conv1.weight"].shape[0])
    if "fc.weight" not in tensors:
        raise CheckpointMismatch("checkpoint has no fc layer")
    return ArchConfig(tuple(blocks), tuple(channels), tuple(input_size),
                      tensors["fc.weight"].shape[0])
