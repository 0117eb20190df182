"""Dual-tower dilated residual denoising network.

The graph is an ``nn.Module``; a :data:`WeightStore` is the ordered
name -> float32 array view of its state (trainable parameters plus
batch-norm running statistics) and is what checkpoints persist.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .image_core import BScan

WeightStore = Dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"OCTW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    base_filters: int = 64
    kernel: int = 3
    levels: int = 3
    down_dilations: Sequence[int] = (1, 2, 4)
    up_dilations: Sequence[int] = (4, 4, 1)
    width_scale: float = 1.0
    skip_mode: str = "add"
    input_height: int = 496
    input_width: int = 384
    pad_input: bool = True

    def __post_init__(self):
        object.__setattr__(self, "down_dilations", tuple(int(d) for d in self.down_dilations))
        object.__setattr__(self, "up_dilations", tuple(int(d) for d in self.up_dilations))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.filters < 4:
            raise ValueError("base_filters * width_scale must be >= 4")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd size")
        if self.skip_mode not in ("add", "concat"):
            raise ValueError(f"unknown skip_mode {self.skip_mode!r}")
        if len(self.down_dilations) < self.levels or len(self.up_dilations) < self.levels:
            raise ValueError("need one dilation rate per level in each tower")

    @property
    def filters(self) -> int:
        return int(round(self.base_filters * self.width_scale))

    @property
    def down_rates(self) -> tuple:
        return self.down_dilations[: self.levels]

    @property
    def up_rates(self) -> tuple:
        return self.up_dilations[len(self.up_dilations) - self.levels:]


class ShapeMismatchError(ValueError):
    pass


def _conv(c_in, c_out, kernel, dilation=1, stride=1):
    return nn.Conv2d(c_in, c_out, kernel, stride=stride,
                     padding=dilation * (kernel - 1) // 2, dilation=dilation)


def _upconv(c_in, c_out, kernel, stride):
    # output = stride * input for kernel 3, padding 1
    pad = (kernel - 1) // 2
    return nn.ConvTranspose2d(c_in, c_out, kernel, stride=stride, padding=pad,
                              output_padding=stride - kernel + 2 * pad)


class StandardBlock(nn.Module):
    """Two dilated convolutions, each ELU-activated."""

    def __init__(self, c_in, c_out, kernel, dilation):
        super().__init__()
        self.conv1 = _conv(c_in, c_out, kernel, dilation)
        self.conv2 = _conv(c_out, c_out, kernel, dilation)

    def forward(self, x):
        return F.elu(self.conv2(F.elu(self.conv1(x))))


class ResidualBlock(nn.Module):
    """Two dilated convolutions plus a 3x3 convolutional identity path.

    Both paths are batch normalized and ELU activated, then summed.
    """

    def __init__(self, c_in, c_out, kernel, dilation):
        super().__init__()
        self.conv1 = _conv(c_in, c_out, kernel, dilation)
        self.conv2 = _conv(c_out, c_out, kernel, dilation)
        self.bn_main = nn.BatchNorm2d(c_out)
        self.proj = _conv(c_in, c_out, 3)
        self.bn_proj = nn.BatchNorm2d(c_out)

    def branch(self, x):
        return F.elu(self.bn_main(self.conv2(F.elu(self.conv1(x)))))

    def projection(self, x):
        return F.elu(self.bn_proj(self.proj(x)))

    def forward(self, x):
        return self.branch(x) + self.projection(x)


def _block(residual, c_in, c_out, kernel, dilation):
    cls = ResidualBlock if residual else StandardBlock
    return cls(c_in, c_out, kernel, dilation)


class DenoisingNet(nn.Module):
    """Down tower, latent block, up tower, multi-scale taps, tanh head.

    Down tower: block (standard first, residual after) then a stride-2
    convolution, per level. Up tower: block (residual, standard last)
    then a stride-2 transpose convolution, after which the matching
    down-tower features join via ``skip_mode``. Each down-tower block
    output also passes through a 1x1 conv and a 3x3 transpose conv back to
    full resolution; those maps are concatenated with the up-tower output
    before the 1x1 tanh output layer.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        c, k, n = config.filters, config.kernel, config.levels

        self.down_blocks = nn.ModuleList()
        self.down_strides = nn.ModuleList()
        c_in = 1
        for i, rate in enumerate(config.down_rates):
            self.down_blocks.append(_block(i > 0, c_in, c, k, rate))
            self.down_strides.append(_conv(c, c, k, stride=2))
            c_in = c

        self.latent = StandardBlock(c, c, k, 1)

        self.up_blocks = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        self.skip_merge = nn.ModuleList()
        for i, rate in enumerate(config.up_rates):
            self.up_blocks.append(_block(i < n - 1, c_in, c, k, rate))
            self.up_convs.append(_upconv(c, c, k, 2))
            if config.skip_mode == "concat":
                self.skip_merge.append(nn.Conv2d(2 * c, c, 1))
            c_in = c

        self.scale_reduce = nn.ModuleList()
        self.scale_restore = nn.ModuleList()
        for level in range(n):
            self.scale_reduce.append(nn.Conv2d(c, c, 1))
            self.scale_restore.append(_upconv(c, c, 3, 2 ** level))

        self.head = nn.Conv2d(c * (n + 1), 1, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for name, module in self.named_modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                if module is self.head:
                    nn.init.xavier_uniform_(module.weight)
                else:
                    nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()

    def forward(self, x):
        taps = []
        for block, down in zip(self.down_blocks, self.down_strides):
            x = block(x)
            taps.append(x)
            x = F.elu(down(x))

        x = self.latent(x)

        n = self.config.levels
        for i, (block, up) in enumerate(zip(self.up_blocks, self.up_convs)):
            x = F.elu(up(block(x)))
            skip = taps[n - 1 - i]
            if self.config.skip_mode == "add":
                x = x + skip
            else:
                x = F.elu(self.skip_merge[i](torch.cat([x, skip], dim=1)))

        scales = [F.elu(restore(F.elu(reduce(t))))
                  for t, reduce, restore in zip(taps, self.scale_reduce, self.scale_restore)]
        return torch.tanh(self.head(torch.cat(scales + [x], dim=1)))


def build_network(config: NetworkConfig, seed: int | None = 0) -> DenoisingNet:
    """Construct the graph for ``config``; initialization is seeded."""
    if seed is None:
        return DenoisingNet(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DenoisingNet(config)


def count_parameters(net: nn.Module, include_running_stats: bool = False) -> int:
    n = sum(p.numel() for p in net.parameters() if p.requires_grad)
    if include_running_stats:
        n += sum(b.numel() for name, b in net.named_buffers() if not name.endswith("num_batches_tracked"))
    return n


def count_parameters_analytic(config: NetworkConfig) -> dict:
    """Closed-form layer-by-layer count, independent of the torch graph."""
    c, k, n = config.filters, config.kernel, config.levels

    def conv(ci, co, kk):
        return kk * kk * ci * co + co

    def block(residual, ci):
        total = conv(ci, c, k) + conv(c, c, k)
        if residual:
            total += conv(ci, c, 3) + 2 * (2 * c)
        return total

    total, running = 0, 0
    ci = 1
    for i in range(n):
        total += block(i > 0, ci) + conv(c, c, k)
        running += 4 * c if i > 0 else 0
        ci = c
    total += block(False, c)
    for i in range(n):
        total += block(i < n - 1, c) + conv(c, c, k)
        running += 4 * c if i < n - 1 else 0
        if config.skip_mode == "concat":
            total += conv(2 * c, c, 1)
    total += n * (conv(c, c, 1) + conv(c, c, 3))
    total += conv(c * (n + 1), 1, 1)
    # running mean + var mirror every batch-norm scale/offset pair
    return {"trainable": total, "with_running_stats": total + running}


# -- weight stores ----------------------------------------------------------

def _state_items(net: nn.Module):
    for name, tensor in net.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        yield name, tensor


def get_weights(net: nn.Module) -> WeightStore:
    return OrderedDict((name, t.detach().cpu().numpy().astype(np.float32, copy=True))
                       for name, t in _state_items(net))


def set_weights(net: nn.Module, weights: WeightStore) -> None:
    expected = OrderedDict(_state_items(net))
    missing = set(expected) - set(weights)
    extra = set(weights) - set(expected)
    if missing or extra:
        raise ShapeMismatchError(f"weight names differ: missing={sorted(missing)} extra={sorted(extra)}")
    with torch.no_grad():
        for name, target in expected.items():
            value = np.asarray(weights[name])
            if tuple(value.shape) != tuple(target.shape):
                raise ShapeMismatchError(f"{name}: expected {tuple(target.shape)}, got {value.shape}")
            target.copy_(torch.from_numpy(np.ascontiguousarray(value)).to(target.dtype))


def save_weights(weights: WeightStore, path) -> None:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(weights))
    for name, value in weights.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_weights(path, net: nn.Module | None = None) -> WeightStore:
    """Read a checkpoint; when ``net`` is given, shapes are validated against it."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    weights: WeightStore = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = data[pos]
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        if name in weights:
            raise ValueError(f"{path}: duplicate entry {name}")
        weights[name] = arr.astype(np.float32)
    if net is not None:
        set_weights(net, weights)
    return weights


# -- evaluation -------------------------------------------------------------

def pad_to_multiple(batch: torch.Tensor, multiple: int):
    h, w = batch.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return batch, (h, w)
    if ph >= h or pw >= w:
        raise ValueError("image too small to reflect-pad")
    return F.pad(batch, (0, pw, 0, ph), mode="reflect"), (h, w)


def forward(net: DenoisingNet, batch, weights: WeightStore | None = None,
            mode: str = "eval") -> torch.Tensor:
    """Run ``batch`` (N,1,H,W or N,H,W) through ``net``.

    Inputs whose dims are not multiples of ``2**levels`` are reflect-padded
    and the output cropped back, unless the config disables padding.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if weights is not None:
        set_weights(net, weights)
    x = torch.as_tensor(batch)
    if x.ndim == 3:
        x = x[:, None]
    dtype = next(net.parameters()).dtype
    x = x.to(dtype)
    multiple = 2 ** net.config.levels
    if not net.config.pad_input and (x.shape[-2] % multiple or x.shape[-1] % multiple):
        raise ValueError(f"input dims {tuple(x.shape[-2:])} not divisible by {multiple}")
    x, (h, w) = pad_to_multiple(x, multiple)
    net.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            out = net(x)
    else:
        out = net(x)
    return out[..., :h, :w]


def denoise(net: DenoisingNet, scan: BScan, weights: WeightStore | None = None) -> BScan:
    x = torch.from_numpy(scan.pixels.astype(np.float32) * 2.0 - 1.0)[None, None]
    out = forward(net, x, weights, mode="eval")[0, 0].cpu().numpy().astype(np.float64)
    pixels = np.clip((out + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)
    return scan.derive(pixels, kind="denoised")
