"""Layer kit, gradient checking, checkpoints and optimizer plumbing.

Autodiff itself is torch's; this module adds the pieces the rest of the
package relies on: a stride-8 conv backbone, an independent central
difference checker and a self-describing checkpoint format.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

TAP_STRIDE = 8
CKPT_MAGIC = b"PBEVCKPT"
CKPT_VERSION = 1
_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8"), 2: (torch.int64, "<i8")}
_DTYPE_CODES = {v[0]: k for k, v in _DTYPES.items()}


class ConfigError(ValueError):
    pass


def set_determinism(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


def he_init_(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Fan-in scaled normal init for conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()


@dataclass(frozen=True)
class BlockConfig:
    kernel: int
    stride: int
    repeats: int
    channels: int


@dataclass(frozen=True)
class BackboneConfig:
    """Conv blocks; each is one strided conv followed by ``repeats`` stride-1 convs.

    The cumulative stride must reach exactly 8 at some block (the tapped
    level); deeper blocks are merged back into it by upsample-add.
    """

    blocks: tuple[BlockConfig, ...]
    in_channels: int = 3
    norm: bool = True

    @classmethod
    def from_lists(cls, kernels, strides, repeats, channels, in_channels=3, norm=True):
        if not (len(kernels) == len(strides) == len(repeats) == len(channels)):
            raise ConfigError("backbone lists must have equal length")
        return cls(tuple(BlockConfig(*b) for b in zip(kernels, strides, repeats, channels)), in_channels, norm)

    def tap_index(self) -> int:
        s = 1
        for i, b in enumerate(self.blocks):
            s *= b.stride
            if s == TAP_STRIDE:
                return i
        raise ConfigError(f"backbone strides never reach a total stride of {TAP_STRIDE}")

    @property
    def out_channels(self) -> int:
        return self.blocks[self.tap_index()].channels


DESK_BACKBONE = BackboneConfig.from_lists((3, 3, 3), (2, 2, 2), (1, 1, 1), (16, 24, 32))


def conv(cin, cout, k, stride=1, padding_mode="zeros", bias=True):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, padding_mode=padding_mode, bias=bias)


class PolarConv2d(nn.Conv2d):
    """Same-size conv on ``(B, C, M, N)`` polar maps: azimuth wraps, radius zero-pads."""

    def __init__(self, cin, cout, k=3):
        super().__init__(cin, cout, k, padding=0)
        self.pad = k // 2

    def forward(self, x):
        p = self.pad
        if p:
            x = torch.cat([x[:, :, -p:], x, x[:, :, :p]], dim=2)
            x = F.pad(x, (p, p, 0, 0))
        return super().forward(x)


class UpsampleAdd(nn.Module):
    """Project a coarse map with a 1x1 conv, upsample (nearest) and add to a finer one."""

    def __init__(self, coarse_channels, fine_channels):
        super().__init__()
        self.proj = nn.Conv2d(coarse_channels, fine_channels, 1)

    def forward(self, fine, coarse):
        return fine + F.interpolate(self.proj(coarse), size=fine.shape[-2:], mode="nearest")


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.tap = cfg.tap_index()
        blocks, cin = [], cfg.in_channels

        def unit(ci, co, k, stride=1):
            # the norm's shift makes a conv bias redundant
            if cfg.norm:
                return [conv(ci, co, k, stride, bias=False), nn.GroupNorm(math.gcd(co, 8), co), nn.ReLU()]
            return [conv(ci, co, k, stride), nn.ReLU()]

        for b in cfg.blocks:
            layers = unit(cin, b.channels, b.kernel, b.stride)
            for _ in range(b.repeats):
                layers += unit(b.channels, b.channels, b.kernel)
            blocks.append(nn.Sequential(*layers))
            cin = b.channels
        self.blocks = nn.ModuleList(blocks)
        self.merges = nn.ModuleList(
            UpsampleAdd(cfg.blocks[i + 1].channels, cfg.blocks[i].channels)
            for i in range(self.tap, len(cfg.blocks) - 1)
        )

    def forward(self, x):
        levels = []
        for blk in self.blocks:
            x = blk(x)
            levels.append(x)
        out = levels[-1]
        for i in range(len(levels) - 2, self.tap - 1, -1):
            out = self.merges[i - self.tap](levels[i], out)
        return out


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    net = Backbone(cfg)
    he_init_(net, torch.Generator().manual_seed(seed))
    return net


def autodiff_eval(output: torch.Tensor, params) -> list[torch.Tensor]:
    """Backpropagate a scalar and return the gradient of each parameter.

    Gradients accumulate across calls; callers zero them once per step.
    """
    if output.numel() != 1:
        raise ValueError("autodiff_eval needs a scalar output")
    params = list(params)
    output.backward()
    return [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: int
    worst_index: int


def grad_check(f, params, eps: float = 1e-6, analytic=None, floor: float = 1e-6,
               max_entries: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``params`` are float64 leaf tensors that ``f`` reads.  ``analytic``
    overrides the autograd gradients (used to test the checker itself).
    The per-entry error is ``|g - n| / max(|g|, |n|, floor)``.  With
    ``max_entries`` only a seeded random subset of each tensor is probed.
    """
    params = list(params)
    if analytic is None:
        for p in params:
            p.grad = None
        out = f()
        grads = torch.autograd.grad(out, params, allow_unused=True)
        analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    rng = np.random.default_rng(seed)
    worst = GradCheckResult(0.0, -1, -1)
    with torch.no_grad():
        for pi, (p, g) in enumerate(zip(params, analytic)):
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), max_entries, replace=False)
            gflat = g.reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(f())
                flat[i] = orig - eps
                fm = float(f())
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = float(gflat[i])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                if err > worst.max_rel_error:
                    worst = GradCheckResult(err, pi, int(i))
    return worst


def make_optimizer(params, lr: float = 1e-3, momentum: float = 0.9, kind: str = "sgd",
                   weight_decay: float = 0.0):
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {kind!r}")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict, seed: int, epoch: int, meta: dict | None = None) -> None:
    """Binary layout (little endian)::

        magic "PBEVCKPT" | u32 version | u64 seed | u32 epoch | u32 meta_len | meta (JSON)
        u32 count, then per tensor: u16 name_len | name | u8 dtype | u8 ndim | u32 dims... | raw
    """
    buf = io.BytesIO()
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQII", CKPT_VERSION, seed, epoch, len(meta_b)))
    buf.write(meta_b)
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        nb = name.encode()
        buf.write(struct.pack("<HBB", len(nb), _DTYPE_CODES[t.dtype], t.dim()))
        buf.write(nb)
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.numpy().astype(_DTYPES[_DTYPE_CODES[t.dtype]][1]).tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(state, seed, epoch, meta)``."""
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint")
    off = len(CKPT_MAGIC)
    version, seed, epoch, meta_len = struct.unpack_from("<IQII", data, off)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off += struct.calcsize("<IQII")
    meta = json.loads(data[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        nlen, code, ndim = struct.unpack_from("<HBB", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        torch_dtype, np_dtype = _DTYPES[code]
        n = int(np.prod(shape)) * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(data[off:off + n], dtype=np_dtype).reshape(shape)
        off += n
        state[name] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return state, seed, epoch, meta
