"""U-Net surrogate mapping a source description to a Green's function field.

The topology is the classic encoder/decoder with skip connections, sized
by two knobs: first_channels (width of the top level) and depth (number
of resolution levels). Every level is two 3x3 same-padded convolutions
with ReLU; widths double per level down and halve per level up; 2x2 max
pooling descends, 2x2 transposed convolutions ascend, and a 1x1 head maps
back to one channel. The output is multiplied by a mask that zeroes the
outermost node ring, so the homogeneous Dirichlet condition holds exactly
rather than being learned.

Everything runs in float64; training speed at these grid sizes is not
worth the precision loss downstream.
"""

from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .grid import Field, Grid, atomic_write_bytes

CHECKPOINT_MAGIC = b"GSUN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    first_channels: int
    depth: int
    n: int
    m: int

    def __post_init__(self):
        if self.in_channels < 1 or self.first_channels < 1 or self.depth < 1:
            raise ValueError("in_channels, first_channels and depth must all be >= 1")
        div = 2 ** (self.depth - 1)
        if self.n % div or self.m % div:
            raise ValueError(
                f"grid {self.n}x{self.m} not divisible by 2^(depth-1)={div}; "
                "pooling would lose nodes"
            )

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "first_channels": self.first_channels,
                "depth": self.depth, "n": self.n, "m": self.m}

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        return UNetConfig(d["in_channels"], d["first_channels"], d["depth"], d["n"], d["m"])


def _double_conv(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class GreenUNet(nn.Module):
    def __init__(self, config: UNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c1, depth = config.first_channels, config.depth

        self.down = nn.ModuleList()
        ch = config.in_channels
        for lvl in range(depth):
            out = c1 * 2**lvl
            self.down.append(_double_conv(ch, out))
            ch = out
        self.pool = nn.MaxPool2d(2)

        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for lvl in range(depth - 2, -1, -1):
            out = c1 * 2**lvl
            self.up.append(nn.ConvTranspose2d(out * 2, out, 2, stride=2))
            self.dec.append(_double_conv(out * 2, out))
        self.head = nn.Conv2d(c1, 1, 1)

        mask = torch.ones(config.n, config.m, dtype=torch.float64)
        mask[0, :] = mask[-1, :] = 0.0
        mask[:, 0] = mask[:, -1] = 0.0
        self.register_buffer("boundary_mask", mask)

        self.double()
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """He-style fan-in-scaled uniform weights, zero biases, from one seed."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
                    fan_in, _ = nn.init._calculate_fan_in_and_fan_out(mod.weight)
                    bound = float(np.sqrt(6.0 / fan_in))
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    mod.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, n, m) -> (B, n, m), zero on the outermost node ring."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.n, cfg.m):
            raise ValueError(
                f"expected input (B, {cfg.in_channels}, {cfg.n}, {cfg.m}), got {tuple(x.shape)}"
            )
        skips = []
        for lvl, block in enumerate(self.down):
            if lvl > 0:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        out = self.head(x)[:, 0]
        return out * self.boundary_mask

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def predict_field(self, grid: Grid, input_nmc: np.ndarray) -> Field:
        """Run one (n, m, C) input through the net and wrap the result."""
        out = self.predict_values(input_nmc[None, ...])[0]
        return Field(grid, out)

    def predict_values(self, inputs_bnmc: np.ndarray) -> np.ndarray:
        """Batched inference: (B, n, m, C) numpy in, (B, n, m) numpy out."""
        x = torch.from_numpy(np.ascontiguousarray(inputs_bnmc.transpose(0, 3, 1, 2)))
        with torch.no_grad():
            out = self.forward(x.to(torch.float64))
        return out.numpy()


def gradient(model: GreenUNet, x: torch.Tensor, upstream: torch.Tensor) -> list[torch.Tensor]:
    """Reverse-mode gradient of <forward(x), upstream> in every parameter.

    Returns tensors in parameter declaration order, matching the layout
    that checkpoints serialize.
    """
    out = model.forward(x)
    loss = (out * upstream).sum()
    return list(torch.autograd.grad(loss, list(model.parameters())))


def set_deterministic(num_threads: int = 1) -> None:
    """Pin torch to a reproducible single-threaded configuration."""
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# layout:  b"GSUN" | u32 version | u32 json_len | json | raw float64 params
#
# The JSON block carries the model config, the parameter names and shapes
# in declaration order, and free-form training metadata. Parameter bytes
# follow in the same order, little-endian float64, so a save/load cycle is
# bitwise exact.

@dataclass
class Checkpoint:
    config: UNetConfig
    state: dict  # name -> float64 ndarray
    metadata: dict


def save_checkpoint(path, model: GreenUNet, metadata: dict | None = None) -> None:
    params = [(name, p.detach().numpy()) for name, p in model.named_parameters()]
    header = {
        "config": model.config.to_dict(),
        "params": [{"name": name, "shape": list(arr.shape)} for name, arr in params],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<II", CHECKPOINT_VERSION, len(blob))
    out += blob
    for _, arr in params:
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(out))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a GSUN checkpoint")
    version, json_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 12 + json_len:
        raise ValueError(f"{path}: truncated checkpoint header")
    header = json.loads(data[12:12 + json_len])
    config = UNetConfig.from_dict(header["config"])
    offset = 12 + json_len
    state = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64)) if shape else 8
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: truncated checkpoint payload at {entry['name']}")
        state[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes after parameters")
    return Checkpoint(config, state, header.get("metadata", {}))


def load_model(path, expect_config: UNetConfig | None = None) -> tuple[GreenUNet, dict]:
    """Rebuild a model from a checkpoint; optionally insist on a config."""
    ckpt = load_checkpoint(path)
    if expect_config is not None and ckpt.config != expect_config:
        raise ValueError(
            f"checkpoint config {ckpt.config.to_dict()} does not match expected "
            f"{expect_config.to_dict()}"
        )
    model = GreenUNet(ckpt.config)
    names = [name for name, _ in model.named_parameters()]
    if names != [e for e in ckpt.state]:
        raise ValueError("checkpoint parameter list does not match the model")
    with torch.no_grad():
        for name, p in model.named_parameters():
            arr = ckpt.state[name]
            if tuple(p.shape) != arr.shape:
                raise ValueError(f"checkpoint parameter {name} has shape {arr.shape}, "
                                 f"model wants {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    return model, ckpt.metadata


def encode_rng_state(gen: torch.Generator) -> str:
    return base64.b64encode(gen.get_state().numpy().tobytes()).decode()


def decode_rng_state(gen: torch.Generator, encoded: str) -> None:
    raw = np.frombuffer(base64.b64decode(encoded), dtype=np.uint8)
    gen.set_state(torch.from_numpy(raw.copy()))
