"""U-Fuser and the pseudo-sensing U-Nets.

Tensors are ``(batch, channels, H, W)``. GELU is the only nonlinearity so the
networks are smooth everywhere, which the finite-difference checks rely on.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, FormatError, MissingFileError, ShapeError
from .imaging import load_tensor, save_tensor


@dataclass(frozen=True)
class FuserArch:
    """U-Fuser size. ``branches`` is ``both``, ``global_only`` or ``local_only``."""

    scales: int = 2
    base_channels: int = 8
    branches: str = "both"
    ffn_expansion: int = 2

    def __post_init__(self):
        if self.scales < 1 or self.base_channels < 1:
            raise ConfigError("scales and base_channels must be positive")
        if self.branches not in ("both", "global_only", "local_only"):
            raise ConfigError(f"unknown branches setting {self.branches!r}")


@dataclass(frozen=True)
class SensorArch:
    depth: int = 3
    base_channels: int = 8

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be positive")


FULL_SCALE_FUSER = FuserArch(scales=4, base_channels=32)
FULL_SCALE_SENSOR = SensorArch(depth=5, base_channels=32)


def conv(cin: int, cout: int, k: int = 3, stride: int = 1, groups: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, groups=groups)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over channels at every pixel."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        centred = x - x.mean(1, keepdim=True)
        y = centred / torch.sqrt((centred * centred).mean(1, keepdim=True) + 1e-5)
        return y * self.weight[:, None, None] + self.bias[:, None, None]


def channel_attention(q, k, v, temperature):
    """Transposed (channel-by-channel) attention, one head.

    ``q, k, v`` are ``(B, C, N)``. Queries and keys are L2-normalized along
    the spatial axis, then ``softmax(q k^T / temperature) v``.
    """
    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)
    attn = torch.softmax(q @ k.transpose(-2, -1) / temperature, dim=-1)
    return attn @ v


class ChannelAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.w_q = nn.Conv2d(channels, channels, 1)
        self.w_k = nn.Conv2d(channels, channels, 1)
        self.w_v = nn.Conv2d(channels, channels, 1)
        self.w_o = nn.Conv2d(channels, channels, 1)
        self.temperature = nn.Parameter(torch.ones(1))

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = (proj(x).reshape(b, c, h * w) for proj in (self.w_q, self.w_k, self.w_v))
        out = channel_attention(q, k, v, self.temperature)
        return self.w_o(out.reshape(b, c, h, w))


class GatedFeedForward(nn.Module):
    def __init__(self, channels: int, expansion: int):
        super().__init__()
        hidden = channels * expansion
        self.project_in = nn.Conv2d(channels, 2 * hidden, 1)
        self.dwconv = conv(2 * hidden, 2 * hidden, groups=2 * hidden)
        self.project_out = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        gate, value = self.dwconv(self.project_in(x)).chunk(2, dim=1)
        return self.project_out(F.gelu(gate) * value)


class RestormerBlock(nn.Module):
    """Global branch: pre-norm channel attention and gated feed-forward, both residual."""

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels)
        self.attn = ChannelAttention(channels)
        self.norm2 = ChannelLayerNorm(channels)
        self.ffn = GatedFeedForward(channels, expansion)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class ResBlock(nn.Module):
    """Local branch: two 3x3 convolutions with a skip connection."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = conv(channels, channels)
        self.conv2 = conv(channels, channels)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class RestormerCNNBlock(nn.Module):
    """Parallel global/local branches, concat + 1x1 interaction, then a 3x3 conv.

    ``branches='global_only'`` replaces the local branch with a second
    Restormer block and ``'local_only'`` the global branch with a second
    Res-block, so ablated blocks keep two parallel branches.
    """

    def __init__(self, cin: int, cout: int, branches: str = "both", expansion: int = 2):
        super().__init__()
        self.in_channels = cin
        if branches == "local_only":
            self.global_branch = ResBlock(cin)
        else:
            self.global_branch = RestormerBlock(cin, expansion)
        if branches == "global_only":
            self.local_branch = RestormerBlock(cin, expansion)
        else:
            self.local_branch = ResBlock(cin)
        self.interact = nn.Conv2d(2 * cin, cin, 1)
        self.out = conv(cin, cout)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"block expects {self.in_channels} channels, got {x.shape[1]}")
        mixed = self.interact(torch.cat([self.global_branch(x), self.local_branch(x)], dim=1))
        return self.out(mixed)


def _check_square_pair(i, v, multiple: int):
    if i.shape != v.shape:
        raise ShapeError(f"inputs differ in shape: {tuple(i.shape)} vs {tuple(v.shape)}")
    h, w = i.shape[-2:]
    if h != w:
        raise ShapeError(f"inputs must be square, got {h}x{w}")
    if h % multiple:
        raise ShapeError(f"side {h} is not divisible by {multiple}")


class UFuser(nn.Module):
    """Two extractor stacks, per-scale fusion blocks, coarse-to-fine reconstruction.

    Channel width doubles at each coarser scale; scale changes use a strided
    3x3 conv going down and nearest upsampling + 3x3 conv coming up.
    """

    def __init__(self, arch: FuserArch = FuserArch()):
        super().__init__()
        self.arch = arch
        widths = [arch.base_channels * 2**s for s in range(arch.scales)]
        self.widths = widths

        def block(cin, cout):
            return RestormerCNNBlock(cin, cout, arch.branches, arch.ffn_expansion)

        for name in ("extract_a", "extract_b"):
            stack = nn.ModuleDict({"embed": conv(1, widths[0])})
            for s, c in enumerate(widths):
                stack[f"scale{s}"] = block(c, c)
                if s + 1 < len(widths):
                    stack[f"down{s}"] = conv(c, widths[s + 1], stride=2)
            setattr(self, name, stack)
        self.fuse = nn.ModuleDict({f"scale{s}": block(2 * c, c) for s, c in enumerate(widths)})
        self.reconstruct = nn.ModuleDict()
        for s in range(len(widths) - 1):
            self.reconstruct[f"up{s}"] = conv(widths[s + 1], widths[s])
            self.reconstruct[f"scale{s}"] = block(2 * widths[s], widths[s])
        self.head = conv(widths[0], 1)

    def _extract(self, stack, x):
        feats = []
        x = stack["embed"](x)
        for s in range(len(self.widths)):
            x = stack[f"scale{s}"](x)
            feats.append(x)
            if s + 1 < len(self.widths):
                x = stack[f"down{s}"](x)
        return feats

    def forward(self, i, v):
        _check_square_pair(i, v, 2 ** (self.arch.scales - 1))
        fa = self._extract(self.extract_a, i)
        fb = self._extract(self.extract_b, v)
        fused = [self.fuse[f"scale{s}"](torch.cat([a, b], 1)) for s, (a, b) in enumerate(zip(fa, fb))]
        r = fused[-1]
        for s in reversed(range(len(self.widths) - 1)):
            up = self.reconstruct[f"up{s}"](F.interpolate(r, scale_factor=2, mode="nearest"))
            r = self.reconstruct[f"scale{s}"](torch.cat([up, fused[s]], 1))
        return torch.sigmoid(self.head(r))


class DoubleConv(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = conv(cin, cout)
        self.conv2 = conv(cout, cout)

    def forward(self, x):
        return F.gelu(self.conv2(F.gelu(self.conv1(x))))


class SensorUNet(nn.Module):
    """Plain U-Net with ``depth`` resolution levels and a sigmoid head."""

    def __init__(self, arch: SensorArch = SensorArch()):
        super().__init__()
        self.arch = arch
        widths = [arch.base_channels * 2**d for d in range(arch.depth)]
        self.widths = widths
        self.encoder = nn.ModuleDict({"level0": DoubleConv(1, widths[0])})
        for d in range(1, arch.depth):
            self.encoder[f"down{d}"] = conv(widths[d - 1], widths[d], stride=2)
            self.encoder[f"level{d}"] = DoubleConv(widths[d], widths[d])
        self.decoder = nn.ModuleDict()
        for d in range(arch.depth - 1):
            self.decoder[f"up{d}"] = conv(widths[d + 1], widths[d])
            self.decoder[f"level{d}"] = DoubleConv(2 * widths[d], widths[d])
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, f):
        h, w = f.shape[-2:]
        multiple = 2 ** (self.arch.depth - 1)
        if h != w or h % multiple:
            raise ShapeError(f"sensor input must be square with side divisible by {multiple}, got {h}x{w}")
        skips = []
        x = self.encoder["level0"](f)
        for d in range(1, self.arch.depth):
            skips.append(x)
            x = self.encoder[f"level{d}"](self.encoder[f"down{d}"](x))
        for d in reversed(range(self.arch.depth - 1)):
            up = self.decoder[f"up{d}"](F.interpolate(x, scale_factor=2, mode="nearest"))
            x = self.decoder[f"level{d}"](torch.cat([up, skips[d]], 1))
        return torch.sigmoid(self.head(x))


# below 1 so the sigmoid heads start away from saturation
INIT_GAIN = 0.9


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled uniform init, deterministic in ``seed``.

    Conv weights are drawn from U(-b, b) with b = INIT_GAIN * sqrt(3/fan_in)
    (variance INIT_GAIN**2 per fan-in) and conv biases start at zero, except the output
    head bias, which is set so the head's pre-sigmoid response averages 0
    on a seeded random probe (initial outputs sit near 0.5). Norm
    scales and attention temperatures keep their constructor values.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for _, m in sorted(module.named_modules(), key=lambda kv: kv[0]):
            if isinstance(m, nn.Conv2d):
                fan_in = m.weight[0].numel()
                bound = INIT_GAIN * math.sqrt(3.0 / fan_in)
                w = torch.rand(m.weight.shape, generator=gen, dtype=torch.float64)
                m.weight.copy_((2 * w - 1) * bound)
                m.bias.zero_()
        if isinstance(module, (UFuser, SensorUNet)):
            _centre_head(module, gen)
    return module


def _centre_head(module, gen: torch.Generator, side: int = 32):
    """Set the head bias so the pre-sigmoid output averages 0 on a random probe."""
    n_inputs = 2 if isinstance(module, UFuser) else 1
    dtype = module.head.weight.dtype
    probe = [torch.rand(2, 1, side, side, generator=gen, dtype=torch.float64).to(dtype) for _ in range(n_inputs)]
    captured = {}
    hook = module.head.register_forward_hook(lambda m, args, out: captured.update(z=out))
    try:
        module(*probe)
    finally:
        hook.remove()
    module.head.bias.sub_(captured["z"].mean())


def build_fuser(arch: FuserArch = FuserArch(), seed: int = 0) -> UFuser:
    torch.manual_seed(seed)
    return init_params(UFuser(arch), seed)


def build_sensor(arch: SensorArch = SensorArch(), seed: int = 0) -> SensorUNet:
    torch.manual_seed(seed)
    return init_params(SensorUNet(arch), seed)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# checkpoints


def _tensor_relpath(prefix: str, name: str) -> str:
    return "/".join([prefix, *name.split(".")]) + ".emt"


def save_checkpoint(module: nn.Module, directory, kind: str, seed: int, step: int) -> Path:
    """Write ``manifest.json`` and one EMT1 file per parameter under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, tensor in module.state_dict().items():
        rel = _tensor_relpath(kind, name)
        path = directory / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        save_tensor(tensor.detach().cpu().numpy(), path)
        tensors[name] = rel
    manifest = {
        "schema": 1,
        "kind": kind,
        "architecture_config": asdict(module.arch),
        "seed": int(seed),
        "step": int(step),
        "tensors": tensors,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory, dtype=torch.float32) -> nn.Module:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise MissingFileError(f"no checkpoint manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
        kind = manifest["kind"]
        arch_cfg = manifest["architecture_config"]
        tensors = manifest["tensors"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError("manifest", str(exc)) from exc
    if kind == "fuser":
        module = UFuser(FuserArch(**arch_cfg))
    elif kind == "sensor":
        module = SensorUNet(SensorArch(**arch_cfg))
    else:
        raise FormatError("kind", f"unknown checkpoint kind {kind!r}")
    state = module.state_dict()
    if set(state) != set(tensors):
        raise FormatError("tensors", "checkpoint parameter names do not match the architecture")
    loaded = {}
    for name, rel in tensors.items():
        arr = load_tensor(directory / rel)
        if tuple(arr.shape) != tuple(state[name].shape):
            raise FormatError("dims", f"{name}: expected {tuple(state[name].shape)}, got {arr.shape}")
        loaded[name] = torch.from_numpy(np.ascontiguousarray(arr))
    module.load_state_dict(loaded)
    return module.to(dtype)
