"""Noise predictor, switchable-SPADE generator and patch discriminators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-5


def _groups(channels: int, max_groups: int = 32) -> int:
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape ``(B, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


# --------------------------------------------------------------------------
# noise predictor (U-Net)
# --------------------------------------------------------------------------


@dataclass
class DenoiserConfig:
    in_channels: int = 1
    base: int = 64
    # width per resolution level; level 0 is full resolution
    widths: tuple = (64, 64, 128, 128, 256, 256)
    num_res_blocks: int = 2
    attn_levels: tuple = (4,)
    mid_attention: bool = True
    time_embedding: bool = True
    dropout: float = 0.0

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.widths) - 1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin, eps=NORM_EPS)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout) if temb_dim else None
        self.norm2 = nn.GroupNorm(_groups(cout), cout, eps=NORM_EPS)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels, eps=NORM_EPS)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Denoiser(nn.Module):
    """U-Net noise predictor with residual blocks and step conditioning.

    With ``time_embedding=False`` the same topology runs as a plain
    autoencoder (the step argument is ignored).
    """

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.cfg = cfg
        temb_dim = 4 * cfg.base if cfg.time_embedding else 0
        if cfg.time_embedding:
            self.temb = nn.Sequential(nn.Linear(cfg.base, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.widths[0], 3, padding=1)

        skips = [cfg.widths[0]]
        ch = cfg.widths[0]
        self.down = nn.ModuleList()
        for level, width in enumerate(cfg.widths):
            stage = nn.Module()
            stage.downsample = nn.Conv2d(ch, ch, 3, stride=2, padding=1) if level > 0 else None
            if level > 0:
                skips.append(ch)
            stage.blocks = nn.ModuleList()
            stage.attn = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                stage.blocks.append(ResBlock(ch, width, temb_dim))
                ch = width
                stage.attn.append(SelfAttention(ch) if level in cfg.attn_levels else nn.Identity())
                skips.append(ch)
            self.down.append(stage)

        self.mid1 = ResBlock(ch, ch, temb_dim)
        self.mid_attn = SelfAttention(ch) if cfg.mid_attention else nn.Identity()
        self.mid2 = ResBlock(ch, ch, temb_dim)

        self.up = nn.ModuleList()
        for level in reversed(range(len(cfg.widths))):
            width = cfg.widths[level]
            stage = nn.Module()
            stage.blocks = nn.ModuleList()
            stage.attn = nn.ModuleList()
            for _ in range(cfg.num_res_blocks + 1):
                stage.blocks.append(ResBlock(ch + skips.pop(), width, temb_dim))
                ch = width
                stage.attn.append(SelfAttention(ch) if level in cfg.attn_levels else nn.Identity())
            stage.upsample = nn.Conv2d(ch, ch, 3, padding=1) if level > 0 else None
            self.up.append(stage)
        assert not skips

        self.norm_out = nn.GroupNorm(_groups(ch), ch, eps=NORM_EPS)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def forward(self, x, t):
        if x.shape[-1] % self.cfg.divisor or x.shape[-2] % self.cfg.divisor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {self.cfg.divisor}")
        temb = None
        if self.cfg.time_embedding:
            t = torch.as_tensor(t, device=x.device)
            if t.ndim == 0:
                t = t.expand(x.shape[0])
            temb = self.temb(timestep_embedding(t, self.cfg.base).to(x.dtype))

        h = self.conv_in(x)
        hs = [h]
        for stage in self.down:
            if stage.downsample is not None:
                h = stage.downsample(h)
                hs.append(h)
            for block, attn in zip(stage.blocks, stage.attn):
                h = attn(block(h, temb))
                hs.append(h)

        h = self.mid2(self.mid_attn(self.mid1(h, temb)), temb)

        for stage in self.up:
            for block, attn in zip(stage.blocks, stage.attn):
                h = attn(block(torch.cat([h, hs.pop()], dim=1), temb))
            if stage.upsample is not None:
                h = stage.upsample(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


# --------------------------------------------------------------------------
# switchable SPADE and generator
# --------------------------------------------------------------------------


def instance_standardize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class SwitchableSPADE(nn.Module):
    """Instance norm without a mask, SPADE modulation with one.

    ``mode`` pins the branch for the ablation that splits the generator in
    two: ``"switch"`` (default), ``"instance"`` or ``"spade"``.
    """

    def __init__(self, channels: int, hidden: int = 128, mask_channels: int = 1, mode: str = "switch"):
        super().__init__()
        if mode not in ("switch", "instance", "spade"):
            raise ValueError(f"unknown normalization mode {mode!r}")
        self.mode = mode
        self.eps = NORM_EPS
        if mode != "spade":
            self.in_weight = nn.Parameter(torch.ones(channels))
            self.in_bias = nn.Parameter(torch.zeros(channels))
        if mode != "instance":
            self.shared = nn.Sequential(nn.Conv2d(mask_channels, hidden, 3, padding=1), nn.ReLU())
            self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
            self.beta = nn.Conv2d(hidden, channels, 3, padding=1)
            # unit scale on average at init; the weights stay random so the
            # two branches differ from the first step
            nn.init.ones_(self.gamma.bias)
            nn.init.zeros_(self.beta.bias)
        self.last_branch: str | None = None

    def modulation(self, mask: torch.Tensor, size) -> tuple[torch.Tensor, torch.Tensor]:
        mask = F.interpolate(mask, size=size, mode="nearest")
        actv = self.shared(mask)
        return self.gamma(actv), self.beta(actv)

    def forward(self, x, mask=None):
        normalized = instance_standardize(x, self.eps)
        use_spade = self.mode == "spade" or (self.mode == "switch" and mask is not None)
        if use_spade:
            if mask is None:
                raise ValueError("SPADE-only normalization needs a mask")
            gamma, beta = self.modulation(mask.to(x.dtype), x.shape[-2:])
            self.last_branch = "spade"
            return gamma * normalized + beta
        self.last_branch = "instance"
        return normalized * self.in_weight[None, :, None, None] + self.in_bias[None, :, None, None]


def s_spade_forward(layer: SwitchableSPADE, features: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    return layer(features, mask)


@dataclass
class GeneratorConfig:
    in_channels: int = 2
    out_channels: int = 1
    widths: tuple = (64, 128, 256)
    spade_hidden: int = 128
    norm_mode: str = "switch"


class SpadeResBlock(nn.Module):
    """conv - ReLU - S-SPADE - conv - ReLU - S-SPADE, with a residual shortcut."""

    def __init__(self, cin, cout, hidden, mode, upsample=False):
        super().__init__()
        self.upsample = upsample
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = SwitchableSPADE(cout, hidden, mode=mode)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = SwitchableSPADE(cout, hidden, mode=mode)
        self.skip = nn.Conv2d(cin, cout, 1, bias=False) if cin != cout else nn.Identity()

    def forward(self, x, mask=None):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2.0, mode="nearest")
        h = self.norm1(F.relu(self.conv1(x)), mask)
        h = self.norm2(F.relu(self.conv2(h)), mask)
        return self.skip(x) + h


class Generator(nn.Module):
    """Shared-weight generator: mask absent -> segmentation, mask present -> synthesis."""

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        cfg = cfg or GeneratorConfig()
        self.cfg = cfg
        w0, w1, w2 = cfg.widths
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, w0, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(w0, affine=True, eps=NORM_EPS),
            nn.ReLU(),
            nn.Conv2d(w0, w1, 3, stride=2, padding=1),
            nn.InstanceNorm2d(w1, affine=True, eps=NORM_EPS),
            nn.ReLU(),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1),
            nn.InstanceNorm2d(w2, affine=True, eps=NORM_EPS),
            nn.ReLU(),
        )
        mode, hid = cfg.norm_mode, cfg.spade_hidden
        self.blocks = nn.ModuleList([
            SpadeResBlock(w2, w2, hid, mode),
            SpadeResBlock(w2, w2, hid, mode),
            SpadeResBlock(w2, w1, hid, mode, upsample=True),
            SpadeResBlock(w1, w0, hid, mode, upsample=True),
        ])
        self.head = nn.Conv2d(w0, cfg.out_channels, 7, padding=3, padding_mode="reflect")

    def spade_layers(self) -> list[SwitchableSPADE]:
        return [m for m in self.modules() if isinstance(m, SwitchableSPADE)]

    def forward(self, x, mask=None):
        if mask is not None and mask.shape[-2:] != x.shape[-2:]:
            raise ValueError(f"mask size {tuple(mask.shape[-2:])} != input size {tuple(x.shape[-2:])}")
        h = self.stem(x)
        for block in self.blocks:
            h = block(h, mask)
        return torch.tanh(self.head(h))


# --------------------------------------------------------------------------
# patch discriminator
# --------------------------------------------------------------------------


@dataclass
class DiscriminatorConfig:
    in_channels: int = 1
    widths: tuple = (64, 128, 256, 512)


class PatchDiscriminator(nn.Module):
    """Least-squares patch classifier; the default widths give 70x70 receptive fields."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        cfg = cfg or DiscriminatorConfig()
        self.cfg = cfg
        layers = []
        cin = cfg.in_channels
        n = len(cfg.widths)
        for i, width in enumerate(cfg.widths):
            stride = 2 if i < n - 1 else 1
            layers.append(nn.Conv2d(cin, width, 4, stride=stride, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(width, affine=True, eps=NORM_EPS))
            layers.append(nn.LeakyReLU(0.2))
            cin = width
        layers.append(nn.Conv2d(cin, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)

    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for m in self.model:
            if isinstance(m, nn.Conv2d):
                rf += (m.kernel_size[0] - 1) * jump
                jump *= m.stride[0]
        return rf

    def forward(self, x):
        return self.model(x)


# --------------------------------------------------------------------------
# factories and functional entry points
# --------------------------------------------------------------------------


@dataclass
class NetworkSizes:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)


def full_sizes() -> NetworkSizes:
    return NetworkSizes()


def tiny_sizes(width: int = 16, levels: int = 3, spade_hidden: int = 16, disc_widths=(16, 32, 32)) -> NetworkSizes:
    """Desk-scale networks with the same topology as the full-size ones."""
    widths = tuple(width * (1 if i < 2 else 2) for i in range(levels))
    return NetworkSizes(
        denoiser=DenoiserConfig(base=width, widths=widths, num_res_blocks=1,
                                attn_levels=(levels - 1,), mid_attention=True),
        generator=GeneratorConfig(widths=(width, 2 * width, 2 * width), spade_hidden=spade_hidden),
        discriminator=DiscriminatorConfig(widths=tuple(disc_widths)),
    )


def micro_sizes() -> NetworkSizes:
    """Smallest useful instantiation, for finite-difference gradient checks."""
    return NetworkSizes(
        denoiser=DenoiserConfig(base=4, widths=(4, 4), num_res_blocks=1, attn_levels=(1,), mid_attention=True),
        generator=GeneratorConfig(widths=(4, 4, 4), spade_hidden=4),
        discriminator=DiscriminatorConfig(widths=(4, 4)),
    )


def sizes_for(preset: str) -> NetworkSizes:
    presets = {"full": full_sizes, "tiny": tiny_sizes, "micro": micro_sizes}
    if preset not in presets:
        raise ValueError(f"unknown network preset {preset!r}; choose from {sorted(presets)}")
    return presets[preset]()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def denoise_predict(net: Denoiser, x_t: torch.Tensor, t) -> torch.Tensor:
    for p in net.parameters():
        if not torch.isfinite(p).all():
            raise ValueError("denoiser has non-finite parameters")
    return net(x_t, t)


def generate(net: Generator, latent_input: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    return net(latent_input, mask)


def discriminate(net: PatchDiscriminator, image: torch.Tensor) -> torch.Tensor:
    if image.shape[1] != net.cfg.in_channels:
        raise ValueError(f"expected {net.cfg.in_channels} channel(s), got {image.shape[1]}")
    return net(image)
