"""Conditional denoiser: depth-image encoder with adaptive zero-init norms.

The network maps (noised parameter vector x_t, timestep t, depth image c)
to a denoised 88-vector. The image passes through an initial convolution,
a stack of downsampling residual blocks and two further residual blocks,
with single-head spatial self-attention inserted before the last few
blocks. Conditioning (time embedding + encoded x_t, summed) enters every
block through adaptive normalization layers whose scale/shift projections
are zero-initialized, so at initialization each block reduces to its
unmodulated form and the output depends on the depth image alone. The
final block drops the conditioning entirely; a regressor maps the pooled
outputs of all blocks to the 88 target values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .body_model import PARAM_DIM

NORM_EPS = 1e-5
_MAX_CHANNEL_MULT = 8


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: tuple[int, int] = (128, 64)
    n_down_blocks: int = 6
    n_attention_blocks: int = 3
    base_channels: int = 32
    latent_dim: int = 128
    include_gender_in_condition: bool = False

    def __post_init__(self):
        h, w = self.image_size
        stride = 2 ** self.n_down_blocks
        if h % stride or w % stride:
            raise ValueError(
                f"image size {self.image_size} must be divisible by 2^{self.n_down_blocks}"
            )
        if self.n_attention_blocks > self.n_down_blocks:
            raise ValueError("n_attention_blocks must be <= n_down_blocks")
        if self.latent_dim % 2:
            raise ValueError("latent_dim must be even")

    @property
    def n_blocks(self) -> int:
        # downsampling blocks plus the two trailing residual blocks
        return self.n_down_blocks + 2

    def channels(self) -> list[int]:
        """Channel width after the stem and after each residual block."""
        widths = [self.base_channels]
        for i in range(self.n_down_blocks):
            widths.append(self.base_channels * min(2 ** (i + 1), _MAX_CHANNEL_MULT))
        widths += [widths[-1], widths[-1]]
        return widths


def embed_time(t: Tensor, latent_dim: int) -> Tensor:
    """Sinusoidal timestep embedding: [sin(t * w_k) | cos(t * w_k)]."""
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t[None]
    half = latent_dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    angles = t[:, None].to(torch.float64) * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def spatial_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalization over the spatial extent."""
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class AdaptiveNorm2d(nn.Module):
    """Spatial normalization modulated by a conditioning vector.

    ``out = normalized * (1 + gamma(cond)) + beta(cond)`` with the linear
    gamma/beta projection zero-initialized, so the module starts out as the
    plain normalization.
    """

    def __init__(self, channels: int, latent_dim: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(latent_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        gamma, beta = self.proj(cond).chunk(2, dim=1)
        h = spatial_norm(x)
        return h * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]


class ResBlock(nn.Module):
    """Pre-norm residual block: two 3x3 convolutions, each preceded by
    (adaptive) normalization and SiLU; 1x1 skip projection on shape change."""

    def __init__(self, c_in: int, c_out: int, latent_dim: int,
                 downsample: bool = False, adaptive: bool = True):
        super().__init__()
        self.adaptive = adaptive
        stride = 2 if downsample else 1
        if adaptive:
            self.norm1 = AdaptiveNorm2d(c_in, latent_dim)
            self.norm2 = AdaptiveNorm2d(c_out, latent_dim)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        if downsample or c_in != c_out:
            self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride)
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor, cond: Tensor | None) -> Tensor:
        if self.adaptive:
            h = self.conv1(F.silu(self.norm1(x, cond)))
            h = self.conv2(F.silu(self.norm2(h, cond)))
        else:
            h = self.conv1(F.silu(spatial_norm(x)))
            h = self.conv2(F.silu(spatial_norm(h)))
        return self.skip(x) + h


class SelfAttention2d(nn.Module):
    """Single-head spatial self-attention with a zero-init output projection."""

    def __init__(self, channels: int):
        super().__init__()
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(spatial_norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        y = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.out(y)


class DepthDenoiser(nn.Module):
    """The conditional denoiser D(x_t, t, c) over 88-dim parameter vectors."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.latent_dim

        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        enc_in = PARAM_DIM + (2 if config.include_gender_in_condition else 0)
        self.latent_encoder = nn.Sequential(
            nn.Linear(enc_in, d), nn.SiLU(), nn.Linear(d, d)
        )

        widths = config.channels()
        # depth plus two fixed coordinate maps: pooled conv features are
        # translation-invariant, so position must enter at the input for the
        # regressor to recover the global translation
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        h, w = config.image_size
        ii = torch.linspace(-1.0, 1.0, h)[:, None].expand(h, w)
        jj = torch.linspace(-1.0, 1.0, w)[None, :].expand(h, w)
        self.register_buffer("coord_maps", torch.stack([ii, jj])[None])
        blocks = []
        for i in range(config.n_down_blocks):
            blocks.append(ResBlock(widths[i], widths[i + 1], d, downsample=True))
        blocks.append(ResBlock(widths[-2], widths[-1], d))
        # the final block omits the conditioning entirely
        blocks.append(ResBlock(widths[-1], widths[-1], d, adaptive=False))
        self.blocks = nn.ModuleList(blocks)

        first_attn = config.n_blocks - config.n_attention_blocks
        self.attns = nn.ModuleDict({
            str(i): SelfAttention2d(widths[i]) for i in range(first_attn, config.n_blocks)
        })

        pooled_dim = sum(widths[1:])
        self.regressor = nn.Sequential(
            nn.Linear(pooled_dim, d), nn.SiLU(), nn.Linear(d, PARAM_DIM)
        )

    def forward(self, x_t: Tensor, t: Tensor, image: Tensor,
                gender: Tensor | None = None) -> Tensor:
        cfg = self.config
        if image.ndim == 3:
            image = image[:, None]
        if tuple(image.shape[-2:]) != tuple(cfg.image_size):
            raise ValueError(
                f"image spatial size {tuple(image.shape[-2:])} does not match "
                f"config {tuple(cfg.image_size)}"
            )
        emb = embed_time(t, cfg.latent_dim).to(image.dtype)
        enc_in = x_t
        if cfg.include_gender_in_condition:
            if gender is None:
                raise ValueError("config includes gender in condition; gender is required")
            enc_in = torch.cat([x_t, gender.to(x_t.dtype)], dim=1)
        cond = self.time_mlp(emb) + self.latent_encoder(enc_in)

        coords = self.coord_maps.to(image.dtype).expand(image.shape[0], -1, -1, -1)
        h = self.stem(torch.cat([image, coords], dim=1))
        pooled = []
        for i, block in enumerate(self.blocks):
            if str(i) in self.attns:
                h = self.attns[str(i)](h)
            h = block(h, None if not block.adaptive else cond)
            pooled.append(h.mean(dim=(2, 3)))
        return self.regressor(torch.cat(pooled, dim=1))


def parameter_count(config: DenoiserConfig) -> int:
    """Total trainable parameter count; a pure function of the config."""
    model = DepthDenoiser(config)
    return sum(p.numel() for p in model.parameters())
