"""Hybrid CNN + transformer autoencoder with a latent-space discriminator.

Layer sizes for a 256x256 input:

    InitConv      4 x 256 x 256      Feature Mapping 32 x 16 x 16
    EnBlock1      4 x 256 x 256      DeBlock1        32 x 16 x 16
    DownSample1   8 x 128 x 128      UpSample1       16 x 32 x 32
    EnBlock2      8 x 128 x 128      UpSample2       16 x 64 x 64
    DownSample2  16 x  64 x  64      UpSample3        8 x 128 x 128
    EnBlock3     16 x  64 x  64      DeBlock2         8 x 128 x 128
    DownSample3  32 x  32 x  32      UpSample4        4 x 256 x 256
    EnBlock4     32 x  32 x  32      DeBlock2d        4 x 256 x 256
    Projection  128 x 256 (d x N)    EndConv          1 x 256 x 256
    Transformer 128 x 256 (d x N)

Smaller inputs (any multiple of 16) scale every spatial size proportionally.
Tokens are exposed as ``(batch, d, N)``; token ``n`` sits at grid cell
``(n // g, n % g)`` where ``g = input_size // 16``.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 256
    init_channels: int = 4
    encoder_channels: tuple[int, int, int, int] = (4, 8, 16, 32)
    token_dim: int = 128
    transformer_layers: int = 4
    attention_heads: int = 8
    ff_multiplier: int = 4
    discriminator_hidden: tuple[int, ...] = (64,)
    dropout_rate: float = 0.1
    positional_embedding: bool = True

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "discriminator_hidden", tuple(self.discriminator_hidden))
        if self.input_size <= 0 or self.input_size % 16:
            raise ValueError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if len(self.encoder_channels) != 4:
            raise ValueError("encoder_channels needs exactly four entries")
        if self.token_dim % self.attention_heads:
            raise ValueError("token_dim must be divisible by attention_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        bottleneck = self.encoder_channels[-1]
        if (self.token_dim * self.token_count) % bottleneck:
            raise ValueError("token_dim * token_count must be divisible by the bottleneck channel count")

    @property
    def token_grid(self) -> int:
        return self.input_size // 16

    @property
    def token_count(self) -> int:
        return self.token_grid ** 2


class ForwardOutput(NamedTuple):
    reconstruction: torch.Tensor
    ood_probability: torch.Tensor


# ------------------------------------------------------------ gradient reversal


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output * (-ctx.lam), None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity on the forward pass; multiplies the incoming gradient by ``-lam``."""
    if lam < 0:
        raise ValueError(f"reversal scale must be non-negative, got {lam}")
    return _GradReverse.apply(x, float(lam))


class GradientReversal(nn.Module):
    def __init__(self, lam: float = 1.0):
        super().__init__()
        self.lam = lam

    def forward(self, x):
        return grad_reverse(x, self.lam)


# ------------------------------------------------------------------ blocks


class EnBlock(nn.Module):
    """Pre-activation residual block: x + Conv(ReLU(BN(x)))."""

    def __init__(self, channels: int):
        super().__init__()
        self.bn = nn.BatchNorm2d(channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv(F.relu(self.bn(x)))


class ConvBNReLU(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU())


class UpSample(nn.Module):
    """Conv to ``cout`` channels, then a stride-2 transposed conv doubling the grid."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = ConvBNReLU(cin, cout)
        self.deconv = nn.ConvTranspose2d(cout, cout, 2, stride=2)

    def forward(self, x):
        return self.deconv(self.conv(x))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, return_weights: bool = False):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        y = (self.drop(weights) @ v).transpose(1, 2).reshape(b, n, d)
        y = self.out(y)
        return (y, weights) if return_weights else y


class TransformerLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(ff_dim, dim)
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x, return_weights: bool = False):
        a = self.attn(self.norm1(x), return_weights=return_weights)
        if return_weights:
            a, w = a
        x = x + self.drop(a)
        x = x + self.drop(self.ff(self.norm2(x)))
        return (x, w) if return_weights else x


class Discriminator(nn.Module):
    """Mean-pool the tokens, then MLP -> single logit."""

    def __init__(self, dim: int, hidden: tuple[int, ...]):
        super().__init__()
        layers: list[nn.Module] = []
        width = dim
        for h in hidden:
            layers += [nn.Linear(width, h), nn.LeakyReLU(0.2)]
            width = h
        layers.append(nn.Linear(width, 1))
        self.mlp = nn.Sequential(*layers)

    def logit(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: (B, d, N)
        return self.mlp(tokens.mean(dim=2)).squeeze(-1)

    def forward(self, tokens):
        return torch.sigmoid(self.logit(tokens))


# ------------------------------------------------------------------- model


ENCODER_STAGES = ("init_conv", "en_block1", "down1", "en_block2", "down2", "en_block3", "down3", "en_block4")
DECODER_STAGES = ("de_block1", "up1", "up2", "up3", "de_block2", "up4", "de_block2d", "end_conv")


class HAND(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int | None = 0):
        super().__init__()
        self.config = cfg = config
        c0, c1, c2, c3 = cfg.encoder_channels
        d = cfg.token_dim

        self.init_conv = nn.Sequential(nn.Conv2d(1, cfg.init_channels, 3, padding=1), nn.Dropout(cfg.dropout_rate))
        self.en_block1 = EnBlock(c0)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.en_block2 = EnBlock(c1)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.en_block3 = EnBlock(c2)
        self.down3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.en_block4 = EnBlock(c3)
        if cfg.init_channels != c0:
            raise ValueError("init_channels must equal encoder_channels[0]")

        self.projection = nn.Conv2d(c3, d, 3, stride=2, padding=1)
        self.pos_embedding = nn.Parameter(torch.zeros(1, d, cfg.token_count))
        self.layers = nn.ModuleList(
            TransformerLayer(d, cfg.attention_heads, cfg.ff_multiplier * d, cfg.dropout_rate)
            for _ in range(cfg.transformer_layers)
        )
        self.final_norm = nn.LayerNorm(d)

        self.discriminator = Discriminator(d, cfg.discriminator_hidden)

        self.feature_mapping = nn.Conv2d(d, c3, 3, padding=1)
        self.de_block1 = ConvBNReLU(c3, c3)
        self.up1 = UpSample(c3, c2)
        self.up2 = UpSample(c2, c2)
        self.up3 = UpSample(c2, c1)
        self.de_block2 = ConvBNReLU(c1, c1)
        self.up4 = UpSample(c1, c0)
        self.de_block2d = EnBlock(c0)
        self.end_conv = nn.Conv2d(c0, 1, 1)

        self.reset_parameters(seed)

    # parameter groups -------------------------------------------------------

    def discriminator_parameters(self):
        return list(self.discriminator.parameters())

    def autoencoder_parameters(self):
        """Everything except the discriminator head."""
        disc = {id(p) for p in self.discriminator.parameters()}
        return [p for p in self.parameters() if id(p) not in disc]

    def decoder_parameters(self):
        mods = [self.feature_mapping] + [getattr(self, n) for n in DECODER_STAGES]
        return [p for m in mods for p in m.parameters()]

    @torch.no_grad()
    def reset_parameters(self, seed: int | None = 0) -> None:
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                fan_in, _ = nn.init._calculate_fan_in_and_fan_out(m.weight)
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
                m.reset_parameters()
        self.pos_embedding.normal_(0.0, 0.02, generator=gen)

    # stages -----------------------------------------------------------------

    def _check_image(self, x: torch.Tensor) -> None:
        s = self.config.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, s, s):
            raise ShapeError(f"expected input of shape (B, 1, {s}, {s}), got {tuple(x.shape)}")

    def _check_tokens(self, tokens: torch.Tensor) -> None:
        want = (self.config.token_dim, self.config.token_count)
        if tokens.dim() != 3 or tuple(tokens.shape[1:]) != want:
            raise ShapeError(f"expected tokens of shape (B, {want[0]}, {want[1]}), got {tuple(tokens.shape)}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        for name in ENCODER_STAGES:
            x = getattr(self, name)(x)
        return x

    def project_tokens(self, fmap: torch.Tensor) -> torch.Tensor:
        c3, g = self.config.encoder_channels[-1], self.config.token_grid
        if fmap.dim() != 4 or tuple(fmap.shape[1:]) != (c3, 2 * g, 2 * g):
            raise ShapeError(f"expected feature map (B, {c3}, {2 * g}, {2 * g}), got {tuple(fmap.shape)}")
        return self.projection(fmap).flatten(2)

    def transform_tokens(self, tokens: torch.Tensor, return_attention: bool = False):
        """Run the transformer stack; optionally return per-layer attention weights."""
        self._check_tokens(tokens)
        if self.config.positional_embedding:
            tokens = tokens + self.pos_embedding
        x = tokens.transpose(1, 2)
        attention = []
        for layer in self.layers:
            if return_attention:
                x, w = layer(x, return_weights=True)
                attention.append(w)
            else:
                x = layer(x)
        out = self.final_norm(x).transpose(1, 2)
        return (out, attention) if return_attention else out

    def discriminate(self, tokens: torch.Tensor) -> torch.Tensor:
        self._check_tokens(tokens)
        return self.discriminator(tokens)

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        self._check_tokens(tokens)
        g = self.config.token_grid
        x = self.feature_mapping(tokens.reshape(tokens.shape[0], -1, g, g))
        for name in DECODER_STAGES:
            x = getattr(self, name)(x)
        return torch.sigmoid(x)

    def latent(self, x: torch.Tensor) -> torch.Tensor:
        return self.transform_tokens(self.project_tokens(self.encode(x)))

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        tokens = self.latent(x)
        return ForwardOutput(self.decode(tokens), self.discriminate(tokens))

    @torch.no_grad()
    def stage_shapes(self, x: torch.Tensor) -> "OrderedDict[str, tuple[int, ...]]":
        """Per-sample output shape of every named stage for input ``x``."""
        shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
        self._check_image(x)
        h = x
        for name in ENCODER_STAGES:
            h = getattr(self, name)(h)
            shapes[name] = tuple(h.shape[1:])
        tokens = self.project_tokens(h)
        shapes["projection"] = tuple(tokens.shape[1:])
        tokens = self.transform_tokens(tokens)
        shapes["transformer"] = tuple(tokens.shape[1:])
        shapes["discriminator"] = tuple(self.discriminate(tokens).shape[1:])
        g = self.config.token_grid
        h = self.feature_mapping(tokens.reshape(tokens.shape[0], -1, g, g))
        shapes["feature_mapping"] = tuple(h.shape[1:])
        for name in DECODER_STAGES:
            h = getattr(self, name)(h)
            shapes[name] = tuple(h.shape[1:])
        return shapes


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
