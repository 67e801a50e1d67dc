"""Hybrid segmentation backbone.

Layout: two parallel convolutional encoders (one feeding skip connections,
one feeding the token bottleneck), a linear token embedding, a stack of
non-shifted windowed self-attention blocks on the stride-8 grid, and a
deconvolution decoder ending in a full-resolution feature map from which the
intermediate probability and the per-voxel normalized embedding are derived.

Tensors are channel-first: inputs (B, 2, H, W, Z), features (B, C, h, w, z).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn

from .config import NetworkConfig, patch_dim_violations, require_valid
from .errors import ConfigError, InvalidInputError

FEATURE_NORM_EPS = 1e-12


class ConvBlock(nn.Module):
    """Pre-activation conv unit: batch norm -> leaky ReLU -> 3x3x3 conv."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.norm = nn.BatchNorm3d(in_ch)
        self.act = nn.LeakyReLU(inplace=True)
        self.conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)

    def forward(self, x):
        return self.conv(self.act(self.norm(x)))


class DeconvBlock(nn.Module):
    """Upsampling unit: stride-2 3x3x3 transpose conv -> batch norm -> leaky ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.deconv = nn.ConvTranspose3d(in_ch, out_ch, kernel_size=3, stride=2,
                                         padding=1, output_padding=1)
        self.norm = nn.BatchNorm3d(out_ch)
        self.act = nn.LeakyReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.deconv(x)))


class SkipEncoder(nn.Module):
    """Encoder feeding the decoder skips: three stages at strides 2/4/8.

    Each stage is a downsampling conv block followed by a refining one; stage
    widths are (base, 2*base, hidden).
    """

    def __init__(self, in_ch: int, channel_base: int, hidden_size: int):
        super().__init__()
        widths = (channel_base, 2 * channel_base, hidden_size)
        stages = []
        prev = in_ch
        for width in widths:
            stages.append(nn.Sequential(ConvBlock(prev, width, stride=2),
                                        ConvBlock(width, width)))
            prev = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        f1 = self.stages[0](x)
        f2 = self.stages[1](f1)
        f3 = self.stages[2](f2)
        return f1, f2, f3


class BottleneckEncoder(nn.Module):
    """Encoder feeding the transformer tokens; final stage width 4*base."""

    def __init__(self, in_ch: int, channel_base: int):
        super().__init__()
        widths = (channel_base, 2 * channel_base, 4 * channel_base)
        stages = []
        prev = in_ch
        for width in widths:
            stages.append(nn.Sequential(ConvBlock(prev, width, stride=2),
                                        ConvBlock(width, width)))
            prev = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> torch.Tensor:
        for stage in self.stages:
            x = stage(x)
        return x


class TokenEmbedding(nn.Module):
    """Per-voxel affine projection of the bottleneck into the token space."""

    def __init__(self, in_ch: int, hidden_size: int):
        super().__init__()
        self.proj = nn.Linear(in_ch, hidden_size)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        # (B, C, h, w, z) -> (B, h*w*z, hidden)
        b, c = feature.shape[:2]
        tokens = feature.flatten(2).transpose(1, 2)
        return self.proj(tokens)


def tokens_to_grid(tokens: torch.Tensor, grid: Tuple[int, int, int]) -> torch.Tensor:
    """(B, n, C) -> (B, C, h, w, z); inverse of the embedding flatten."""
    b, n, c = tokens.shape
    h, w, z = grid
    if n != h * w * z:
        raise InvalidInputError(f"{n} tokens cannot fill grid {grid}")
    return tokens.transpose(1, 2).reshape(b, c, h, w, z)


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, h, w, z, C) -> (B * n_windows, ws^3, C) over non-overlapping cubes."""
    b, h, w, z, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, z // ws, ws, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(-1, ws * ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, grid: Tuple[int, int, int]) -> torch.Tensor:
    h, w, z = grid
    b = windows.shape[0] // ((h // ws) * (w // ws) * (z // ws))
    x = windows.view(b, h // ws, w // ws, z // ws, ws, ws, ws, -1)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(b, h, w, z, -1)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside one window; never crosses windows."""

    def __init__(self, dim: int, num_heads: int, attn_drop: float = 0.0, proj_drop: float = 0.0):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigError(f"token width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_drop = nn.Dropout(attn_drop)
        self.proj = nn.Linear(dim, dim)
        self.proj_drop = nn.Dropout(proj_drop)

    def forward(self, x):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = self.attn_drop(attn.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj_drop(self.proj(out))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4, drop: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.act = nn.GELU()
        self.drop1 = nn.Dropout(drop)
        self.fc2 = nn.Linear(ratio * dim, dim)
        self.drop2 = nn.Dropout(drop)

    def forward(self, x):
        return self.drop2(self.fc2(self.drop1(self.act(self.fc1(x)))))


class TransformerBlock(nn.Module):
    """Pre-norm residual block: windowed MSA then token MLP."""

    def __init__(self, dim: int, num_heads: int, drop: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, attn_drop=drop, proj_drop=drop)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, drop=drop)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class WindowTransformer(nn.Module):
    """Stack of non-shifted window-attention blocks on the token grid."""

    def __init__(self, dim: int, depth: int, num_heads: int, window_size: int, drop: float = 0.0):
        super().__init__()
        self.window_size = window_size
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, num_heads, drop=drop) for _ in range(depth)
        )

    def forward(self, tokens: torch.Tensor, grid: Tuple[int, int, int]) -> torch.Tensor:
        ws = self.window_size
        if any(g % ws != 0 for g in grid):
            raise ConfigError(f"token grid {grid} not divisible by window size {ws}")
        b, n, c = tokens.shape
        x = tokens.view(b, *grid, c)
        x = window_partition(x, ws)
        for block in self.blocks:
            x = block(x)
        x = window_reverse(x, ws, grid)
        return x.reshape(b, n, c)


class Decoder(nn.Module):
    """Three deconv+refine steps from the stride-8 bottleneck to full resolution."""

    def __init__(self, in_ch: int, channel_base: int, hidden_size: int):
        super().__init__()
        cb = channel_base
        self.up3 = DeconvBlock(in_ch, 2 * cb)
        self.refine3 = ConvBlock(4 * cb, 2 * cb)
        self.up2 = DeconvBlock(2 * cb, cb)
        self.refine2 = ConvBlock(2 * cb, cb)
        self.up1 = DeconvBlock(cb, cb)

    def forward(self, bottleneck, skip_quarter, skip_half) -> torch.Tensor:
        x = self.up3(bottleneck)
        if x.shape[2:] != skip_quarter.shape[2:]:
            raise InvalidInputError(
                f"skip_quarter {tuple(skip_quarter.shape)} does not match decoder grid {tuple(x.shape)}"
            )
        x = self.refine3(torch.cat([x, skip_quarter], dim=1))
        x = self.up2(x)
        if x.shape[2:] != skip_half.shape[2:]:
            raise InvalidInputError(
                f"skip_half {tuple(skip_half.shape)} does not match decoder grid {tuple(x.shape)}"
            )
        x = self.refine2(torch.cat([x, skip_half], dim=1))
        return self.up1(x)


def normalize_features(pi: torch.Tensor, eps: float = FEATURE_NORM_EPS) -> torch.Tensor:
    """Unit L2 norm per voxel over channels; all-zero voxels stay zero."""
    norm = pi.norm(dim=1, keepdim=True)
    return torch.where(norm > eps, pi / norm.clamp_min(eps), torch.zeros_like(pi))


@dataclass
class ModelOutputs:
    """Forward-pass products; prototype fields are None without a bank."""

    p1: torch.Tensor                       # (B, H, W, Z) intermediate probability
    pi: torch.Tensor                       # (B, M, H, W, Z) decoder feature
    x: torch.Tensor                        # (B, M, H, W, Z) normalized feature
    similarity: Optional[torch.Tensor] = None   # (B, C*K, H, W, Z)
    fused: Optional[torch.Tensor] = None        # (B, M, H, W, Z) attention-refit feature
    pf: Optional[torch.Tensor] = None           # (B, H, W, Z) fused probability


class HybridSegModel(nn.Module):
    """Full network; ablation flags in the config prune submodules at build time."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        require_valid(cfg)
        self.cfg = cfg
        cb, hs = cfg.channel_base, cfg.hidden_size
        flags = cfg.flags
        self.encoder1 = SkipEncoder(2, cb, hs)
        self.has_bottleneck = flags.use_encoder2 or flags.use_transformer
        self.encoder2 = BottleneckEncoder(2, cb) if flags.use_encoder2 else None
        if self.has_bottleneck:
            embed_in = cfg.bottleneck_channels if flags.use_encoder2 else hs
            self.embedding = TokenEmbedding(embed_in, hs)
        else:
            self.embedding = None
        self.transformer = (
            WindowTransformer(hs, cfg.num_transformer_layers, cfg.num_attention_heads,
                              cfg.window_size)
            if flags.use_transformer else None
        )
        dec_in = hs + (hs if self.has_bottleneck else 0)
        self.decoder = Decoder(dec_in, cb, hs)
        self.seg_head = nn.Conv3d(cb, 1, kernel_size=1)
        if flags.use_prototypes:
            from .prototypes import DistanceNetwork
            self.distance_net = DistanceNetwork(cb)
            self.fused_head = nn.Conv3d(cb + cfg.num_prototype_slots, 1,
                                        kernel_size=3, padding=1)
        else:
            self.distance_net = None
            self.fused_head = None

    def forward(self, x: torch.Tensor, bank=None, activate_transformer: bool = True) -> ModelOutputs:
        violations = patch_dim_violations(tuple(x.shape[2:]), self.cfg.window_size, what="input")
        if violations:
            raise ConfigError("; ".join(violations))
        f1_half, f1_quarter, f1_bott = self.encoder1(x)
        if self.has_bottleneck:
            source = self.encoder2(x) if self.encoder2 is not None else f1_bott
            grid = tuple(source.shape[2:])
            tokens = self.embedding(source)
            if self.transformer is not None and activate_transformer:
                tokens = self.transformer(tokens, grid)
            dec_in = torch.cat([f1_bott, tokens_to_grid(tokens, grid)], dim=1)
        else:
            dec_in = f1_bott
        pi = self.decoder(dec_in, f1_quarter, f1_half)
        p1 = torch.sigmoid(self.seg_head(pi)).squeeze(1)
        x_norm = normalize_features(pi)
        out = ModelOutputs(p1=p1, pi=pi, x=x_norm)
        if self.distance_net is not None and bank is not None:
            from .prototypes import attention_fuse, measure_similarity
            out.similarity = measure_similarity(x_norm, bank, self.distance_net)
            head_feature = attention_fuse(x_norm, bank.prototypes) if self.cfg.flags.use_fusion else pi
            out.fused = head_feature
            out.pf = torch.sigmoid(
                self.fused_head(torch.cat([head_feature, out.similarity], dim=1))
            ).squeeze(1)
        return out


def build_model(cfg: NetworkConfig) -> HybridSegModel:
    return HybridSegModel(cfg)


def count_parameters(cfg: NetworkConfig) -> int:
    """Exact trainable-parameter count for the configured architecture."""
    model = build_model(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# analytic FLOP estimate (multiply-add counted as 2 FLOPs)
# ---------------------------------------------------------------------------

def _conv_block_flops(cin, cout, vin, vout, k=27):
    norm_act = 5 * cin * vin                      # batch norm (~4/elem) + leaky ReLU
    return norm_act + 2 * k * cin * cout * vout + cout * vout


def _deconv_block_flops(cin, cout, vin, vout, k=27):
    return 2 * k * cin * cout * vin + cout * vout + 5 * cout * vout


def _encoder_flops(widths, vox):
    # vox[i] = voxels at stride 2^(i+1); input at vox[0]*8
    total = 0
    prev = 2
    vin = vox[0] * 8
    for i, width in enumerate(widths):
        total += _conv_block_flops(prev, width, vin, vox[i])
        total += _conv_block_flops(width, width, vox[i], vox[i])
        prev, vin = width, vox[i]
    return total


def _transformer_flops(n_tokens, dim, depth, window_size):
    w = window_size ** 3
    per_block = (
        2 * 7 * n_tokens * dim                 # two layer norms
        + 2 * n_tokens * dim * 3 * dim + 3 * n_tokens * dim   # qkv projection
        + 2 * n_tokens * w * dim               # attention scores
        + 5 * n_tokens * w                     # softmax
        + 2 * n_tokens * w * dim               # value mixing
        + 2 * n_tokens * dim * dim + n_tokens * dim           # output projection
        + 2 * 2 * n_tokens * dim * 4 * dim + 5 * n_tokens * dim   # MLP matmuls + biases
        + 8 * n_tokens * 4 * dim               # GELU
        + 2 * n_tokens * dim                   # residual adds
    )
    return depth * per_block


def estimate_flops(cfg: NetworkConfig, input_dims: Tuple[int, int, int] | None = None) -> float:
    """FLOPs of one forward pass at the given input size (multiply-add = 2).

    Covers convolutions, projections, attention scores and value mixing,
    normalization/activation elementwise work, and the prototype head when
    enabled.
    """
    require_valid(cfg)
    dims = tuple(input_dims) if input_dims is not None else cfg.patch_dims
    violations = patch_dim_violations(dims, cfg.window_size, what="input")
    if violations:
        raise ConfigError("; ".join(violations))
    cb, hs = cfg.channel_base, cfg.hidden_size
    flags = cfg.flags
    v_full = dims[0] * dims[1] * dims[2]
    vox = [v_full // 8, v_full // 64, v_full // 512]

    total = _encoder_flops((cb, 2 * cb, hs), vox)
    if flags.use_encoder2:
        total += _encoder_flops((cb, 2 * cb, 4 * cb), vox)
    if flags.use_encoder2 or flags.use_transformer:
        embed_in = cfg.bottleneck_channels if flags.use_encoder2 else hs
        total += 2 * vox[2] * embed_in * hs + vox[2] * hs
        dec_in = 2 * hs
    else:
        dec_in = hs
    if flags.use_transformer:
        total += _transformer_flops(vox[2], hs, cfg.num_transformer_layers, cfg.window_size)
    total += _deconv_block_flops(dec_in, 2 * cb, vox[2], vox[1])
    total += _conv_block_flops(4 * cb, 2 * cb, vox[1], vox[1])
    total += _deconv_block_flops(2 * cb, cb, vox[1], vox[0])
    total += _conv_block_flops(2 * cb, cb, vox[0], vox[0])
    total += _deconv_block_flops(cb, cb, vox[0], v_full)
    total += 2 * cb * v_full + v_full + 4 * v_full        # 1x1x1 head + sigmoid
    if flags.use_prototypes:
        slots = cfg.num_prototype_slots
        total += 4 * cb * v_full                          # per-voxel normalization
        per_pair = (2 * (2 * cb) * (2 * cb) + 2 * (2 * cb)   # hidden layer + bias
                    + 2 * cb                               # leaky ReLU
                    + 2 * (2 * cb) + 1)                    # scalar output layer
        total += v_full * slots * per_pair
        if flags.use_fusion:
            total += 2 * v_full * slots * cb + 5 * v_full * slots + 2 * v_full * slots * cb
        total += 2 * 27 * (cb + slots) * v_full + v_full + 4 * v_full
    return float(total)
