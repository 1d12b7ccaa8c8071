"""
Dilated Swin-Transformer backbone with a feature pyramid.

Patch embedding, four Swin stages joined by patch merging, one dilated
convolution unit per stage output, then an FPN producing P2-P5 at strides
4/8/16/32 with ``d_model`` channels each. A residual CNN with the same output
contract is available through ``backbone.kind = "resnet"``.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models.resnet import BasicBlock
from torchvision.ops import FeaturePyramidNetwork

from .errors import ConfigurationError, ShapeError
from .geometry import PYRAMID_STRIDES
from .models import BackboneConfig

_logger = logging.getLogger(__name__)

SIZE_DIVISOR = 32


@dataclass
class FeaturePyramid:
    """Levels P2..P5, each ``(B, d_model, H/stride, W/stride)`` of the padded input."""

    levels: List[torch.Tensor]
    strides: Tuple[int, ...] = PYRAMID_STRIDES

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.levels[index]

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> int:
        return int(self.levels[0].shape[1])


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """``(B, H, W, C) -> (B * num_windows, window * window, C)``."""
    B, H, W, C = x.shape
    x = x.view(B, H // window, window, W // window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_reverse(windows: torch.Tensor, window: int, H: int, W: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    C = windows.shape[-1]
    x = windows.view(-1, H // window, W // window, window, window, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(window: int, table_window: int) -> torch.Tensor:
    """Index into a ``(2*table_window-1)^2`` bias table for every token pair of a ``window`` grid."""
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel = rel + (table_window - 1)
    return rel[..., 0] * (2 * table_window - 1) + rel[..., 1]


def shifted_window_mask(H: int, W: int, window: int, shift: int, device: torch.device) -> torch.Tensor:
    """Additive ``(num_windows, N, N)`` mask keeping attention inside regions that were adjacent before the roll."""
    img_mask = torch.zeros((1, H, W, 1), device=device)
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img_mask[:, hs, ws, :] = cnt
            cnt += 1
    mask_windows = window_partition(img_mask, window).squeeze(-1)
    mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


def padding_window_mask(
    H: int, W: int, Hp: int, Wp: int, window: int, shift: int, device: torch.device
) -> torch.Tensor:
    """Additive ``(num_windows, N, N)`` mask hiding the zero padding beyond ``H x W`` from every query."""
    valid = torch.zeros((1, Hp, Wp, 1), device=device)
    valid[:, :H, :W, :] = 1.0
    if shift:
        valid = torch.roll(valid, shifts=(-shift, -shift), dims=(1, 2))
    keys = window_partition(valid, window).squeeze(-1)
    return ((1.0 - keys) * -100.0).unsqueeze(1).expand(-1, window * window, -1)


class WindowAttention(nn.Module):
    """Window multi-head self-attention with a learned relative position bias."""

    def __init__(self, dim: int, num_heads: int, window_size: int):
        super().__init__()
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def _bias(self, window: int) -> torch.Tensor:
        index = relative_position_index(window, self.window_size).to(self.relative_position_bias_table.device)
        bias = self.relative_position_bias_table[index.view(-1)].view(window * window, window * window, -1)
        return bias.permute(2, 0, 1).unsqueeze(0)

    def forward(self, x: torch.Tensor, window: int, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.num_heads, -1).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self._bias(window)
        if mask is not None:
            num_windows = mask.shape[0]
            attn = attn.view(-1, num_windows, self.num_heads, N, N) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        return self.proj(out)


class SwinBlock(nn.Module):
    """Pre-norm window attention and MLP, each with a residual connection."""

    def __init__(self, dim: int, num_heads: int, window_size: int, shifted: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.window_size = window_size
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def zero_init_residual(self) -> None:
        for layer in (self.attn.proj, self.mlp[-1]):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        window = min(self.window_size, H, W)
        shift = window // 2 if self.shifted and window < max(H, W) else 0

        shortcut = x
        x = self.norm1(x)
        pad_b = (window - H % window) % window
        pad_r = (window - W % window) % window
        x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        Hp, Wp = H + pad_b, W + pad_r

        mask = None
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            mask = shifted_window_mask(Hp, Wp, window, shift, x.device).to(x.dtype)
        if pad_b or pad_r:
            pad_mask = padding_window_mask(H, W, Hp, Wp, window, shift, x.device).to(x.dtype)
            mask = pad_mask if mask is None else mask + pad_mask

        windows = window_partition(x, window)
        windows = self.attn(windows, window, mask)
        x = window_reverse(windows, window, Hp, Wp)

        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        x = x[:, :H, :W, :]

        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class SwinStage(nn.Module):
    """Blocks alternating plain and shifted windows; ``(B, C, H, W)`` in and out."""

    def __init__(self, dim: int, depth: int, num_heads: int, window_size: int, mlp_ratio: float = 4.0):
        super().__init__()
        if dim % num_heads != 0:
            raise ConfigurationError(
                f"Stage width {dim} is not divisible by {num_heads} heads",
                config_key="backbone.num_heads",
                config_value=num_heads,
            )
        self.blocks = nn.ModuleList(
            SwinBlock(dim, num_heads, window_size, shifted=(i % 2 == 1), mlp_ratio=mlp_ratio)
            for i in range(depth)
        )

    def zero_init_residual(self) -> None:
        for block in self.blocks:
            block.zero_init_residual()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.permute(0, 2, 3, 1)
        for block in self.blocks:
            x = block(x)
        return x.permute(0, 3, 1, 2).contiguous()


def swin_stage_forward(x: torch.Tensor, stage: SwinStage) -> torch.Tensor:
    return stage(x)


class PatchMerging(nn.Module):
    """2x2 neighborhood concat, norm and linear reduction: ``(B, C, H, W) -> (B, 2C, H/2, W/2)``."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        x = x.permute(0, 2, 3, 1)
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 4, 2, 5).flatten(3)
        x = self.reduction(self.norm(x))
        return x.permute(0, 3, 1, 2).contiguous()


class DCUnit(nn.Module):
    """Residual unit of two dilated 3x3 convolutions and one 1x1 convolution."""

    def __init__(self, channels: int, dilation: int = 2, zero_init: bool = False):
        super().__init__()
        self.dilation = dilation
        self.conv1 = nn.Conv2d(channels, channels, 3, dilation=dilation)
        self.conv2 = nn.Conv2d(channels, channels, 3, dilation=dilation)
        self.conv3 = nn.Conv2d(channels, channels, 1)
        self.act = nn.ReLU(inplace=False)
        if zero_init:
            nn.init.zeros_(self.conv3.weight)
            nn.init.zeros_(self.conv3.bias)

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        d = self.dilation
        # reflect needs the map to be larger than the pad
        mode = "reflect" if min(x.shape[-2:]) > d else "replicate"
        return F.pad(x, (d, d, d, d), mode=mode)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.act(self.conv1(self._pad(x)))
        y = self.act(self.conv2(self._pad(y)))
        return x + self.conv3(y)


def dc_unit(x: torch.Tensor, unit: DCUnit) -> torch.Tensor:
    return unit(x)


def pad_to_multiple(images: torch.Tensor, divisor: int = SIZE_DIVISOR) -> torch.Tensor:
    H, W = images.shape[-2:]
    pad_b = (divisor - H % divisor) % divisor
    pad_r = (divisor - W % divisor) % divisor
    if pad_b or pad_r:
        images = F.pad(images, (0, pad_r, 0, pad_b))
    return images


class _PyramidBackbone(nn.Module):
    """Shared FPN head; subclasses produce the four stage outputs."""

    def __init__(self, stage_channels: Sequence[int], d_model: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.d_model = d_model
        self.fpn = FeaturePyramidNetwork(list(stage_channels), d_model)

    def stage_outputs(self, images: torch.Tensor) -> List[torch.Tensor]:
        raise NotImplementedError

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError("expected images of shape (B, 3, H, W)", component="backbone",
                             actual=tuple(images.shape))
        if min(images.shape[-2:]) < self.patch_size:
            raise ShapeError("image smaller than one patch", component="backbone",
                             expected=f">= {self.patch_size}", actual=tuple(images.shape[-2:]))
        images = pad_to_multiple(images)
        feats = self.stage_outputs(images)
        out = self.fpn(OrderedDict((f"c{i + 2}", f) for i, f in enumerate(feats)))
        return FeaturePyramid(list(out.values()))


class SwinBackbone(_PyramidBackbone):
    def __init__(self, config: BackboneConfig):
        widths = [config.embed_dim * 2 ** i for i in range(4)]
        super().__init__(widths, config.d_model, config.patch_size)
        self.patch_embed = nn.Conv2d(3, config.embed_dim, config.patch_size, stride=config.patch_size)
        self.embed_norm = nn.LayerNorm(config.embed_dim)
        self.stages = nn.ModuleList(
            SwinStage(w, d, h, config.window_size, config.mlp_ratio)
            for w, d, h in zip(widths, config.depths, config.num_heads)
        )
        self.merges = nn.ModuleList(PatchMerging(w) for w in widths[:-1])
        self.dc_units = nn.ModuleList(DCUnit(w, config.dc_dilation) for w in widths)

    def stage_outputs(self, images: torch.Tensor) -> List[torch.Tensor]:
        x = self.patch_embed(images)
        x = self.embed_norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        outputs = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.merges[i - 1](x)
            x = swin_stage_forward(x, stage)
            outputs.append(dc_unit(x, self.dc_units[i]))
        return outputs


class ResidualBackbone(_PyramidBackbone):
    """Plain residual CNN (BasicBlocks, no dilated units) with the same pyramid contract."""

    def __init__(self, config: BackboneConfig):
        widths = [config.embed_dim * 2 ** i for i in range(4)]
        super().__init__(widths, config.d_model, config.patch_size)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        layers = []
        in_ch = widths[0]
        for i, (w, depth) in enumerate(zip(widths, config.depths)):
            stride = 1 if i == 0 else 2
            downsample = None
            if stride != 1 or in_ch != w:
                downsample = nn.Sequential(nn.Conv2d(in_ch, w, 1, stride=stride, bias=False), nn.BatchNorm2d(w))
            blocks = [BasicBlock(in_ch, w, stride=stride, downsample=downsample)]
            blocks += [BasicBlock(w, w) for _ in range(depth - 1)]
            layers.append(nn.Sequential(*blocks))
            in_ch = w
        self.layers = nn.ModuleList(layers)

    def stage_outputs(self, images: torch.Tensor) -> List[torch.Tensor]:
        x = self.stem(images)
        outputs = []
        for layer in self.layers:
            x = layer(x)
            outputs.append(x)
        return outputs


def build_backbone(config: BackboneConfig) -> _PyramidBackbone:
    """Instantiate the backbone selected by ``config.kind``."""
    if config.kind == "swin":
        backbone: _PyramidBackbone = SwinBackbone(config)
    elif config.kind == "resnet":
        backbone = ResidualBackbone(config)
    else:
        raise ConfigurationError(
            f"Unknown backbone kind: {config.kind}",
            config_key="backbone.kind",
            config_value=config.kind,
            valid_options=["swin", "resnet"],
        )
    _logger.debug("built %s backbone", config.kind, extra={"d_model": config.d_model})
    return backbone


def build_pyramid(images: torch.Tensor, backbone: _PyramidBackbone) -> FeaturePyramid:
    return backbone(images)
