"""
Recognition Conversion: turns detection features into soft text masks that
gate the recognition RoI pyramid, so the recognition loss reaches the detector.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .models import RCConfig

_logger = logging.getLogger(__name__)


@dataclass
class RecognitionRoIPyramid:
    a1: torch.Tensor  # (n, C, S, S)
    a2: torch.Tensor  # (n, C, S/2, S/2)
    a3: torch.Tensor  # (n, C, S/4, S/4)


@dataclass
class RecognitionFeatures:
    r1: torch.Tensor
    r2: torch.Tensor
    r3: torch.Tensor
    masks: Optional[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]
    f_det: Optional[torch.Tensor] = None


def recognition_rois(a1: torch.Tensor) -> RecognitionRoIPyramid:
    """Downsample one ``S x S`` RoI extraction into the three-level pyramid."""
    size = a1.shape[-1]
    if a1.shape[-2] != size or size % 4 != 0:
        raise ShapeError("recognition RoI must be square with a side divisible by 4",
                         component="recognition_rois", actual=tuple(a1.shape[-2:]))
    return RecognitionRoIPyramid(a1=a1, a2=F.avg_pool2d(a1, 2), a3=F.avg_pool2d(a1, 4))


def sine_position_encoding(height: int, width: int, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """2-D sinusoidal encoding, ``(height * width, dim)``; half the channels encode y, half x."""
    if dim % 4 != 0:
        raise ShapeError("positional encoding dim must be divisible by 4", component="sine_position_encoding",
                         actual=dim)
    quarter = dim // 4
    omega = 1.0 / temperature ** (torch.arange(quarter, dtype=torch.float32) / quarter)
    y, x = torch.meshgrid(
        torch.arange(height, dtype=torch.float32), torch.arange(width, dtype=torch.float32), indexing="ij"
    )
    y = y.flatten()[:, None] * omega[None]
    x = x.flatten()[:, None] * omega[None]
    return torch.cat([y.sin(), y.cos(), x.sin(), x.cos()], dim=1)


class UpsampleBlock(nn.Module):
    """Bilinear 2x upsampling followed by a 3x3 convolution."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(x)


def _group_count(channels: int) -> int:
    for groups in (32, 16, 8, 4, 2):
        if channels % groups == 0:
            return groups
    return 1


class RecognitionConversion(nn.Module):
    """Fuses the final proposal feature with the RoI pyramid and produces r1..r3."""

    def __init__(self, channels: int, proposal_dim: int, config: RCConfig, pooled_size: int = 7):
        super().__init__()
        self.config = config
        self.pooled_size = pooled_size
        self.prop_proj = nn.Linear(proposal_dim, channels, bias=False)
        self.fuse_norm = nn.GroupNorm(_group_count(channels), channels)
        self.fuse_conv = nn.Conv2d(channels, channels, 3, padding=1)

        layer = nn.TransformerEncoderLayer(
            channels, config.encoder_heads, dim_feedforward=2 * channels, dropout=0.0, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, config.encoder_layers, enable_nested_tensor=False)
        self.register_buffer(
            "pos_embed", sine_position_encoding(pooled_size, pooled_size, channels), persistent=False
        )

        self.up_d1 = UpsampleBlock(channels)
        self.up_d2 = UpsampleBlock(channels)
        self.up_r1 = UpsampleBlock(channels)
        self.up_r2 = UpsampleBlock(channels)
        self.mask_heads = nn.ModuleList(nn.Conv2d(channels, 1, 1) for _ in range(3))

    def fuse_detection_feature(self, a3: torch.Tensor, prop: torch.Tensor) -> torch.Tensor:
        """``f_det = conv3x3(norm(a3 + broadcast(linear(prop))))``."""
        x = a3 + self.prop_proj(prop)[:, :, None, None]
        return self.fuse_conv(self.fuse_norm(x))

    def encode_detection(self, f_det: torch.Tensor) -> torch.Tensor:
        n, c, h, w = f_det.shape
        tokens = f_det.flatten(2).transpose(1, 2)
        pos = self.pos_embed if (h, w) == (self.pooled_size, self.pooled_size) else \
            sine_position_encoding(h, w, c).to(f_det)
        tokens = self.encoder(tokens + pos.to(tokens.dtype))
        return tokens.transpose(1, 2).reshape(n, c, h, w)

    def rc_forward(self, rois: RecognitionRoIPyramid, f_det: torch.Tensor) -> RecognitionFeatures:
        """Soft masks M1..M3 from the decoded detection feature, each gating its pyramid level."""
        if f_det.shape != rois.a3.shape:
            raise ShapeError("f_det must match a3", component="rc_forward",
                             expected=tuple(rois.a3.shape), actual=tuple(f_det.shape))
        d1 = self.encode_detection(f_det)
        d2 = self.up_d1(d1) + rois.a2
        d3 = self.up_d2(d2) + rois.a1
        m1, m2, m3 = (torch.sigmoid(head(d)) for head, d in zip(self.mask_heads, (d1, d2, d3)))

        r1 = m1 * rois.a3
        r2 = m2 * (self.up_r1(r1) + rois.a2)
        r3 = m3 * (self.up_r2(r2) + rois.a1)
        return RecognitionFeatures(r1=r1, r2=r2, r3=r3, masks=(m1, m2, m3), f_det=f_det)

    def fusion_forward(self, rois: RecognitionRoIPyramid, mask_k: torch.Tensor) -> RecognitionFeatures:
        """Conversion disabled: the fusion pyramid gated by the detector's own decoded mask."""
        r1 = rois.a3
        r2 = self.up_r1(r1) + rois.a2
        r3 = (self.up_r2(r2) + rois.a1) * mask_k.detach()[:, None]
        return RecognitionFeatures(r1=r1, r2=r2, r3=r3, masks=None)

    def forward(
        self,
        a1: torch.Tensor,
        prop: torch.Tensor,
        mask_k: Optional[torch.Tensor] = None,
    ) -> RecognitionFeatures:
        """
        Args:
            a1: ``(n, C, S, S)`` recognition RoI features of the matched proposals
            prop: ``(n, d)`` their final-stage proposal features
            mask_k: ``(n, S, S)`` decoded final-stage masks, used when conversion is disabled
        """
        rois = recognition_rois(a1)
        if not self.config.enabled:
            if mask_k is None:
                raise ShapeError("decoded masks are required when conversion is disabled",
                                 component="recognition_conversion")
            return self.fusion_forward(rois, mask_k)

        f_det = self.fuse_detection_feature(rois.a3, prop)
        if self.config.stop_gradient:
            f_det = f_det.detach()
        return self.rc_forward(rois, f_det)

