"""
Query-based detector: learnable proposals refined over K dynamic-head stages.
"""

import logging
from dataclasses import dataclass
from typing import List

import torch
from torch import nn

from .backbone import FeaturePyramid
from .errors import NumericalFaultError
from .geometry import apply_box_deltas, roi_extract
from .models import DetectorConfig

_logger = logging.getLogger(__name__)


@dataclass
class ProposalState:
    boxes: torch.Tensor  # (B, N, 4) normalized cxcywh
    features: torch.Tensor  # (B, N, d)
    stage: int = 0


@dataclass
class StageOutput:
    boxes: torch.Tensor  # (B, N, 4)
    logits: torch.Tensor  # (B, N)
    codes: torch.Tensor  # (B, N, n_pca)
    features: torch.Tensor  # (B, N, d)
    stage: int

    @property
    def state(self) -> ProposalState:
        return ProposalState(self.boxes, self.features, self.stage)


@dataclass
class DetectionOutput:
    stages: List[StageOutput]

    @property
    def final(self) -> StageOutput:
        return self.stages[-1]

    def __len__(self) -> int:
        return len(self.stages)


def _mlp_block(dim: int, depth: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    for _ in range(depth):
        layers += [nn.Linear(dim, dim, bias=False), nn.LayerNorm(dim), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class DynamicConv(nn.Module):
    """Two 1x1 convolutions over the RoI grid whose weights are generated per proposal."""

    def __init__(self, hidden_dim: int, dynamic_dim: int, pooler_resolution: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.dynamic_dim = dynamic_dim
        self.num_params = hidden_dim * dynamic_dim
        self.dynamic_layer = nn.Linear(hidden_dim, 2 * self.num_params)
        self.norm1 = nn.LayerNorm(dynamic_dim)
        self.norm2 = nn.LayerNorm(hidden_dim)
        self.activation = nn.ReLU(inplace=True)
        self.out_layer = nn.Linear(hidden_dim * pooler_resolution ** 2, hidden_dim)
        self.norm3 = nn.LayerNorm(hidden_dim)

    def forward(self, proposal_features: torch.Tensor, roi_features: torch.Tensor) -> torch.Tensor:
        """
        Args:
            proposal_features: ``(M, d)``
            roi_features: ``(M, S*S, d)``
        """
        params = self.dynamic_layer(proposal_features)
        param1 = params[:, : self.num_params].view(-1, self.hidden_dim, self.dynamic_dim)
        param2 = params[:, self.num_params:].view(-1, self.dynamic_dim, self.hidden_dim)

        x = torch.bmm(roi_features, param1)
        x = self.activation(self.norm1(x))
        x = torch.bmm(x, param2)
        x = self.activation(self.norm2(x))
        x = self.out_layer(x.flatten(1))
        return self.activation(self.norm3(x))


class DynamicHeadStage(nn.Module):
    """One refinement stage: proposal self-attention, dynamic RoI encoding and the prediction heads."""

    def __init__(self, config: DetectorConfig, n_pca: int):
        super().__init__()
        d = config.hidden_dim
        self.pooler_resolution = config.pooler_resolution
        self.self_attn = nn.MultiheadAttention(d, config.num_heads, dropout=config.dropout, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.dynamic_conv = DynamicConv(d, config.dynamic_dim, config.pooler_resolution)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, config.dim_feedforward),
            nn.ReLU(inplace=True),
            nn.Dropout(config.dropout),
            nn.Linear(config.dim_feedforward, d),
        )
        self.norm3 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(config.dropout)

        self.cls_module = _mlp_block(d, 1)
        self.reg_module = _mlp_block(d, 3)
        self.mask_module = _mlp_block(d, 1)
        self.class_logits = nn.Linear(d, 1)
        self.bboxes_delta = nn.Linear(d, 4)
        self.mask_coef = nn.Linear(d, n_pca)

    def zero_init_box_deltas(self) -> None:
        nn.init.zeros_(self.bboxes_delta.weight)
        nn.init.zeros_(self.bboxes_delta.bias)

    def forward(
        self,
        state: ProposalState,
        pyramid: FeaturePyramid,
        image_sizes: torch.Tensor,
        check_finite: bool = False,
    ) -> StageOutput:
        B, N, d = state.features.shape
        roi, _ = roi_extract(
            pyramid.levels, list(state.boxes), image_sizes, (self.pooler_resolution, self.pooler_resolution)
        )
        roi = roi.flatten(2).transpose(1, 2)  # (B*N, S*S, C)

        feats = state.features
        attn, _ = self.self_attn(feats, feats, feats, need_weights=False)
        feats = self.norm1(feats + self.dropout(attn))

        flat = feats.reshape(B * N, d)
        flat = self.norm2(flat + self.dropout(self.dynamic_conv(flat, roi)))
        flat = self.norm3(flat + self.dropout(self.ffn(flat)))
        features = flat.view(B, N, d)

        if check_finite and not torch.isfinite(features).all():
            bad = (~torch.isfinite(features)).any(-1).nonzero()[0]
            raise NumericalFaultError(
                "Non-finite proposal features", stage=state.stage + 1, proposal=int(bad[1])
            )

        logits = self.class_logits(self.cls_module(features)).squeeze(-1)
        deltas = self.bboxes_delta(self.reg_module(features))
        codes = self.mask_coef(self.mask_module(features))
        boxes = apply_box_deltas(state.boxes, deltas)
        return StageOutput(boxes=boxes, logits=logits, codes=codes, features=features, stage=state.stage + 1)


def dynamic_head_stage(
    state: ProposalState, pyramid: FeaturePyramid, image_sizes: torch.Tensor, stage: DynamicHeadStage
) -> StageOutput:
    return stage(state, pyramid, image_sizes)


class QueryDetector(nn.Module):
    """Learnable proposal boxes and features refined by ``num_stages`` dynamic heads."""

    def __init__(self, config: DetectorConfig, n_pca: int):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.init_proposal_boxes = nn.Embedding(config.num_proposals, 4)
        self.init_proposal_features = nn.Embedding(config.num_proposals, d)
        self.image_feature_proj = nn.Linear(d, d, bias=False)
        self.stages = nn.ModuleList(DynamicHeadStage(config, n_pca) for _ in range(config.num_stages))
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        nn.init.constant_(self.init_proposal_boxes.weight[:, :2], 0.5)
        nn.init.constant_(self.init_proposal_boxes.weight[:, 2:], 1.0)
        # focal-loss prior probability 0.01
        prior_bias = -torch.log(torch.tensor((1 - 0.01) / 0.01)).item()
        for stage in self.stages:
            nn.init.constant_(stage.class_logits.bias, prior_bias)

    def init_proposals(self, pyramid: FeaturePyramid) -> ProposalState:
        """Learnable boxes plus learnable features offset by the projected global image feature."""
        p5 = pyramid.levels[-1]
        B = p5.shape[0]
        gap = p5.mean(dim=(2, 3))
        image_feature = self.image_feature_proj(gap)[:, None, :]
        features = self.init_proposal_features.weight[None] + image_feature
        boxes = self.init_proposal_boxes.weight[None].expand(B, -1, -1)
        return ProposalState(boxes=boxes, features=features, stage=0)

    def forward(self, pyramid: FeaturePyramid, image_sizes: torch.Tensor) -> DetectionOutput:
        state = self.init_proposals(pyramid)
        outputs: List[StageOutput] = []
        for stage in self.stages:
            out = stage(state, pyramid, image_sizes, check_finite=self.config.check_finite)
            outputs.append(out)
            state = ProposalState(boxes=out.boxes.detach(), features=out.features, stage=out.stage)
        return DetectionOutput(outputs)


def detect_forward(pyramid: FeaturePyramid, image_sizes: torch.Tensor, detector: QueryDetector) -> DetectionOutput:
    return detector(pyramid, image_sizes)
