"""
End-to-end text spotter: backbone, query detector, recognition conversion and recognizer.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
from torch import nn

from .backbone import FeaturePyramid, build_backbone
from .conversion import RecognitionConversion
from .dataset import ImageTargets
from .detector import DetectionOutput, QueryDetector, StageOutput
from .geometry import giou, mask_to_polygon, polygon_nms, roi_extract
from .losses import detection_loss_stage, recognition_loss
from .mask_codec import MaskCodec
from .matcher import Assignment, hungarian_assign, match_cost_matrix
from .models import RunConfig, SpottingResult
from .recognizer import Recognizer, SequencePrediction

_logger = logging.getLogger(__name__)

PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)


@dataclass
class SpotterOutput:
    pyramid: FeaturePyramid
    detection: DetectionOutput


class TextSpotter(nn.Module):
    """Detection and recognition in one differentiable pass."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config
        d = config.backbone.d_model
        self.backbone = build_backbone(config.backbone)
        self.codec = MaskCodec(config.mask_codec.n_pca, config.mask_codec.resolution)
        self.detector = QueryDetector(config.detector, config.mask_codec.n_pca)
        self.rc = RecognitionConversion(d, config.detector.hidden_dim, config.rc, config.detector.pooler_resolution)
        self.recognizer = Recognizer(d, config.recognizer)
        self.register_buffer("pixel_mean", torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(PIXEL_STD).view(1, 3, 1, 1), persistent=False)

    @property
    def charset(self):
        return self.recognizer.charset

    def forward(self, images: torch.Tensor, image_sizes: torch.Tensor) -> SpotterOutput:
        """
        Args:
            images: ``(B, 3, H, W)`` in [0, 1], zero padded to a common size
            image_sizes: ``(B, 2)`` unpadded ``(height, width)``
        """
        pyramid = self.backbone((images - self.pixel_mean) / self.pixel_std)
        detection = self.detector(pyramid, image_sizes)
        return SpotterOutput(pyramid=pyramid, detection=detection)

    # ------------------------------------------------------------------
    # Training
    # ------------------------------------------------------------------

    def match_stage(self, stage: StageOutput, targets: List[ImageTargets]) -> List[Assignment]:
        """Per-image assignment of this stage's proposals to the care ground truths."""
        assignments = []
        for b, target in enumerate(targets):
            care = target.care_targets()
            if care.num_instances == 0:
                assignments.append(Assignment())
                continue
            cost = match_cost_matrix(
                stage.logits[b], stage.boxes[b], stage.codes[b],
                care.boxes, self.codec.encode(care.masks), self.config.loss,
            )
            assignments.append(hungarian_assign(cost))
        return assignments

    def _stage_weights(self) -> List[float]:
        weights = self.config.detector.stage_loss_weights
        return list(weights) if weights is not None else [1.0] * self.config.detector.num_stages

    def compute_losses(
        self, images: torch.Tensor, image_sizes: torch.Tensor, targets: List[ImageTargets]
    ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        """Stage-wise matched detection losses plus the recognition loss of the final stage."""
        out = self(images, image_sizes)
        num_images = max(1, len(targets))
        breakdown: Dict[str, torch.Tensor] = {}
        loss_det = images.new_zeros(())
        final_assignments: List[Assignment] = []

        for stage, stage_weight in zip(out.detection.stages, self._stage_weights()):
            assignments = self.match_stage(stage, targets)
            for b, (target, assignment) in enumerate(zip(targets, assignments)):
                care = target.care_targets()
                total, terms = detection_loss_stage(
                    stage.logits[b], stage.boxes[b], stage.codes[b],
                    care.boxes, self.codec.encode(care.masks), care.masks,
                    assignment, self.config.loss, self.codec,
                )
                loss_det = loss_det + stage_weight * total / num_images
                for name, value in terms.items():
                    key = f"s{stage.stage}.{name}"
                    breakdown[key] = breakdown.get(key, 0.0) + value.detach() / num_images
            final_assignments = assignments

        loss_rec = self.recognition_loss(out, targets, final_assignments, image_sizes)
        total = loss_det + self.config.loss.rec * loss_rec
        breakdown["loss_det"] = loss_det.detach()
        breakdown["loss_rec"] = loss_rec.detach()
        breakdown["loss_total"] = total.detach()
        return total, breakdown

    def recognition_features(
        self,
        pyramid: FeaturePyramid,
        final: StageOutput,
        picks: List[torch.Tensor],
        image_sizes: torch.Tensor,
    ):
        """RC features for the chosen final-stage proposals of every image."""
        roi_size = self.config.recognizer.roi_size
        boxes = [final.boxes[b][idx] for b, idx in enumerate(picks)]
        a1, _ = roi_extract(pyramid.levels, boxes, image_sizes, (roi_size, roi_size))
        props = torch.cat([final.features[b][idx] for b, idx in enumerate(picks)], dim=0)
        codes = torch.cat([final.codes[b][idx] for b, idx in enumerate(picks)], dim=0)
        mask_k = self.codec.decode(codes, clamp=True)
        return self.rc(a1, props, mask_k)

    def recognition_loss(
        self,
        out: SpotterOutput,
        targets: List[ImageTargets],
        assignments: List[Assignment],
        image_sizes: torch.Tensor,
    ) -> torch.Tensor:
        device = out.detection.final.logits.device
        picks, texts = [], []
        for target, assignment in zip(targets, assignments):
            care = target.care_targets()
            picks.append(torch.as_tensor(assignment.proposal_indices, dtype=torch.long, device=device))
            texts.append(care.texts[torch.as_tensor(assignment.gt_indices, dtype=torch.long, device=device)])
        if sum(len(p) for p in picks) == 0:
            return out.detection.final.logits.sum() * 0.0
        features = self.recognition_features(out.pyramid, out.detection.final, picks, image_sizes)
        target_ids = torch.cat(texts, dim=0)
        pred = self.recognizer(features.r3, target_ids)
        return recognition_loss(pred.logits, target_ids)

    @torch.no_grad()
    def stage_matched_giou(
        self, images: torch.Tensor, image_sizes: torch.Tensor, targets: List[ImageTargets]
    ) -> List[float]:
        """Mean gIoU between matched proposals and their ground truths, per stage."""
        out = self(images, image_sizes)
        means = []
        for stage in out.detection.stages:
            values = []
            for b, (target, assignment) in enumerate(zip(targets, self.match_stage(stage, targets))):
                if len(assignment):
                    care = target.care_targets()
                    values.append(giou(stage.boxes[b][assignment.proposal_indices],
                                       care.boxes[assignment.gt_indices]))
            means.append(float(torch.cat(values).mean()) if values else 0.0)
        return means

    # ------------------------------------------------------------------
    # Inference
    # ------------------------------------------------------------------

    @torch.no_grad()
    def predict(
        self,
        images: torch.Tensor,
        image_sizes: torch.Tensor,
        score_threshold: Optional[float] = None,
        mask_threshold: Optional[float] = None,
        with_attention: bool = False,
        use_polygon_nms: Optional[bool] = None,
    ) -> List[List[SpottingResult]]:
        """Spotting results per image, highest confidence first."""
        cfg = self.config.eval
        score_threshold = cfg.score_threshold if score_threshold is None else score_threshold
        mask_threshold = cfg.mask_threshold if mask_threshold is None else mask_threshold
        use_polygon_nms = cfg.polygon_nms if use_polygon_nms is None else use_polygon_nms

        out = self(images, image_sizes)
        final = out.detection.final
        scores = final.logits.sigmoid()
        picks = []
        for b in range(scores.shape[0]):
            idx = torch.nonzero(scores[b] >= score_threshold, as_tuple=False).squeeze(1)
            order = torch.argsort(scores[b][idx], descending=True, stable=True)
            picks.append(idx[order])

        results: List[List[SpottingResult]] = [[] for _ in picks]
        if sum(len(p) for p in picks) == 0:
            return results

        features = self.recognition_features(out.pyramid, final, picks, image_sizes)
        pred: SequencePrediction = self.recognizer(features.r3)
        masks = self.codec.decode(torch.cat([final.codes[b][idx] for b, idx in enumerate(picks)]), clamp=True)

        offset = 0
        max_steps = self.config.recognizer.max_length
        for b, idx in enumerate(picks):
            size = (int(image_sizes[b, 0]), int(image_sizes[b, 1]))
            polygons, items = [], []
            for j, p in enumerate(idx.tolist()):
                k = offset + j
                box = final.boxes[b, p].tolist()
                polygon = mask_to_polygon(masks[k].cpu().numpy(), box, size, mask_threshold)
                text = pred.strings[k]
                attention = None
                if with_attention:
                    steps = min(len(text) + 1, max_steps)
                    attention = pred.attention[k, :steps].cpu().tolist()
                polygons.append(polygon)
                items.append(SpottingResult(
                    polygon=polygon.reshape(-1).tolist(),
                    text=text,
                    confidence=float(scores[b, p]),
                    attention=attention,
                ))
            offset += len(idx)
            if use_polygon_nms and items:
                keep = polygon_nms(polygons, [r.confidence for r in items], cfg.nms_iou)
                items = [items[i] for i in keep]
            results[b] = items
        return results

