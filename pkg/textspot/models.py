"""
Pydantic models for textspot configuration and data structures.
Provides type-safe models with validation for dataset records, predictions,
metric reports and the hierarchical run configuration.
"""

import math
from datetime import datetime
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from shapely.geometry import Polygon as ShapelyPolygon

DEFAULT_CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789"


def _check_flat_polygon(v: List[float], min_points: int = 3) -> List[float]:
    if len(v) % 2 != 0:
        raise ValueError("polygon must hold an even number of coordinates")
    if len(v) // 2 < min_points:
        raise ValueError(f"polygon needs at least {min_points} points, got {len(v) // 2}")
    if not all(math.isfinite(c) for c in v):
        raise ValueError("polygon coordinates must be finite")
    return [float(c) for c in v]


class TextInstance(BaseModel):
    """A ground-truth word: polygon, transcription and care flag."""

    polygon: List[float] = Field(..., description="Flat [x1, y1, x2, y2, ...] in absolute pixels")
    text: str = Field(default="", description="Transcription")
    care: bool = Field(default=True, description="False marks a 'do not care' instance")

    @field_validator('polygon')
    @classmethod
    def validate_polygon(cls, v):
        v = _check_flat_polygon(v)
        shape = ShapelyPolygon(np.asarray(v, dtype=np.float64).reshape(-1, 2))
        if not shape.is_valid:
            raise ValueError("polygon must be simple (non-self-intersecting)")
        if shape.area <= 0:
            raise ValueError("polygon must have positive area")
        return v

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.polygon, dtype=np.float64).reshape(-1, 2)

    model_config = ConfigDict(extra="forbid")


class DatasetRecord(BaseModel):
    """One image of a dataset split and its annotations."""

    image: str = Field(..., description="Image path relative to the dataset file")
    instances: List[TextInstance] = Field(default_factory=list)

    @field_validator('image')
    @classmethod
    def validate_image(cls, v):
        if not v or not v.strip():
            raise ValueError("image path cannot be empty")
        return v.strip()

    model_config = ConfigDict(extra="forbid")


class SpottingResult(BaseModel):
    """A single spotted word."""

    polygon: List[float] = Field(..., description="Flat [x1, y1, ...] in absolute pixels")
    text: str = Field(default="")
    confidence: float = Field(..., ge=0.0, le=1.0)
    attention: Optional[List[List[List[float]]]] = Field(
        default=None,
        description="Decoder attention maps, one 28x28 map per decoded character"
    )

    @field_validator('polygon')
    @classmethod
    def validate_polygon(cls, v):
        return _check_flat_polygon(v)

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.polygon, dtype=np.float64).reshape(-1, 2)

    model_config = ConfigDict(extra="forbid")


class ImagePredictions(BaseModel):
    """Spotting results for one image, or the error that prevented them."""

    image: str
    error: Optional[str] = None
    results: List[SpottingResult] = Field(default_factory=list)

    model_config = ConfigDict(extra="forbid")


class PredictionsFile(BaseModel):
    """Top-level predictions JSON."""

    images: List[ImagePredictions] = Field(default_factory=list)
    checkpoint: Optional[str] = None
    timestamp: datetime = Field(default_factory=datetime.now)

    model_config = ConfigDict(extra="forbid")


class DetectionScores(BaseModel):
    P: float = Field(0.0, ge=0.0, le=1.0, description="Precision")
    R: float = Field(0.0, ge=0.0, le=1.0, description="Recall")
    H: float = Field(0.0, ge=0.0, le=1.0, description="Harmonic mean")

    model_config = ConfigDict(extra="forbid")


class MetricsReport(BaseModel):
    """Evaluation report over one dataset split."""

    detection: DetectionScores = Field(default_factory=DetectionScores)
    e2e_none: float = Field(0.0, ge=0.0, le=1.0)
    e2e_full: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    one_minus_ned: float = Field(0.0, ge=0.0, le=1.0)
    word_accuracy: float = Field(0.0, ge=0.0, le=1.0, description="Correct words over care ground truths")
    num_images: int = Field(0, ge=0)
    num_gt: int = Field(0, ge=0)
    num_pred: int = Field(0, ge=0)
    stage_giou: List[float] = Field(
        default_factory=list,
        description="Mean matched gIoU per detection stage"
    )
    dataset_path: Optional[str] = None
    checkpoint: Optional[str] = None
    timestamp: datetime = Field(default_factory=datetime.now)

    @model_validator(mode='after')
    def validate_e2e_bound(self):
        if self.e2e_none > self.detection.H + 1e-9:
            raise ValueError("end-to-end H-mean cannot exceed detection H-mean")
        return self

    model_config = ConfigDict(extra="forbid")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


class BackboneConfig(BaseModel):
    """Dilated Swin-Transformer (or residual CNN) backbone with FPN."""

    kind: Literal["swin", "resnet"] = Field(default="swin")
    patch_size: int = Field(default=4, description="Patch embedding stride")
    embed_dim: int = Field(default=32, ge=4, description="Width of the first stage")
    depths: Tuple[int, int, int, int] = Field(default=(2, 2, 2, 2))
    num_heads: Tuple[int, int, int, int] = Field(default=(2, 4, 8, 8))
    window_size: int = Field(default=4, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0.0)
    d_model: int = Field(default=64, ge=4, description="FPN output channels")
    dc_dilation: int = Field(default=2, ge=1)

    @model_validator(mode='after')
    def validate_heads(self):
        if self.patch_size != 4:
            raise ValueError("patch_size must be 4 so the pyramid strides are 4/8/16/32")
        for i, heads in enumerate(self.num_heads):
            width = self.embed_dim * 2 ** i
            if width % heads != 0:
                raise ValueError(f"stage {i} width {width} is not divisible by {heads} heads")
        return self

    model_config = ConfigDict(extra="forbid")


class DetectorConfig(BaseModel):
    """Query-based multi-stage detector."""

    num_proposals: int = Field(default=100, ge=1)
    hidden_dim: int = Field(default=256, ge=4)
    num_stages: int = Field(default=6, ge=1)
    dynamic_dim: int = Field(default=64, ge=1)
    num_heads: int = Field(default=8, ge=1)
    dim_feedforward: int = Field(default=2048, ge=1)
    pooler_resolution: int = Field(default=7, ge=1)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    stage_loss_weights: Optional[List[float]] = Field(default=None)
    check_finite: bool = Field(default=True, description="Fault on non-finite stage activations")

    @model_validator(mode='after')
    def validate_dims(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.stage_loss_weights is not None and len(self.stage_loss_weights) != self.num_stages:
            raise ValueError("stage_loss_weights needs one weight per stage")
        return self

    model_config = ConfigDict(extra="forbid")


class MaskCodecConfig(BaseModel):
    n_pca: int = Field(default=60, ge=1)
    resolution: int = Field(default=28, ge=2)
    max_fit_masks: int = Field(default=20000, ge=1, description="Cap on masks used to fit the basis")

    model_config = ConfigDict(extra="forbid")


class RCConfig(BaseModel):
    """Recognition Conversion."""

    enabled: bool = Field(default=True)
    stop_gradient: bool = Field(default=False, description="Detach f_det from the recognition loss")
    encoder_layers: int = Field(default=2, ge=1)
    encoder_heads: int = Field(default=4, ge=1)

    model_config = ConfigDict(extra="forbid")


class RecognizerConfig(BaseModel):
    charset: str = Field(default=DEFAULT_CHARSET)
    max_length: int = Field(default=25, ge=2, description="T, including the end-of-sequence slot")
    roi_size: int = Field(default=28, description="Recognition RoI size (four times the detection RoI)")
    tlsam_window: int = Field(default=7, ge=1)
    tlsam_pool: int = Field(default=4, ge=1)
    tlsam_depth: int = Field(default=2, ge=1)
    tlsam_heads: int = Field(default=4, ge=1)

    @field_validator('charset')
    @classmethod
    def validate_charset(cls, v):
        if not v:
            raise ValueError("charset cannot be empty")
        if len(set(v)) != len(v):
            raise ValueError("charset symbols must be unique")
        return v

    @model_validator(mode='after')
    def validate_roi(self):
        if self.roi_size % 4 != 0:
            raise ValueError("roi_size must be divisible by 4 for the a1/a2/a3 chain")
        if self.roi_size % self.tlsam_window != 0 or self.roi_size % self.tlsam_pool != 0:
            raise ValueError("roi_size must be divisible by tlsam_window and tlsam_pool")
        return self

    model_config = ConfigDict(extra="forbid")


class LossWeights(BaseModel):
    """Matching cost and detection loss weights."""

    cls: float = Field(default=2.0, ge=0.0)
    l1: float = Field(default=5.0, ge=0.0)
    giou: float = Field(default=2.0, ge=0.0)
    mask: float = Field(default=2.0, ge=0.0)
    rec: float = Field(default=1.0, ge=0.0, description="Weight of the recognition loss")
    focal_alpha: float = Field(default=0.25, ge=0.0, le=1.0)
    focal_gamma: float = Field(default=2.0, ge=0.0)

    @model_validator(mode='after')
    def validate_positive(self):
        if max(self.cls, self.l1, self.giou, self.mask) <= 0:
            raise ValueError("at least one matching weight must be positive")
        return self

    model_config = ConfigDict(extra="forbid")


class OptimizerConfig(BaseModel):
    lr: float = Field(default=2.5e-5, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    schedule: Literal["multistep", "cosine"] = Field(default="multistep")
    milestones: List[int] = Field(default_factory=lambda: [380000, 420000])
    gamma: float = Field(default=0.1, gt=0.0)
    max_iter: int = Field(default=450000, ge=1)
    batch_size: int = Field(default=8, ge=1)
    grad_clip: Optional[float] = Field(default=1.0, gt=0.0)
    checkpoint_period: int = Field(default=5000, ge=1)
    log_period: int = Field(default=20, ge=1)

    model_config = ConfigDict(extra="forbid")


class SynthProfile(BaseModel):
    """Synthetic scene-text rendering profile."""

    image_height: int = Field(default=256, ge=32)
    image_width: int = Field(default=256, ge=32)
    min_words: int = Field(default=1, ge=1)
    max_words: int = Field(default=8, ge=1)
    alphabet: str = Field(default="abcdefghijklmnopqrstuvwxyz")
    min_word_length: int = Field(default=3, ge=1)
    max_word_length: int = Field(default=8, ge=1)
    min_font_size: int = Field(default=18, ge=6)
    max_font_size: int = Field(default=36, ge=6)
    max_rotation: float = Field(default=60.0, ge=0.0, le=90.0, description="Degrees")
    curved: bool = Field(default=True)
    curve_probability: float = Field(default=0.3, ge=0.0, le=1.0)
    max_retries: int = Field(default=50, ge=1)

    @model_validator(mode='after')
    def validate_ranges(self):
        if self.min_words > self.max_words:
            raise ValueError("min_words cannot exceed max_words")
        if self.min_word_length > self.max_word_length:
            raise ValueError("min_word_length cannot exceed max_word_length")
        if self.min_font_size > self.max_font_size:
            raise ValueError("min_font_size cannot exceed max_font_size")
        return self

    model_config = ConfigDict(extra="forbid")


class DataConfig(BaseModel):
    train_path: Optional[str] = Field(default=None, description="Dataset JSON; synthetic when unset")
    eval_path: Optional[str] = Field(default=None)
    data_root: Optional[str] = Field(default=None, description="Root for relative dataset paths")
    num_train_images: int = Field(default=1000, ge=1, description="Synthetic training images")
    num_eval_images: int = Field(default=100, ge=0)
    synth: SynthProfile = Field(default_factory=SynthProfile)
    num_workers: int = Field(default=0, ge=0)
    augment: bool = Field(default=True)
    scale_range: Tuple[float, float] = Field(default=(0.8, 1.2))
    max_rotation: float = Field(default=10.0, ge=0.0, description="Augmentation rotation, degrees")
    crop_probability: float = Field(default=0.5, ge=0.0, le=1.0)
    color_jitter: float = Field(default=0.2, ge=0.0, le=1.0)

    model_config = ConfigDict(extra="forbid")


class EvalConfig(BaseModel):
    score_threshold: float = Field(default=0.4, ge=0.0)
    mask_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    iou_threshold: float = Field(default=0.5, gt=0.0, le=1.0)
    lexicon_path: Optional[str] = Field(default=None, description="Word list for the Full lexicon mode")
    ned_penalize_unmatched_preds: bool = Field(default=True)
    polygon_nms: bool = Field(default=False)
    nms_iou: float = Field(default=0.5, gt=0.0, le=1.0)
    parallel: bool = Field(default=True, description="Score images concurrently")

    model_config = ConfigDict(extra="forbid")


# Toy-profile values for the sections whose class defaults are full scale.
TOY_DETECTOR = dict(
    num_proposals=20, hidden_dim=64, num_stages=3, dynamic_dim=16, num_heads=2, dim_feedforward=256
)
TOY_OPTIMIZER = dict(
    lr=1e-4, schedule="cosine", milestones=[], max_iter=20000, batch_size=2,
    checkpoint_period=2000, log_period=50
)
TOY_DATA = dict(
    num_train_images=20,
    num_eval_images=20,
    synth=dict(
        image_height=128, image_width=128, min_words=1, max_words=3, alphabet="abc",
        min_word_length=3, max_word_length=3, min_font_size=20, max_font_size=28,
        max_rotation=30.0, curved=False,
    ),
)


class RunConfig(BaseModel):
    """Main configuration for a textspot run."""

    profile: Literal["toy", "full", "custom"] = Field(default="toy")
    seed: int = Field(default=0, ge=0)
    device: str = Field(default="cpu")
    output_dir: str = Field(default="runs")

    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    detector: DetectorConfig = Field(default_factory=lambda: DetectorConfig(**TOY_DETECTOR))
    mask_codec: MaskCodecConfig = Field(default_factory=MaskCodecConfig)
    rc: RCConfig = Field(default_factory=RCConfig)
    recognizer: RecognizerConfig = Field(default_factory=RecognizerConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(**TOY_OPTIMIZER))
    data: DataConfig = Field(default_factory=lambda: DataConfig(**TOY_DATA))
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode='after')
    def validate_widths(self):
        if self.backbone.d_model != self.detector.hidden_dim:
            raise ValueError(
                f"backbone.d_model ({self.backbone.d_model}) must equal "
                f"detector.hidden_dim ({self.detector.hidden_dim})"
            )
        if self.mask_codec.resolution != self.recognizer.roi_size:
            raise ValueError("mask_codec.resolution must equal recognizer.roi_size")
        if self.recognizer.roi_size // 4 != self.detector.pooler_resolution:
            raise ValueError("recognizer.roi_size must be four times detector.pooler_resolution")
        d = self.backbone.d_model
        if d % 4 != 0:
            raise ValueError("backbone.d_model must be divisible by 4 for 2-D positional encodings")
        for key, heads in (("rc.encoder_heads", self.rc.encoder_heads),
                           ("recognizer.tlsam_heads", self.recognizer.tlsam_heads)):
            if d % heads != 0:
                raise ValueError(f"backbone.d_model ({d}) is not divisible by {key} ({heads})")
        return self

    model_config = ConfigDict(extra="forbid")
