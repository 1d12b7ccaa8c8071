"""
Dataset loading and validation for textspot.

Handles dataset JSON parsing and validation, synthetic splits, training
augmentation and batching into padded tensors with per-image targets.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
import torchvision.transforms.functional as TF
from jsonschema import Draft7Validator
from PIL import Image
from torch.utils.data import Dataset

from .errors import DatasetValidationError
from .geometry import polygon_to_box, rasterize_polygon
from .models import DataConfig, DatasetRecord, SynthProfile, TextInstance
from .recognizer import Charset
from .synth import generate_synthetic_sample

_logger = logging.getLogger(__name__)

PAD_MULTIPLE = 32

DATASET_SCHEMA: Dict[str, Any] = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["image"],
        "additionalProperties": False,
        "properties": {
            "image": {"type": "string", "minLength": 1},
            "instances": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["polygon"],
                    "additionalProperties": False,
                    "properties": {
                        "polygon": {"type": "array", "items": {"type": "number"}, "minItems": 6},
                        "text": {"type": "string"},
                        "care": {"type": "boolean"},
                    },
                },
            },
        },
    },
}


class DatasetLoader:
    """Loads and validates dataset JSON files."""

    def __init__(self, file_path: Union[str, Path], data_root: Optional[Union[str, Path]] = None):
        self.file_path = Path(file_path)
        self.data_root = Path(data_root) if data_root else self.file_path.parent
        self._validate_file()

    def _validate_file(self) -> None:
        """Validate that the dataset file exists and is readable."""
        if not self.file_path.exists():
            raise DatasetValidationError(
                f"Dataset file not found: {self.file_path}",
                file_path=str(self.file_path)
            )

        if not self.file_path.is_file():
            raise DatasetValidationError(
                f"Dataset path is not a file: {self.file_path}",
                file_path=str(self.file_path)
            )

        if self.file_path.suffix != '.json':
            raise DatasetValidationError(
                f"Dataset file must have .json extension, got: {self.file_path.suffix}",
                file_path=str(self.file_path)
            )

    def load(self) -> List[DatasetRecord]:
        """
        Load and validate the complete dataset.

        Returns:
            List of validated DatasetRecord objects; an empty list is a valid dataset

        Raises:
            DatasetValidationError: If the file is not JSON or a record is malformed
        """
        try:
            with open(self.file_path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetValidationError(
                f"Invalid JSON in dataset file: {e}",
                file_path=str(self.file_path)
            )
        except PermissionError:
            raise DatasetValidationError(
                f"Permission denied reading dataset file: {self.file_path}",
                file_path=str(self.file_path)
            )

        if not isinstance(raw, list):
            raise DatasetValidationError(
                "Dataset must be a JSON array of records",
                file_path=str(self.file_path),
                field="$",
            )
        return [self._validate_record(index, item) for index, item in enumerate(raw)]

    def _validate_record(self, index: int, item: Any) -> DatasetRecord:
        validator = Draft7Validator(DATASET_SCHEMA["items"])
        errors = sorted(validator.iter_errors(item), key=lambda e: list(e.absolute_path))
        if errors:
            first = errors[0]
            location = ".".join(str(p) for p in first.absolute_path) or "$"
            raise DatasetValidationError(
                f"Record {index}: {location}: {first.message}",
                file_path=str(self.file_path),
                record_index=index,
                field=location,
                errors=[{"field": ".".join(str(p) for p in e.absolute_path), "message": e.message}
                        for e in errors],
            )

        try:
            return DatasetRecord(**item)
        except Exception as e:
            details = []
            if hasattr(e, 'errors'):
                for error in e.errors():
                    details.append({
                        "field": ".".join(str(x) for x in error.get("loc", [])),
                        "message": error.get("msg", ""),
                    })
            location = details[0]["field"] if details else None
            message = details[0]["message"] if details else str(e)
            raise DatasetValidationError(
                f"Record {index}: {location}: {message}",
                file_path=str(self.file_path),
                record_index=index,
                field=location,
                errors=details,
            )

    def resolve_image(self, record: DatasetRecord) -> Path:
        path = Path(record.image)
        return path if path.is_absolute() else self.data_root / path


def load_dataset(path: Union[str, Path], data_root: Optional[Union[str, Path]] = None) -> List[DatasetRecord]:
    return DatasetLoader(path, data_root).load()


def save_dataset(records: Sequence[DatasetRecord], path: Union[str, Path]) -> Path:
    """Write records as a dataset JSON array."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump([r.model_dump(mode="json") for r in records], f, indent=2)
    return path


def read_image(path: Union[str, Path]) -> np.ndarray:
    """RGB uint8 array; raises DatasetValidationError for unreadable files."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (OSError, ValueError) as e:
        raise DatasetValidationError(f"Cannot read image {path}: {e}", file_path=str(path))


def write_synthetic_dataset(
    out_dir: Union[str, Path], num_images: int, profile: SynthProfile, seed: int = 0
) -> Path:
    """Render ``num_images`` synthetic images as PNGs next to a ``dataset.json``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(num_images):
        image, instances = generate_synthetic_sample(seed + i, profile)
        name = f"images/{i:06d}.png"
        Image.fromarray(image).save(out_dir / name)
        records.append(DatasetRecord(image=name, instances=instances))
    path = save_dataset(records, out_dir / "dataset.json")
    _logger.info("wrote synthetic dataset", extra={"path": str(path), "num_images": num_images})
    return path


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


@dataclass
class ImageTargets:
    """Ground truth of one image in training-ready form."""

    boxes: torch.Tensor  # (n, 4) normalized cxcywh
    masks: torch.Tensor  # (n, R, R) in {0, 1}
    texts: torch.Tensor  # (n, T) symbol indices
    care: torch.Tensor  # (n,) bool
    polygons: List[np.ndarray] = field(default_factory=list)
    strings: List[str] = field(default_factory=list)
    image_size: Tuple[int, int] = (0, 0)

    @property
    def num_instances(self) -> int:
        return int(self.boxes.shape[0])

    def care_targets(self) -> "ImageTargets":
        keep = torch.nonzero(self.care, as_tuple=False).squeeze(1)
        kept = keep.tolist()
        return ImageTargets(
            boxes=self.boxes[keep],
            masks=self.masks[keep],
            texts=self.texts[keep],
            care=self.care[keep],
            polygons=[self.polygons[i] for i in kept],
            strings=[self.strings[i] for i in kept],
            image_size=self.image_size,
        )

    def to(self, device: Union[str, torch.device]) -> "ImageTargets":
        return ImageTargets(
            boxes=self.boxes.to(device),
            masks=self.masks.to(device),
            texts=self.texts.to(device),
            care=self.care.to(device),
            polygons=self.polygons,
            strings=self.strings,
            image_size=self.image_size,
        )


def build_targets(
    instances: Sequence[TextInstance],
    image_size: Tuple[int, int],
    charset: Charset,
    resolution: int,
    max_length: int,
) -> ImageTargets:
    """
    Boxes, box-relative masks and encoded transcriptions for one image.

    An instance whose polygon leaves an empty mask (for example after a crop
    left only a sliver inside the image) is demoted to do-not-care.
    """
    boxes, masks, texts, care, polygons, strings = [], [], [], [], [], []
    for inst in instances:
        points = inst.points
        box = polygon_to_box(points, image_size)
        mask = rasterize_polygon(points, box, image_size, resolution)
        boxes.append(box)
        masks.append(mask.grid.astype(np.float32))
        texts.append(charset.encode(inst.text, max_length))
        care.append(inst.care and mask.valid)
        polygons.append(points)
        strings.append(inst.text)

    if not boxes:
        return ImageTargets(
            boxes=torch.zeros((0, 4)),
            masks=torch.zeros((0, resolution, resolution)),
            texts=torch.zeros((0, max_length), dtype=torch.long),
            care=torch.zeros((0,), dtype=torch.bool),
            image_size=image_size,
        )
    return ImageTargets(
        boxes=torch.from_numpy(np.stack(boxes)),
        masks=torch.from_numpy(np.stack(masks)),
        texts=torch.stack(texts),
        care=torch.tensor(care, dtype=torch.bool),
        polygons=polygons,
        strings=strings,
        image_size=image_size,
    )


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _transform_instances(instances: Sequence[TextInstance], matrix: np.ndarray) -> List[TextInstance]:
    out = []
    for inst in instances:
        pts = np.hstack([inst.points, np.ones((len(inst.points), 1))]) @ matrix.T
        out.append(TextInstance(polygon=pts.reshape(-1).tolist(), text=inst.text, care=inst.care))
    return out


class Augmenter:
    """Random scaling, rotation, an instance-preserving crop and photometric jitter."""

    def __init__(self, config: DataConfig):
        self.config = config

    def scale(self, image: np.ndarray, instances, rng: np.random.Generator):
        lo, hi = self.config.scale_range
        factor = float(rng.uniform(lo, hi))
        h, w = image.shape[:2]
        new_w, new_h = max(PAD_MULTIPLE, int(round(w * factor))), max(PAD_MULTIPLE, int(round(h * factor)))
        resized = cv2.resize(image, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
        matrix = np.array([[new_w / w, 0.0, 0.0], [0.0, new_h / h, 0.0]])
        return resized, _transform_instances(instances, matrix)

    def rotate(self, image: np.ndarray, instances, rng: np.random.Generator):
        angle = float(rng.uniform(-self.config.max_rotation, self.config.max_rotation))
        h, w = image.shape[:2]
        M = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
        cos, sin = abs(M[0, 0]), abs(M[0, 1])
        new_w = int(math.ceil(h * sin + w * cos))
        new_h = int(math.ceil(h * cos + w * sin))
        M[0, 2] += new_w / 2.0 - w / 2.0
        M[1, 2] += new_h / 2.0 - h / 2.0
        rotated = cv2.warpAffine(image, M, (new_w, new_h), flags=cv2.INTER_LINEAR, borderValue=0)
        return rotated, _transform_instances(instances, M)

    def crop(self, image: np.ndarray, instances, rng: np.random.Generator):
        """Crop to a random window that still contains every instance."""
        h, w = image.shape[:2]
        if instances:
            pts = np.vstack([inst.points for inst in instances])
            x0, y0 = np.floor(pts.min(axis=0)).astype(int)
            x1, y1 = np.ceil(pts.max(axis=0)).astype(int)
            x0, y0 = max(0, x0), max(0, y0)
            x1, y1 = min(w, x1), min(h, y1)
        else:
            x0, y0, x1, y1 = w // 2, h // 2, w // 2, h // 2
        left = int(rng.integers(0, x0 + 1))
        top = int(rng.integers(0, y0 + 1))
        right = int(rng.integers(x1, w + 1))
        bottom = int(rng.integers(y1, h + 1))
        if right - left < PAD_MULTIPLE or bottom - top < PAD_MULTIPLE:
            return image, list(instances)
        matrix = np.array([[1.0, 0.0, -left], [0.0, 1.0, -top]])
        return image[top:bottom, left:right].copy(), _transform_instances(instances, matrix)

    def jitter(self, image: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        strength = self.config.color_jitter
        if strength <= 0:
            return image
        brightness, contrast, saturation = rng.uniform(1 - strength, 1 + strength, size=3)
        image = TF.adjust_brightness(image, float(brightness))
        image = TF.adjust_contrast(image, float(contrast))
        return TF.adjust_saturation(image, float(saturation))

    def __call__(self, image: np.ndarray, instances: Sequence[TextInstance], rng: np.random.Generator):
        image, instances = self.scale(image, instances, rng)
        if self.config.max_rotation > 0:
            image, instances = self.rotate(image, instances, rng)
        if rng.random() < self.config.crop_probability:
            image, instances = self.crop(image, instances, rng)
        return image, instances


# ---------------------------------------------------------------------------
# Datasets and batching
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    targets: ImageTargets
    name: str
    instances: List[TextInstance] = field(default_factory=list)


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, H, W), zero padded
    image_sizes: torch.Tensor  # (B, 2) (height, width)
    targets: List[ImageTargets]
    names: List[str]
    instances: List[List[TextInstance]]

    def to(self, device: Union[str, torch.device]) -> "Batch":
        return Batch(
            images=self.images.to(device),
            image_sizes=self.image_sizes.to(device),
            targets=[t.to(device) for t in self.targets],
            names=self.names,
            instances=self.instances,
        )


class SpottingDataset(Dataset):
    """Base dataset: raw samples from subclasses, optional augmentation, then targets."""

    def __init__(
        self,
        charset: Charset,
        resolution: int,
        max_length: int,
        augmenter: Optional[Augmenter] = None,
        seed: int = 0,
    ):
        self.charset = charset
        self.resolution = resolution
        self.max_length = max_length
        self.augmenter = augmenter
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def raw_sample(self, index: int) -> Tuple[np.ndarray, List[TextInstance], str]:
        raise NotImplementedError

    def __getitem__(self, index: int) -> Sample:
        image, instances, name = self.raw_sample(index)
        jitter_rng = None
        if self.augmenter is not None:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            image, instances = self.augmenter(image, instances, rng)
            jitter_rng = rng
        h, w = image.shape[:2]
        tensor = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float() / 255.0
        if jitter_rng is not None:
            tensor = self.augmenter.jitter(tensor, jitter_rng)
        targets = build_targets(instances, (h, w), self.charset, self.resolution, self.max_length)
        return Sample(image=tensor, targets=targets, name=name, instances=list(instances))

    def iter_masks(
        self, limit: Optional[int] = None, passes: int = 1, augmenter: Optional[Augmenter] = None
    ) -> Iterator[np.ndarray]:
        """
        Care ground-truth masks for fitting the mask basis.

        The first pass is unaugmented; further passes, when an augmenter is
        given, yield masks of randomly scaled, rotated and cropped views.
        """
        count = 0
        for p in range(passes):
            if p > 0 and augmenter is None:
                return
            for index in range(len(self)):
                image, instances, _ = self.raw_sample(index)
                if p > 0:
                    image, instances = augmenter(image, instances, np.random.default_rng([self.seed, p, index, 1]))
                targets = build_targets(instances, image.shape[:2], self.charset, self.resolution, self.max_length)
                for mask in targets.care_targets().masks.numpy():
                    if limit is not None and count >= limit:
                        return
                    count += 1
                    yield mask


class RecordDataset(SpottingDataset):
    """Images and annotations from a dataset JSON."""

    def __init__(self, loader: DatasetLoader, records: Sequence[DatasetRecord], **kwargs):
        super().__init__(**kwargs)
        self.loader = loader
        self.records = list(records)

    @classmethod
    def from_file(cls, path: Union[str, Path], data_root: Optional[str] = None, **kwargs) -> "RecordDataset":
        loader = DatasetLoader(path, data_root)
        return cls(loader, loader.load(), **kwargs)

    def __len__(self) -> int:
        return len(self.records)

    def raw_sample(self, index: int):
        record = self.records[index]
        image = read_image(self.loader.resolve_image(record))
        return image, list(record.instances), record.image


class SyntheticDataset(SpottingDataset):
    """A fixed set of synthetic images, one seed per index."""

    def __init__(self, profile: SynthProfile, num_images: int, base_seed: int, **kwargs):
        super().__init__(**kwargs)
        self.profile = profile
        self.num_images = num_images
        self.base_seed = base_seed
        self._cache: Dict[int, Tuple[np.ndarray, List[TextInstance]]] = {}

    def __len__(self) -> int:
        return self.num_images

    def raw_sample(self, index: int):
        if index not in self._cache:
            self._cache[index] = generate_synthetic_sample(self.base_seed + index, self.profile)
        image, instances = self._cache[index]
        return image, list(instances), f"synthetic/{self.base_seed + index:08d}"


def pad_images(images: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad ``(3, H, W)`` images to a common size that is a multiple of 32; returns images and sizes."""
    heights = [img.shape[1] for img in images]
    widths = [img.shape[2] for img in images]
    H = int(math.ceil(max(heights, default=PAD_MULTIPLE) / PAD_MULTIPLE) * PAD_MULTIPLE)
    W = int(math.ceil(max(widths, default=PAD_MULTIPLE) / PAD_MULTIPLE) * PAD_MULTIPLE)
    batch = torch.zeros((len(images), 3, H, W))
    for i, img in enumerate(images):
        batch[i, :, : heights[i], : widths[i]] = img
    sizes = torch.tensor(list(zip(heights, widths)), dtype=torch.long).reshape(-1, 2)
    return batch, sizes


def collate_batch(samples: Sequence[Sample]) -> Batch:
    images, sizes = pad_images([s.image for s in samples])
    return Batch(
        images=images,
        image_sizes=sizes,
        targets=[s.targets for s in samples],
        names=[s.name for s in samples],
        instances=[s.instances for s in samples],
    )
