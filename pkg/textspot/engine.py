"""
Training, evaluation and inference loops for textspot.

Single-process and seeded end to end: with ``data.num_workers == 0`` two runs of
the same config produce the same checkpoints and metrics.
"""

import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from .config import config_manager
from .dataset import (
    Augmenter,
    RecordDataset,
    SpottingDataset,
    SyntheticDataset,
    collate_batch,
    pad_images,
    read_image,
)
from .errors import DatasetValidationError, MaskCodecError, NumericalFaultError, TextSpotError
from .mask_codec import PcaBasis, fit_basis
from .metrics import SpottingEvaluator, dataset_lexicon, load_lexicon
from .models import ImagePredictions, MetricsReport, PredictionsFile, RunConfig, SpottingResult, TextInstance
from .recognizer import Charset
from .results import RunManager, load_model, save_metrics_report
from .spotter import TextSpotter

_logger = logging.getLogger(__name__)

# Basis fitting draws augmented views until it has this many masks per component.
BASIS_MASKS_PER_COMPONENT = 8
BASIS_MAX_PASSES = 50


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def build_dataset(
    config: RunConfig,
    split: str,
    augment: bool = False,
    path: Optional[Union[str, Path]] = None,
) -> SpottingDataset:
    """
    The ``train`` or ``eval`` split: a dataset JSON when one is configured, otherwise synthetic.

    Synthetic eval images use seeds disjoint from the training images.
    """
    charset = Charset(config.recognizer.charset)
    kwargs = dict(
        charset=charset,
        resolution=config.mask_codec.resolution,
        max_length=config.recognizer.max_length,
        augmenter=Augmenter(config.data) if augment else None,
        seed=config.seed,
    )
    path = path or (config.data.train_path if split == "train" else config.data.eval_path)
    if path:
        return RecordDataset.from_file(path, config_manager.data_root(config), **kwargs)

    base_seed = config.seed * 1_000_003
    if split == "train":
        return SyntheticDataset(config.data.synth, config.data.num_train_images, base_seed, **kwargs)
    return SyntheticDataset(
        config.data.synth, config.data.num_eval_images, base_seed + config.data.num_train_images, **kwargs
    )


def fit_mask_basis(dataset: SpottingDataset, config: RunConfig) -> PcaBasis:
    """Fit the PCA basis on ground-truth masks, adding augmented views for small splits."""
    n_pca = config.mask_codec.n_pca
    cap = config.mask_codec.max_fit_masks
    masks = list(dataset.iter_masks(limit=cap))
    wanted = min(cap, BASIS_MASKS_PER_COMPONENT * n_pca)
    if masks and len(masks) < wanted:
        masks = list(dataset.iter_masks(limit=wanted, passes=BASIS_MAX_PASSES, augmenter=Augmenter(config.data)))
    if not masks:
        raise MaskCodecError("no ground-truth masks to fit the mask basis", n_pca=n_pca, num_masks=0)
    return fit_basis(np.stack(masks), n_pca)


def build_optimizer(model: TextSpotter, config: RunConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=config.optimizer.lr, weight_decay=config.optimizer.weight_decay)


def build_scheduler(optimizer: torch.optim.Optimizer, config: RunConfig):
    opt = config.optimizer
    if opt.schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=opt.max_iter)
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=opt.milestones, gamma=opt.gamma)


def _make_loader(dataset: SpottingDataset, batch_size: int, shuffle: bool, seed: int, num_workers: int = 0):
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        num_workers=num_workers,
        collate_fn=collate_batch,
        generator=generator,
    )


@dataclass
class TrainResult:
    run_dir: Path
    checkpoint: Path
    report: Optional[MetricsReport]
    iterations: int


class Trainer:
    """Optimizes the summed stage detection losses plus the recognition loss."""

    def __init__(self, config: RunConfig, run: Optional[RunManager] = None, progress: bool = True):
        self.config = config
        self.run = run or RunManager.new_run(config.output_dir)
        self.progress = progress
        self.device = resolve_device(config.device)
        self.last_checkpoint: Optional[Path] = None

    def _fault(self, error: NumericalFaultError, iteration: int) -> NumericalFaultError:
        last = str(self.last_checkpoint) if self.last_checkpoint else None
        return NumericalFaultError(
            str(error.args[0]) if error.args else "non-finite values",
            stage=error.stage,
            proposal=error.proposal,
            iteration=iteration,
            last_checkpoint=last,
        )

    def _log_step(self, iteration: int, breakdown: Dict[str, torch.Tensor], lr: float) -> None:
        record = {
            "iteration": iteration,
            "losses": {k: float(v) for k, v in sorted(breakdown.items())},
            "lr": lr,
        }
        _logger.info("train step", extra=record)
        self.run.append_log(record)

    def train(self) -> TrainResult:
        config = self.config
        seed_everything(config.seed)
        self.run.save_config(config)

        train_set = build_dataset(config, "train", augment=config.data.augment)
        if len(train_set) == 0:
            raise DatasetValidationError("training split is empty", file_path=config.data.train_path)
        model = TextSpotter(config)
        model.codec.load_basis(fit_mask_basis(train_set, config))
        model.to(self.device)

        optimizer = build_optimizer(model, config)
        scheduler = build_scheduler(optimizer, config)
        opt = config.optimizer
        loader = _make_loader(train_set, opt.batch_size, True, config.seed, config.data.num_workers)

        _logger.info("starting training", extra={"run_dir": str(self.run.run_dir), "max_iter": opt.max_iter})
        iteration, epoch = 0, 0
        bar = tqdm(total=opt.max_iter, disable=not self.progress, desc="train")
        while iteration < opt.max_iter:
            train_set.set_epoch(epoch)
            for batch in loader:
                if iteration >= opt.max_iter:
                    break
                batch = batch.to(self.device)
                model.train()
                try:
                    total, breakdown = model.compute_losses(batch.images, batch.image_sizes, batch.targets)
                except NumericalFaultError as e:
                    raise self._fault(e, iteration)
                if not torch.isfinite(total):
                    raise NumericalFaultError(
                        "loss is not finite",
                        iteration=iteration,
                        last_checkpoint=str(self.last_checkpoint) if self.last_checkpoint else None,
                    )

                optimizer.zero_grad(set_to_none=True)
                total.backward()
                if opt.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
                optimizer.step()
                scheduler.step()
                iteration += 1
                bar.update(1)

                if iteration % opt.log_period == 0 or iteration == 1:
                    self._log_step(iteration, breakdown, optimizer.param_groups[0]["lr"])
                if iteration % opt.checkpoint_period == 0:
                    self.last_checkpoint = self.run.save_checkpoint(model, iteration, optimizer)
            epoch += 1
        bar.close()

        self.last_checkpoint = self.run.save_checkpoint(model, iteration, optimizer)
        report = None
        eval_set = build_dataset(config, "eval")
        if len(eval_set) > 0:
            report = evaluate_model(model, eval_set, config, checkpoint=str(self.last_checkpoint))
            self.run.save_metrics(report)
        return TrainResult(run_dir=self.run.run_dir, checkpoint=self.last_checkpoint, report=report,
                           iterations=iteration)


def train(config: RunConfig, run: Optional[RunManager] = None, progress: bool = True) -> TrainResult:
    return Trainer(config, run, progress).train()


@torch.no_grad()
def predict_dataset(
    model: TextSpotter,
    dataset: SpottingDataset,
    batch_size: int = 2,
    score_threshold: Optional[float] = None,
    use_polygon_nms: Optional[bool] = None,
) -> Tuple[List[List[SpottingResult]], List[List[TextInstance]]]:
    """Predictions and ground-truth instances for every image of a split, in order."""
    model.eval()
    device = next(model.parameters()).device
    pred_lists: List[List[SpottingResult]] = []
    gt_lists: List[List[TextInstance]] = []
    loader = _make_loader(dataset, batch_size, False, 0)
    for batch in loader:
        results = model.predict(
            batch.images.to(device),
            batch.image_sizes.to(device),
            score_threshold=score_threshold,
            use_polygon_nms=use_polygon_nms,
        )
        pred_lists.extend(results)
        gt_lists.extend(batch.instances)
    return pred_lists, gt_lists


@torch.no_grad()
def mean_stage_giou(model: TextSpotter, dataset: SpottingDataset, batch_size: int = 2) -> List[float]:
    """Mean matched gIoU per stage, averaged over batches with at least one match."""
    model.eval()
    device = next(model.parameters()).device
    sums = [0.0] * model.config.detector.num_stages
    counts = [0] * model.config.detector.num_stages
    for batch in _make_loader(dataset, batch_size, False, 0):
        if not any(t.care_targets().num_instances for t in batch.targets):
            continue
        batch = batch.to(device)
        for k, value in enumerate(model.stage_matched_giou(batch.images, batch.image_sizes, batch.targets)):
            sums[k] += value
            counts[k] += 1
    return [s / c if c else 0.0 for s, c in zip(sums, counts)]


def evaluate_model(
    model: TextSpotter,
    dataset: SpottingDataset,
    config: RunConfig,
    checkpoint: Optional[str] = None,
    dataset_path: Optional[str] = None,
    score_threshold: Optional[float] = None,
    use_polygon_nms: Optional[bool] = None,
) -> MetricsReport:
    pred_lists, gt_lists = predict_dataset(
        model, dataset, config.optimizer.batch_size, score_threshold, use_polygon_nms
    )
    if config.eval.lexicon_path:
        lexicon: Optional[List[str]] = load_lexicon(config.eval.lexicon_path)
    else:
        lexicon = dataset_lexicon(gt_lists) or None
    evaluator = SpottingEvaluator(config.eval, lexicon)
    report = evaluator.evaluate(
        pred_lists,
        gt_lists,
        stage_giou=mean_stage_giou(model, dataset, config.optimizer.batch_size) if len(dataset) else [],
        dataset_path=dataset_path,
        checkpoint=checkpoint,
    )
    return report


def evaluate(
    checkpoint: Union[str, Path],
    dataset_path: Optional[Union[str, Path]] = None,
    device: str = "cpu",
    score_threshold: Optional[float] = None,
    use_polygon_nms: Optional[bool] = None,
    lexicon_path: Optional[str] = None,
    out_path: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
) -> MetricsReport:
    """
    Evaluate a checkpoint on a dataset JSON, or on its config's eval split when no path is given.

    Args:
        checkpoint: Path to a checkpoint written by training
        dataset_path: Dataset JSON to score
        device: Torch device name
        score_threshold: Overrides ``eval.score_threshold``
        use_polygon_nms: Overrides ``eval.polygon_nms``
        lexicon_path: Word list for the Full lexicon mode
        out_path: Where to write ``metrics.json`` (text and HTML reports land next to it)
        seed: Seeds the global RNGs; the checkpoint config seed when omitted

    Returns:
        The metrics report
    """
    model, _ = load_model(checkpoint, resolve_device(device))
    config = model.config
    seed_everything(config.seed if seed is None else seed)
    if lexicon_path:
        config = config.model_copy(update={"eval": config.eval.model_copy(update={"lexicon_path": lexicon_path})})
    dataset = build_dataset(config, "eval", path=dataset_path)
    report = evaluate_model(
        model, dataset, config,
        checkpoint=str(checkpoint),
        dataset_path=str(dataset_path) if dataset_path else None,
        score_threshold=score_threshold,
        use_polygon_nms=use_polygon_nms,
    )
    if out_path is not None:
        save_metrics_report(report, out_path)
    return report


@torch.no_grad()
def infer(
    checkpoint: Union[str, Path],
    image_paths: Sequence[Union[str, Path]],
    device: str = "cpu",
    with_attention: bool = False,
    score_threshold: Optional[float] = None,
    use_polygon_nms: Optional[bool] = None,
    seed: Optional[int] = None,
) -> PredictionsFile:
    """Spot text in each image; unreadable images get an error entry and the batch continues."""
    model, _ = load_model(checkpoint, resolve_device(device))
    seed_everything(model.config.seed if seed is None else seed)
    device_t = next(model.parameters()).device
    images: List[ImagePredictions] = []
    for path in image_paths:
        try:
            array = read_image(path)
        except TextSpotError as e:
            _logger.warning("skipping unreadable image", extra={"image": str(path), "error": str(e)})
            images.append(ImagePredictions(image=str(path), error=str(e)))
            continue
        tensor = torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1).float() / 255.0
        batch, sizes = pad_images([tensor])
        results = model.predict(
            batch.to(device_t), sizes.to(device_t),
            score_threshold=score_threshold,
            with_attention=with_attention,
            use_polygon_nms=use_polygon_nms,
        )[0]
        images.append(ImagePredictions(image=str(path), results=results))
    return PredictionsFile(images=images, checkpoint=str(checkpoint))

