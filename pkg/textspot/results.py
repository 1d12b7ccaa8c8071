"""
Run directories, checkpoints and prediction files for textspot.

A run directory holds ``config.json``, ``train_log.jsonl``,
``checkpoints/ckpt_XXXXXXX.pt``, ``checkpoints/last.pt``, ``metrics.json``,
``report.txt`` and ``report.html``.
"""

import json
import logging
import shutil
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch
from pydantic import ValidationError as PydanticValidationError

from .errors import CheckpointError, MaskCodecError, TextSpotError, ValidationError
from .mask_codec import PcaBasis
from .models import MetricsReport, PredictionsFile, RunConfig
from .reporting import HTMLReporter, render_text_report
from .spotter import TextSpotter

_logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "textspot-checkpoint"
CHECKPOINT_VERSION = 1


def generate_run_id() -> str:
    return str(uuid.uuid4())


class RunManager:
    """Owns one run directory."""

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)
        self.checkpoint_dir = self.run_dir / "checkpoints"
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)

    @classmethod
    def new_run(cls, output_dir: Union[str, Path]) -> "RunManager":
        """Create ``{output_dir}/{date}_{run id prefix}``."""
        stamp = datetime.now().strftime("%Y-%m-%d_%H%M%S")
        return cls(Path(output_dir) / f"{stamp}_{generate_run_id()[:8]}")

    @property
    def log_path(self) -> Path:
        return self.run_dir / "train_log.jsonl"

    @property
    def last_checkpoint(self) -> Optional[Path]:
        path = self.checkpoint_dir / "last.pt"
        return path if path.exists() else None

    def save_config(self, config: RunConfig) -> Path:
        path = self.run_dir / "config.json"
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(config.model_dump(mode="json"), f, indent=2)
        return path

    def append_log(self, record: Dict[str, Any]) -> None:
        with open(self.log_path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, default=str) + '\n')

    def save_checkpoint(
        self,
        model: TextSpotter,
        iteration: int,
        optimizer: Optional[torch.optim.Optimizer] = None,
    ) -> Path:
        """Write ``ckpt_{iteration:07d}.pt`` and refresh ``last.pt``."""
        path = self.checkpoint_dir / f"ckpt_{iteration:07d}.pt"
        torch.save(checkpoint_payload(model, iteration, optimizer), path)
        shutil.copyfile(path, self.checkpoint_dir / "last.pt")
        _logger.info("saved checkpoint", extra={"path": str(path), "iteration": iteration})
        return path

    def save_metrics(self, report: MetricsReport) -> Path:
        """``metrics.json`` plus the text and HTML renderings."""
        path = self.run_dir / "metrics.json"
        save_metrics_report(report, path)
        return path


def checkpoint_payload(
    model: TextSpotter, iteration: int, optimizer: Optional[torch.optim.Optimizer] = None
) -> Dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.model_dump(mode="json"),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "iteration": iteration,
        "charset": model.charset.symbols,
        "pca_basis": model.codec.basis().to_state(),
    }


def read_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    """Load and check the container fields of a checkpoint file."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}", path=str(path))
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint: {e}", path=str(path))

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("Not a textspot checkpoint", path=str(path), expected=CHECKPOINT_FORMAT,
                              actual=payload.get("format") if isinstance(payload, dict) else type(payload))
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("Unsupported checkpoint version", path=str(path),
                              expected=CHECKPOINT_VERSION, actual=payload.get("version"))
    return payload


def restore_weights(model: TextSpotter, payload: Dict[str, Any], path: Optional[str] = None) -> None:
    """
    Load checkpoint weights into ``model`` after checking compatibility.

    Raises:
        CheckpointError: If the charset size or PCA basis differs from the model's heads
    """
    charset = payload.get("charset", "")
    if len(charset) != len(model.charset.symbols):
        raise CheckpointError("Checkpoint charset size does not match the recognizer head", path=path,
                              expected=len(model.charset.symbols), actual=len(charset))
    try:
        basis = PcaBasis.from_state(payload["pca_basis"])
    except (KeyError, MaskCodecError) as e:
        raise CheckpointError(f"Invalid PCA basis: {e}", path=path)
    if basis.n_pca != model.codec.n_pca:
        raise CheckpointError("Checkpoint basis n_pca does not match the mask head", path=path,
                              expected=model.codec.n_pca, actual=basis.n_pca)
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint weights do not fit the model: {e}", path=path)
    model.codec.load_basis(basis)


def load_model(
    path: Union[str, Path], device: Union[str, torch.device] = "cpu"
) -> Tuple[TextSpotter, Dict[str, Any]]:
    """Rebuild the model described by a checkpoint and load its weights."""
    payload = read_checkpoint(path)
    try:
        config = RunConfig(**payload["config"])
    except Exception as e:
        raise CheckpointError(f"Checkpoint config is invalid: {e}", path=str(path))
    model = TextSpotter(config)
    restore_weights(model, payload, str(path))
    model.to(device).eval()
    return model, payload


def save_metrics_report(report: MetricsReport, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(report.model_dump(mode="json"), f, indent=2)
    with open(path.with_name("report.txt"), 'w', encoding='utf-8') as f:
        f.write(render_text_report(report))
    try:
        HTMLReporter().save_report(report, path.with_name("report.html"))
    except Exception as e:
        # The JSON report is authoritative.
        _logger.warning("failed to generate HTML report", extra={"error": str(e)})


def save_predictions(predictions: PredictionsFile, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(predictions.model_dump(mode="json"), f, indent=2)
    return path


def load_predictions(path: Union[str, Path]) -> PredictionsFile:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return PredictionsFile(**json.load(f))
    except (OSError, json.JSONDecodeError) as e:
        raise TextSpotError(f"Cannot read predictions file {path}: {e}")
    except PydanticValidationError as e:
        raise ValidationError.from_pydantic(e, {"file_path": str(path)})
