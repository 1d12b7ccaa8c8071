"""
PCA mask codec: fixed-length codes for ``28x28`` instance masks.

The basis is fitted once from training ground-truth masks, frozen, and stored
with every checkpoint.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Union

import numpy as np
import torch
from torch import nn

from .errors import MaskCodecError, ShapeError

_logger = logging.getLogger(__name__)

BASIS_VERSION = 1


@dataclass
class PcaBasis:
    """Mean mask plus orthonormal principal components, both in flattened ``R^(S*S)``."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def n_pca(self) -> int:
        return int(self.components.shape[0])

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def explained_variance_ratio(self) -> float:
        return float(self.explained_variance.sum())

    def to_state(self) -> Dict[str, Any]:
        return {
            "version": BASIS_VERSION,
            "n_pca": self.n_pca,
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_state(cls, state: Dict[str, Any]) -> "PcaBasis":
        version = state.get("version")
        if version != BASIS_VERSION:
            raise MaskCodecError(f"Unsupported basis version: {version}")
        basis = cls(
            mean=np.asarray(state["mean"], dtype=np.float32),
            components=np.asarray(state["components"], dtype=np.float32),
            explained_variance=np.asarray(state["explained_variance"], dtype=np.float32),
        )
        if basis.n_pca != state.get("n_pca"):
            raise MaskCodecError("Stored n_pca does not match components", n_pca=state.get("n_pca"))
        return basis


def fit_basis(masks: Union[np.ndarray, Iterable[np.ndarray]], n_pca: int) -> PcaBasis:
    """
    Fit a PCA basis to binary masks.

    Args:
        masks: ``S x S`` arrays (or an ``(M, S, S)`` stack); values in {0, 1}
        n_pca: Number of components to keep

    Returns:
        PcaBasis whose components are the top ``n_pca`` right singular vectors
        of the centered mask matrix

    Raises:
        MaskCodecError: If fewer than ``n_pca`` masks are given
    """
    if isinstance(masks, np.ndarray):
        stack = masks.astype(np.float64)
    else:
        stack = np.asarray([np.asarray(m, dtype=np.float64) for m in masks])
    num_masks = int(stack.shape[0]) if stack.ndim == 3 else 0
    if num_masks < n_pca:
        raise MaskCodecError(
            "Need at least n_pca masks to fit the basis; use a smaller n_pca", n_pca=n_pca, num_masks=num_masks
        )

    flat = stack.reshape(num_masks, -1)
    if n_pca > flat.shape[1]:
        raise MaskCodecError("n_pca exceeds mask dimension", n_pca=n_pca, num_masks=num_masks)
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    variance = singular ** 2
    total = variance.sum()
    ratio = variance[:n_pca] / total if total > 0 else np.zeros(n_pca)

    _logger.info(
        "fitted mask basis",
        extra={"n_pca": n_pca, "num_masks": num_masks, "explained_variance": float(ratio.sum())},
    )
    return PcaBasis(
        mean=mean.astype(np.float32),
        components=vt[:n_pca].astype(np.float32),
        explained_variance=ratio.astype(np.float32),
    )


def encode(mask: torch.Tensor, mean: torch.Tensor, components: torch.Tensor) -> torch.Tensor:
    """``(..., S, S) -> (..., n_pca)``: ``components @ (flatten(mask) - mean)``."""
    flat = mask.reshape(*mask.shape[:-2], -1).to(components.dtype)
    if flat.shape[-1] != components.shape[1]:
        raise ShapeError("mask size does not match basis", component="mask_codec.encode",
                         expected=components.shape[1], actual=flat.shape[-1])
    return (flat - mean) @ components.T


def decode(
    code: torch.Tensor, mean: torch.Tensor, components: torch.Tensor, resolution: int, clamp: bool = True
) -> torch.Tensor:
    """``(..., n_pca) -> (..., S, S)``: ``mean + components^T @ code``, clipped to [0, 1] when ``clamp``."""
    if code.shape[-1] != components.shape[0]:
        raise ShapeError("code length does not match basis", component="mask_codec.decode",
                         expected=components.shape[0], actual=code.shape[-1])
    flat = code @ components + mean
    if clamp:
        flat = flat.clamp(0.0, 1.0)
    return flat.reshape(*code.shape[:-1], resolution, resolution)


class MaskCodec(nn.Module):
    """Frozen PCA basis held as buffers so it moves with the model and lands in its state dict."""

    def __init__(self, n_pca: int, resolution: int):
        super().__init__()
        self.n_pca = n_pca
        self.resolution = resolution
        dim = resolution * resolution
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("components", torch.zeros(n_pca, dim))
        self.register_buffer("explained_variance", torch.zeros(n_pca))
        self.register_buffer("fitted", torch.zeros((), dtype=torch.bool))

    def load_basis(self, basis: PcaBasis) -> None:
        if basis.n_pca != self.n_pca or basis.dim != self.resolution ** 2:
            raise MaskCodecError(
                f"Basis shape ({basis.n_pca}, {basis.dim}) does not match codec "
                f"({self.n_pca}, {self.resolution ** 2})",
                n_pca=basis.n_pca,
            )
        self.mean.copy_(torch.as_tensor(basis.mean, dtype=torch.float32))
        self.components.copy_(torch.as_tensor(basis.components, dtype=torch.float32))
        self.explained_variance.copy_(torch.as_tensor(basis.explained_variance, dtype=torch.float32))
        self.fitted.fill_(True)

    def basis(self) -> PcaBasis:
        return PcaBasis(
            mean=self.mean.detach().cpu().numpy(),
            components=self.components.detach().cpu().numpy(),
            explained_variance=self.explained_variance.detach().cpu().numpy(),
        )

    def encode(self, mask: torch.Tensor) -> torch.Tensor:
        return encode(mask, self.mean, self.components)

    def decode(self, code: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        return decode(code, self.mean, self.components, self.resolution, clamp=clamp)
