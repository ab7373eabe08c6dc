"""
Cross-decoding between domains: a profile embedding through the frontal
decoder ("frontalize") and the reverse ("profilize"), the pixel-space
identity proxies, and PNG grids of input/output pairs.
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image

from . import describe_version
from .checkpoint import Checkpoint
from .config import config_from_dict
from .console import get_logger
from .datamodel import DatasetManifest, Domain, ImageSample, to_uint8
from .errors import ConfigError, DataError, ShapeMismatchError
from .networks import UNetGenerator, build_generator

logger = get_logger(__name__)

ImageLike = Union[torch.Tensor, np.ndarray, ImageSample]


def as_batch(image: ImageLike) -> torch.Tensor:
    """N x C x H x W float tensor from a sample, an HWC array or a CHW/NCHW tensor"""
    if isinstance(image, ImageSample):
        return image.to_tensor().unsqueeze(0)
    if isinstance(image, np.ndarray):
        if image.ndim != 3:
            raise ShapeMismatchError(f"expected an H x W x C array, got shape {image.shape}")
        return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().unsqueeze(0)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return image.float()


class CrossDecoder:
    """Both generators of a trained coupled cGAN, used for cross-domain decoding"""

    def __init__(self, g_pr: UNetGenerator, g_fr: UNetGenerator, zero_skips: bool = False):
        self.g_pr = g_pr.eval()
        self.g_fr = g_fr.eval()
        self.zero_skips = zero_skips

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, zero_skips: Optional[bool] = None) -> "CrossDecoder":
        if checkpoint.model != "cpgan":
            raise ConfigError(f"cross-decoding needs a cpgan checkpoint, got {checkpoint.model}",
                              field="checkpoint")
        model_cfg = config_from_dict(checkpoint.config).model
        g_pr = checkpoint.load_into("g_pr", build_generator(model_cfg, 0))
        g_fr = checkpoint.load_into("g_fr", build_generator(model_cfg, 0))
        if zero_skips is None:
            zero_skips = model_cfg.zero_skips
        return cls(g_pr, g_fr, zero_skips)

    def _cross(self, source: UNetGenerator, target: UNetGenerator, images: ImageLike) -> torch.Tensor:
        with torch.no_grad():
            return target.decode(source.encode(as_batch(images)), zero_skips=self.zero_skips)

    def frontalize(self, profiles: ImageLike) -> torch.Tensor:
        return self._cross(self.g_pr, self.g_fr, profiles)

    def profilize(self, frontals: ImageLike) -> torch.Tensor:
        return self._cross(self.g_fr, self.g_pr, frontals)

    def reconstruct(self, images: ImageLike, domain: Domain) -> torch.Tensor:
        """Same-domain path through one generator"""
        generator = self.g_pr if domain is Domain.PROFILE else self.g_fr
        return self._cross(generator, generator, images)


def frontalize(checkpoint: Checkpoint, profile_image: ImageLike, zero_skips: bool = False) -> torch.Tensor:
    return CrossDecoder.from_checkpoint(checkpoint, zero_skips).frontalize(profile_image)


def profilize(checkpoint: Checkpoint, frontal_image: ImageLike, zero_skips: bool = False) -> torch.Tensor:
    return CrossDecoder.from_checkpoint(checkpoint, zero_skips).profilize(frontal_image)


# ==========================================
#  IDENTITY PROXIES
# ==========================================

def _per_pair_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """len(a) x len(b) matrix of per-image mean squared errors"""
    flat_a, flat_b = a.flatten(1).double(), b.flatten(1).double()
    return torch.cdist(flat_a, flat_b).pow(2) / flat_a.shape[1]


def _by_identity(manifest: DatasetManifest, folds: Sequence[int], domain: Domain) -> Dict[int, torch.Tensor]:
    grouped: Dict[int, list] = {}
    for entry in manifest.select(folds, domain):
        grouped.setdefault(entry.identity, []).append(entry)
    return {identity: manifest.tensor(entries) for identity, entries in sorted(grouped.items())}


def identity_preservation(decoder: CrossDecoder, manifest: DatasetManifest,
                          folds: Sequence[int]) -> Dict:
    """Share of identities whose frontalized profiles are pixel-nearest to their own true frontals"""
    profiles = _by_identity(manifest, folds, Domain.PROFILE)
    frontals = _by_identity(manifest, folds, Domain.FRONTAL)
    identities = sorted(set(profiles) & set(frontals))
    if len(identities) < 2:
        raise DataError("identity preservation needs at least 2 identities")

    synthesized = {i: decoder.frontalize(profiles[i]) for i in identities}
    distance = np.zeros((len(identities), len(identities)))
    for row, i in enumerate(identities):
        for col, j in enumerate(identities):
            distance[row, col] = float(_per_pair_mse(synthesized[i], frontals[j]).mean())
    nearest = distance.argmin(axis=1)
    hits = [int(nearest[row] == row) for row in range(len(identities))]
    return {
        "success_rate": float(np.mean(hits)),
        "chance": 1.0 / len(identities),
        "identities": identities,
        "nearest": [identities[k] for k in nearest],
        "distance": distance.tolist(),
    }


def warp_consistency(decoder: CrossDecoder, manifest: DatasetManifest, folds: Sequence[int]) -> Dict:
    """Share of identities whose profilized frontals sit closer to the true profiles than frontalized profiles do"""
    profiles = _by_identity(manifest, folds, Domain.PROFILE)
    frontals = _by_identity(manifest, folds, Domain.FRONTAL)
    identities = sorted(set(profiles) & set(frontals))
    if not identities:
        raise DataError("warp consistency needs at least 1 identity")
    rows = []
    for i in identities:
        via_profile = float(_per_pair_mse(decoder.profilize(frontals[i]), profiles[i]).mean())
        via_frontal = float(_per_pair_mse(decoder.frontalize(profiles[i]), profiles[i]).mean())
        rows.append({"identity": i, "profilize_mse": via_profile, "frontalize_mse": via_frontal,
                     "consistent": via_profile < via_frontal})
    return {
        "success_rate": float(np.mean([r["consistent"] for r in rows])),
        "per_identity": rows,
    }


def write_proxy_report(path: Path, decoder: CrossDecoder, manifest: DatasetManifest,
                       folds: Sequence[int], config: Optional[Dict] = None) -> Dict:
    report = {
        "folds": list(folds),
        "zero_skips": decoder.zero_skips,
        "identity_preservation": identity_preservation(decoder, manifest, folds),
        "warp_consistency": warp_consistency(decoder, manifest, folds),
        "config": config or {},
        "version": describe_version(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2), encoding="utf-8")
    return report


# ==========================================
#  GRIDS
# ==========================================

def _to_hwc(image: ImageLike) -> np.ndarray:
    if isinstance(image, ImageSample):
        return image.pixels
    if isinstance(image, torch.Tensor):
        tensor = image.detach().cpu()
        if tensor.dim() == 4 and tensor.shape[0] == 1:
            tensor = tensor[0]
        if tensor.dim() != 3:
            raise ShapeMismatchError(f"grid cells must be single images, got {tuple(tensor.shape)}")
        return tensor.permute(1, 2, 0).numpy()
    return np.asarray(image)


def emit_grid(images: List[ImageLike], columns: int, path: Path,
              metadata: Optional[Dict] = None) -> Path:
    """Tile images row-major into a PNG; [-1, 1] maps to [0, 255] with clamping.

    With input/output pairs listed consecutively and an even column count,
    odd columns (1st, 3rd, ...) hold inputs and even columns their outputs.
    A JSON sidecar next to the PNG records `metadata` and the version.
    """
    if not images:
        raise DataError("emit_grid needs at least one image")
    if columns < 1:
        raise ConfigError("must be >= 1", field="columns")
    cells = [to_uint8(_to_hwc(img)) for img in images]
    h, w, c = cells[0].shape
    if any(cell.shape != (h, w, c) for cell in cells):
        raise ShapeMismatchError("grid images must share one shape")
    rows = -(-len(cells) // columns)
    canvas = np.zeros((rows * h, columns * w, c), dtype=np.uint8)
    for k, cell in enumerate(cells):
        r, col = divmod(k, columns)
        canvas[r * h:(r + 1) * h, col * w:(col + 1) * w] = cell

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(canvas.squeeze(-1) if c == 1 else canvas).save(path, format="PNG")
        sidecar = {"rows": rows, "columns": columns, "cells": len(cells),
                   "version": describe_version(), **(metadata or {})}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write grid {path}: {e}") from e
    logger.info("Wrote %dx%d grid to %s", rows, columns, path)
    return path


def pair_grid(inputs: torch.Tensor, outputs: torch.Tensor) -> List[torch.Tensor]:
    """Interleave inputs and outputs: in_0, out_0, in_1, out_1, ..."""
    if inputs.shape != outputs.shape:
        raise ShapeMismatchError("inputs and outputs must have the same shape")
    cells: List[torch.Tensor] = []
    for x, y in zip(inputs, outputs):
        cells.extend([x, y])
    return cells
