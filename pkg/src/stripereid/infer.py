"""Deterministic feature extraction and response-map rendering.

Test-time features average the embeddings of each image and its horizontal
mirror, then concatenate all reduced features in a fixed order (global
feature first within each branch, then its stripes, branches in config
order). That order is part of the persisted format: a feature file is a
flat little-endian float32 binary plus a JSON sidecar naming the layout,
the model config hash, and per-row identity/camera metadata.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .configs import DataConfig
from .data import BatchLoader, ImageRecord, hflip
from .errors import DataError
from .model import MultiBranchNet, feature_layout

log = logging.getLogger(__name__)


@dataclass
class FeatureMatrix:
    features: np.ndarray          # [M, D] float32
    feature_names: list[str]      # concatenation order
    config_hash: str
    paths: list[str]
    identities: np.ndarray        # [M]
    cameras: np.ndarray           # [M]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def save(self, prefix: str | Path) -> tuple[Path, Path]:
        prefix = _strip_feat_suffix(prefix)
        bin_path = Path(str(prefix) + ".feat.bin")
        json_path = Path(str(prefix) + ".feat.json")
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        self.features.astype("<f4").tofile(bin_path)
        sidecar = {
            "count": int(self.features.shape[0]),
            "dim": int(self.features.shape[1]),
            "dtype": "<f4",
            "feature_names": self.feature_names,
            "config_hash": self.config_hash,
            "records": [
                {"path": p, "identity": int(i), "camera": int(c)}
                for p, i, c in zip(self.paths, self.identities, self.cameras)
            ],
        }
        json_path.write_text(json.dumps(sidecar, indent=1))
        return bin_path, json_path

    @classmethod
    def load(cls, prefix: str | Path) -> "FeatureMatrix":
        prefix = _strip_feat_suffix(prefix)
        bin_path = Path(str(prefix) + ".feat.bin")
        json_path = Path(str(prefix) + ".feat.json")
        if not bin_path.is_file() or not json_path.is_file():
            raise DataError(f"feature file pair not found: {prefix}.feat.bin/.feat.json")
        sidecar = json.loads(json_path.read_text())
        raw = np.fromfile(bin_path, dtype=sidecar["dtype"])
        count, dim = sidecar["count"], sidecar["dim"]
        if raw.size != count * dim:
            raise DataError(
                f"feature binary {bin_path} holds {raw.size} values, "
                f"sidecar promises {count}x{dim}")
        recs = sidecar["records"]
        return cls(
            features=raw.reshape(count, dim),
            feature_names=sidecar["feature_names"],
            config_hash=sidecar["config_hash"],
            paths=[r["path"] for r in recs],
            identities=np.asarray([r["identity"] for r in recs], dtype=np.int64),
            cameras=np.asarray([r["camera"] for r in recs], dtype=np.int64),
        )


def _strip_feat_suffix(prefix: str | Path) -> str:
    s = str(prefix)
    for suffix in (".feat.bin", ".feat.json", ".feat"):
        if s.endswith(suffix):
            return s[: -len(suffix)]
    return s


def extract(model: MultiBranchNet, records: list[ImageRecord],
            data_config: DataConfig | None = None,
            batch_size: int = 32) -> FeatureMatrix:
    """Flip-averaged concatenated features for a record list (row per record)."""
    data_config = data_config if data_config is not None else DataConfig()
    names, dim = feature_layout(model.config)
    loader = BatchLoader(records, data_config, image_size=model.config.input_size)
    rows = []
    for lo in range(0, len(records), batch_size):
        stacked = loader.load_stack(range(lo, min(lo + batch_size, len(records))))
        plain = model.forward(stacked, train=False).concat()
        mirrored = model.forward(hflip(stacked), train=False).concat()
        rows.append(((plain + mirrored) / 2.0).astype(np.float32))
    features = np.concatenate(rows, axis=0) if rows else np.zeros((0, dim), np.float32)
    return FeatureMatrix(
        features=features,
        feature_names=names,
        config_hash=model.config.config_hash(),
        paths=[r.image_path for r in records],
        identities=np.asarray([r.identity for r in records], dtype=np.int64),
        cameras=np.asarray([r.camera for r in records], dtype=np.int64),
    )


def response_map(model: MultiBranchNet, image: np.ndarray, branch: str) -> np.ndarray:
    """Spatial intensity grid for one image: per-location feature L2 norm.

    ``image`` is a normalized [3,H,W] tensor; the grid matches the branch's
    output map size and every value is the Euclidean norm of the channel
    vector at that location.
    """
    if branch not in model.branches:
        raise ValueError(
            f"unknown branch '{branch}'; valid branches: "
            f"{', '.join(model.branches)}")
    bundle = model.forward(image[None], train=False)
    fmap = bundle.branches[branch].feature_map[0]
    return np.sqrt((fmap.astype(np.float64) ** 2).sum(axis=0))


_COLORMAP_STOPS = np.array([
    [0.0, 0.0, 0.35],   # deep blue
    [0.0, 0.55, 0.95],  # azure
    [0.1, 0.85, 0.35],  # green
    [0.98, 0.9, 0.1],   # yellow
    [0.9, 0.1, 0.05],   # red
])


def _colorize(norm01: np.ndarray) -> np.ndarray:
    """Map [H,W] values in [0,1] through a blue->red ramp to [H,W,3] floats."""
    pos = np.clip(norm01, 0.0, 1.0) * (len(_COLORMAP_STOPS) - 1)
    k = np.minimum(pos.astype(int), len(_COLORMAP_STOPS) - 2)
    frac = (pos - k)[..., None]
    return _COLORMAP_STOPS[k] * (1 - frac) + _COLORMAP_STOPS[k + 1] * frac


def render_heatmap(image_rgb: np.ndarray, response: np.ndarray,
                   alpha: float = 0.55) -> Image.Image:
    """Overlay a response grid onto its source image (bilinear upsample)."""
    h, w = image_rgb.shape[:2]
    peak = response.max()
    norm = response / peak if peak > 0 else np.zeros_like(response)
    grid = Image.fromarray(norm.astype(np.float32), mode="F").resize(
        (w, h), Image.BILINEAR)
    colored = _colorize(np.asarray(grid))
    blended = (1 - alpha) * (image_rgb.astype(np.float64) / 255.0) + alpha * colored
    return Image.fromarray((np.clip(blended, 0, 1) * 255).round().astype(np.uint8))
