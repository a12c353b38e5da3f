"""Dataset ingestion, synthetic data generation and PK-structured sampling.

Datasets follow the conventional re-id directory layout::

    root/
      bounding_box_train/   0002_c1s1_000451_03.jpg ...
      query/
      bounding_box_test/    (gallery; ids -1 and 0000 are junk)

Filenames encode ``<identity>_c<camera>...``. The synthetic generator emits
the same layout so the whole pipeline can be exercised at desk scale.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .configs import DataConfig, SamplerConfig
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

JUNK = -1  # sentinel identity for gallery entries excluded from evaluation

TRAIN_DIR = "bounding_box_train"
QUERY_DIR = "query"
GALLERY_DIR = "bounding_box_test"

_SPLIT_DIRS = {"train": TRAIN_DIR, "query": QUERY_DIR, "gallery": GALLERY_DIR}
_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)")
_IMG_EXTS = {".jpg", ".jpeg", ".png"}


@dataclass
class ImageRecord:
    image_path: str
    identity: int          # raw id, or JUNK
    camera: int
    split: str             # train | query | gallery


@dataclass
class DatasetMeta:
    num_identities: int                     # C over the training split
    identity_to_index: dict[int, int]       # dense relabeling of train ids
    counts: dict[str, int] = field(default_factory=dict)

    def train_label(self, identity: int) -> int:
        return self.identity_to_index[identity]


def parse_market_name(filename: str) -> tuple[int, int]:
    """Extract (identity, camera) from a Market-style filename."""
    m = _NAME_RE.match(filename)
    if not m:
        raise DataError(f"cannot parse identity/camera from filename: {filename!r}")
    return int(m.group(1)), int(m.group(2))


def load_market_layout(root_dir: str | Path) -> tuple[list[ImageRecord], DatasetMeta]:
    """Scan a Market-layout directory into records plus training metadata.

    Gallery entries with raw id -1 or 0 are marked JUNK; junk-named files in
    the training folder are skipped so junk can never enter training.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}")
    for split, sub in _SPLIT_DIRS.items():
        if not (root / sub).is_dir():
            raise ConfigError(f"dataset root {root} is missing the '{sub}' "
                              f"folder (expected Market-style layout)")

    records: list[ImageRecord] = []
    bad: list[str] = []
    counts = {"train": 0, "query": 0, "gallery": 0}
    train_ids: set[int] = set()

    for split, sub in _SPLIT_DIRS.items():
        for path in sorted((root / sub).iterdir()):
            if path.suffix.lower() not in _IMG_EXTS:
                continue
            try:
                raw_id, cam = parse_market_name(path.name)
            except DataError:
                bad.append(str(path))
                continue
            identity = raw_id
            if split == "gallery" and raw_id in (-1, 0):
                identity = JUNK
            if split == "train":
                if raw_id in (-1, 0):
                    log.warning("skipping junk-named file in training split: %s", path)
                    continue
                train_ids.add(raw_id)
            records.append(ImageRecord(str(path), identity, cam, split))
            counts[split] += 1

    if bad:
        raise DataError("unparsable filename(s): " + ", ".join(bad))

    identity_to_index = {pid: i for i, pid in enumerate(sorted(train_ids))}
    meta = DatasetMeta(num_identities=len(identity_to_index),
                       identity_to_index=identity_to_index, counts=counts)
    return records, meta


def split_records(records: list[ImageRecord], split: str) -> list[ImageRecord]:
    if split not in _SPLIT_DIRS:
        raise ConfigError(f"unknown split '{split}'; choose from {sorted(_SPLIT_DIRS)}")
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------------------
# Synthetic data


def _identity_signature(idx: int, rng: np.random.Generator):
    """Distinct per-identity appearance: base color, accent color, banding."""
    hue = (idx * 0.61803398875) % 1.0
    sat = 0.55 + 0.40 * rng.random()
    val = 0.55 + 0.35 * rng.random()
    accent_hue = (hue + 0.5) % 1.0
    period = int(rng.integers(10, 40))
    band_pos = rng.random()
    return hue, sat, val, accent_hue, period, band_pos


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


# mild per-camera color casts so cross-camera retrieval is not a pure
# pixel-matching exercise
_CAMERA_TINTS = {
    1: (1.00, 0.96, 0.90),
    2: (0.88, 1.00, 1.08),
    3: (1.05, 0.92, 1.00),
}


def _render_image(sig, h: int, w: int, cam: int,
                  rng: np.random.Generator) -> np.ndarray:
    hue, sat, val, accent_hue, period, band_pos = sig
    base = _hsv_to_rgb(hue, sat, val)
    accent = _hsv_to_rgb(accent_hue, sat, min(1.0, val + 0.2))
    img = np.tile(base, (h, w, 1))
    rows = np.arange(h)
    stripe = ((rows // period) % 2 == 0)
    img[stripe] = 0.65 * img[stripe] + 0.35 * accent
    # one solid block at an identity-specific height, translated per image
    bh = max(h // 8, 4)
    top = int(band_pos * (h - bh))
    img[top:top + bh] = accent
    dy = int(rng.integers(-h // 8, h // 8 + 1))
    dx = int(rng.integers(-w // 8, w // 8 + 1))
    img = np.roll(img, (dy, dx), axis=(0, 1))
    tint = _CAMERA_TINTS.get(cam, (1.0, 1.0, 1.0))
    img = img * np.asarray(tint) * (0.85 + 0.3 * rng.random())
    img = img + rng.normal(0.0, 0.10, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)


def generate_synthetic(root_dir: str | Path, num_ids: int, imgs_per_id: int,
                       image_size: tuple[int, int] = (384, 128), seed: int = 0,
                       query_per_id: int = 2, gallery_per_id: int = 4,
                       junk_images: int = 2) -> dict[str, int]:
    """Write a deterministic synthetic dataset in the Market layout.

    Each identity gets a distinct color/banding signature; individual images
    add noise and a random translation. Training images alternate between
    two cameras, queries are camera 1, gallery images alternate cameras 2/1
    (so the same-camera exclusion rule has something to exclude), and
    ``junk_images`` junk files (-1 and 0000 names) land in the gallery.

    Returns the per-split file counts.
    """
    if num_ids < 2:
        raise ConfigError("synthetic dataset needs num_ids >= 2")
    root = Path(root_dir)
    h, w = image_size
    for sub in _SPLIT_DIRS.values():
        (root / sub).mkdir(parents=True, exist_ok=True)

    sig_rng = np.random.default_rng(np.random.SeedSequence(seed))
    signatures = [_identity_signature(i, sig_rng) for i in range(num_ids)]
    counts = {"train": 0, "query": 0, "gallery": 0}
    frame = 0

    def write(split: str, identity_token: str, cam: int, sig) -> None:
        nonlocal frame
        frame += 1
        img_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                               spawn_key=(frame,)))
        arr = _render_image(sig, h, w, cam, img_rng)
        name = f"{identity_token}_c{cam}s1_{frame:06d}_00.jpg"
        Image.fromarray(arr).save(root / _SPLIT_DIRS[split] / name, quality=95)
        counts[split] += 1

    for i in range(num_ids):
        token = f"{i + 1:04d}"
        for j in range(imgs_per_id):
            write("train", token, 1 + j % 2, signatures[i])
        for j in range(query_per_id):
            write("query", token, 1, signatures[i])
        for j in range(gallery_per_id):
            write("gallery", token, 2 if j % 2 == 0 else 1, signatures[i])
    for j in range(junk_images):
        junk_sig = _identity_signature(num_ids + j, sig_rng)
        write("gallery", "-1" if j % 2 == 0 else "0000", 1 + j % 2, junk_sig)
    return counts


# ---------------------------------------------------------------------------
# Image loading and augmentation


def load_image(path: str, size: tuple[int, int] = (384, 128)) -> np.ndarray:
    """Decode and bilinearly resize to [H,W,3] uint8 RGB."""
    h, w = size
    with Image.open(path) as im:
        im = im.convert("RGB").resize((w, h), Image.BILINEAR)
        return np.asarray(im)


def normalize_image(img: np.ndarray, mean, std) -> np.ndarray:
    """uint8 [H,W,3] -> float32 [3,H,W] with per-channel standardization."""
    x = img.astype(np.float32) / 255.0
    x = (x - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def hflip(x: np.ndarray) -> np.ndarray:
    """Mirror left-right; works on [...,W] layouts ([H,W,3] needs axis 1)."""
    return np.ascontiguousarray(x[..., ::-1])


def augment_train(x: np.ndarray, rng: np.random.Generator,
                  flip_prob: float = 0.5) -> np.ndarray:
    """Random horizontal flip; the only train-time augmentation used."""
    if flip_prob > 0 and rng.random() < flip_prob:
        return hflip(x)
    return x


# ---------------------------------------------------------------------------
# PK-structured batches


@dataclass
class Batch:
    images: np.ndarray      # [N, 3, H, W] float32
    identities: np.ndarray  # [N] dense train labels in 0..C-1
    cameras: np.ndarray     # [N]
    record_indices: np.ndarray


class PKSampler:
    """Yields batches of P distinct identities with K records each.

    An epoch is ceil(C / P) batches; identities are drawn without
    replacement across an epoch, so every identity appears at least once
    before the permutation resets. A short final chunk is topped up with
    identities already used this epoch, keeping every batch at exactly
    P distinct identities. Identities holding fewer than K images are
    sampled with replacement.
    """

    def __init__(self, records: list[ImageRecord], meta: DatasetMeta,
                 config: SamplerConfig, rng: np.random.Generator | None = None):
        train = [(i, r) for i, r in enumerate(records) if r.split == "train"]
        if not train:
            raise ConfigError("training split is empty")
        if meta.num_identities < config.p:
            raise ConfigError(
                f"sampler asks for P={config.p} identities per batch but the "
                f"dataset has only {meta.num_identities}")
        self.config = config
        self.meta = meta
        self._by_label: dict[int, np.ndarray] = {}
        for rec_idx, rec in train:
            label = meta.train_label(rec.identity)
            self._by_label.setdefault(label, []).append(rec_idx)
        self._by_label = {k: np.asarray(v) for k, v in self._by_label.items()}
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self._perm: np.ndarray = np.empty(0, dtype=np.int64)
        self._cursor = 0

    @property
    def batches_per_epoch(self) -> int:
        c = self.meta.num_identities
        return -(-c // self.config.p)

    def next_batch_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (labels [P*K], record_indices [P*K]) for one batch."""
        p, k = self.config.p, self.config.k
        if self._cursor >= len(self._perm):
            self._perm = self.rng.permutation(self.meta.num_identities)
            self._cursor = 0
        chunk = self._perm[self._cursor:self._cursor + p]
        if len(chunk) < p:
            used = self._perm[:self._cursor]
            extra = self.rng.choice(used, size=p - len(chunk), replace=False)
            chunk = np.concatenate([chunk, extra])
        self._cursor += p
        labels, rec_indices = [], []
        for label in chunk:
            pool = self._by_label[int(label)]
            if len(pool) >= k:
                picks = self.rng.choice(pool, size=k, replace=False)
            else:
                picks = self.rng.choice(pool, size=k, replace=True)
            labels.extend([int(label)] * k)
            rec_indices.extend(int(i) for i in picks)
        return np.asarray(labels), np.asarray(rec_indices)

    def state(self) -> dict:
        return {"perm": self._perm.tolist(), "cursor": self._cursor}

    def load_state(self, state: dict) -> None:
        self._perm = np.asarray(state["perm"], dtype=np.int64)
        self._cursor = int(state["cursor"])


class BatchLoader:
    """Assembles image tensors for sampled record indices."""

    def __init__(self, records: list[ImageRecord], data_config: DataConfig,
                 image_size: tuple[int, int] = (384, 128)):
        self.records = records
        self.cfg = data_config
        self.image_size = image_size
        cache_on = data_config.cache_images
        if cache_on is None:
            cache_on = len(records) <= 4000
        self._cache: dict[int, np.ndarray] | None = {} if cache_on else None

    def _raw(self, rec_idx: int) -> np.ndarray:
        if self._cache is not None and rec_idx in self._cache:
            return self._cache[rec_idx]
        img = load_image(self.records[rec_idx].image_path, self.image_size)
        if self._cache is not None:
            self._cache[rec_idx] = img
        return img

    def make_batch(self, labels: np.ndarray, rec_indices: np.ndarray,
                   rng: np.random.Generator | None = None,
                   flip_prob: float = 0.0) -> Batch:
        imgs = []
        for rec_idx in rec_indices:
            x = normalize_image(self._raw(int(rec_idx)), self.cfg.mean, self.cfg.std)
            if rng is not None:
                x = augment_train(x, rng, flip_prob)
            imgs.append(x)
        cams = np.asarray([self.records[int(i)].camera for i in rec_indices])
        return Batch(images=np.stack(imgs), identities=np.asarray(labels),
                     cameras=cams, record_indices=np.asarray(rec_indices))

    def load_stack(self, rec_indices) -> np.ndarray:
        """Deterministic (no augmentation) image stack for inference."""
        return np.stack([
            normalize_image(self._raw(int(i)), self.cfg.mean, self.cfg.std)
            for i in rec_indices
        ]) if len(rec_indices) else np.zeros((0, 3) + tuple(self.image_size),
                                             dtype=np.float32)
