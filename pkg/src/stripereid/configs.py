"""Declarative configuration for models, sampling, losses and training runs.

Everything that affects the science lives here and is serialized verbatim
into run directories, checkpoints and feature files, together with a stable
hash so downstream tools can refuse mixing artifacts produced under
different model configurations.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .errors import ConfigError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_LANDMARK_RE = re.compile(r"^stage([2-5])\.block(\d+)$")


@dataclass
class BackboneSpec:
    """Structural description of a residual backbone."""

    stem_width: int
    stem_kernel: int
    stem_stride: int
    mids: tuple[int, int, int, int]       # bottleneck mid widths for stages 2..5
    blocks: tuple[int, int, int, int]     # block counts for stages 2..5
    expansion: int = 4

    @property
    def stage_out(self) -> tuple[int, ...]:
        return tuple(m * self.expansion for m in self.mids)

    @property
    def z_dim(self) -> int:
        return self.mids[3] * self.expansion


BACKBONES: dict[str, BackboneSpec] = {
    # standard 50-layer backbone: stem /4, stages /2 each
    "resnet50": BackboneSpec(stem_width=64, stem_kernel=7, stem_stride=2,
                             mids=(64, 128, 256, 512), blocks=(3, 4, 6, 3)),
    # desk-scale variant: same stage layout, thin widths, cheap stride-4 stem
    "tiny": BackboneSpec(stem_width=16, stem_kernel=3, stem_stride=4,
                         mids=(4, 8, 16, 32), blocks=(1, 1, 2, 1)),
}


def _check_keys(d: dict, allowed, ctx: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {ctx}: {', '.join(unknown)}")


@dataclass
class BranchConfig:
    """One output branch: a whole-map global feature plus optional stripes."""

    name: str
    num_parts: int = 1
    final_stride: int | None = None   # stride of the last stage's first block
    reduced_dim: int | None = None    # overrides ModelConfig.reduced_dim

    def __post_init__(self):
        if self.num_parts < 1:
            raise ConfigError(f"branch '{self.name}': num_parts must be >= 1")
        m = re.fullmatch(r"part(\d+)", self.name)
        if self.name == "global":
            if self.num_parts != 1:
                raise ConfigError("branch 'global' must have num_parts=1")
            if self.final_stride is None:
                self.final_stride = 2
        elif m:
            if self.num_parts != int(m.group(1)):
                raise ConfigError(
                    f"branch '{self.name}' must have num_parts={m.group(1)}")
            if self.final_stride is None:
                self.final_stride = 1
        elif self.final_stride is None:
            self.final_stride = 1
        if self.final_stride not in (1, 2):
            raise ConfigError(f"branch '{self.name}': final_stride must be 1 or 2")

    @classmethod
    def from_dict(cls, d: dict) -> "BranchConfig":
        _check_keys(d, ("name", "num_parts", "final_stride", "reduced_dim"),
                    "model.branches[]")
        return cls(**d)


def canonical_branches() -> list[BranchConfig]:
    return [BranchConfig("global", 1), BranchConfig("part2", 2), BranchConfig("part3", 3)]


@dataclass
class ModelConfig:
    backbone: str = "resnet50"
    branches: list[BranchConfig] = field(default_factory=canonical_branches)
    split_after: str = "stage4.block1"
    num_classes: int = 0
    reduced_dim: int = 256
    input_size: tuple[int, int] = (384, 128)
    pretrained: str | None = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(
                f"unknown backbone '{self.backbone}'; choose from {sorted(BACKBONES)}")
        if not self.branches:
            raise ConfigError("model needs at least one branch")
        names = [b.name for b in self.branches]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate branch names: {names}")
        self.split_stage, self.split_block = self._parse_landmark(self.split_after)

    def _parse_landmark(self, landmark: str) -> tuple[int, int]:
        m = _LANDMARK_RE.match(landmark)
        spec = BACKBONES[self.backbone]
        if not m:
            raise ConfigError(
                f"unknown split landmark '{landmark}' (expected 'stageS.blockB')")
        stage, block = int(m.group(1)), int(m.group(2))
        if stage == 5:
            raise ConfigError("cannot split inside the final stage; branches own it")
        nblocks = spec.blocks[stage - 2]
        if not 1 <= block <= nblocks:
            raise ConfigError(
                f"unknown split landmark '{landmark}': stage{stage} of "
                f"'{self.backbone}' has {nblocks} block(s)")
        return stage, block

    def branch_reduced_dim(self, branch: BranchConfig) -> int:
        return branch.reduced_dim if branch.reduced_dim is not None else self.reduced_dim

    @property
    def spec(self) -> BackboneSpec:
        return BACKBONES[self.backbone]

    def to_dict(self) -> dict:
        d = {
            "backbone": self.backbone,
            "branches": [
                {"name": b.name, "num_parts": b.num_parts,
                 "final_stride": b.final_stride, "reduced_dim": b.reduced_dim}
                for b in self.branches
            ],
            "split_after": self.split_after,
            "num_classes": self.num_classes,
            "reduced_dim": self.reduced_dim,
            "input_size": list(self.input_size),
            "pretrained": self.pretrained,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        _check_keys(d, ("backbone", "branches", "split_after", "num_classes",
                        "reduced_dim", "input_size", "pretrained"), "model")
        d = dict(d)
        if "branches" in d:
            d["branches"] = [BranchConfig.from_dict(b) for b in d["branches"]]
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop("pretrained")  # weight provenance does not change feature layout
        raw = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:16]


@dataclass
class SamplerConfig:
    p: int = 16
    k: int = 4
    seed: int | None = None

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ConfigError(
                "sampler needs P >= 2 and K >= 2 so every anchor has both "
                "positive and negative candidates in-batch")

    @property
    def batch_size(self) -> int:
        return self.p * self.k

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        _check_keys(d, ("p", "k", "seed"), "sampler")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossConfig:
    margin: float = 1.2
    enable_triplet: bool = True
    weights: dict[str, float] = field(default_factory=dict)  # per "kind/feature" key

    def __post_init__(self):
        if self.enable_triplet and self.margin <= 0:
            raise ConfigError("triplet margin must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        _check_keys(d, ("margin", "enable_triplet", "weights"), "loss")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def default_lr_schedule() -> dict[int, float]:
    return {0: 0.01, 40: 1e-3, 60: 1e-4}


@dataclass
class TrainConfig:
    epochs: int = 80
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: dict[int, float] = field(default_factory=default_lr_schedule)
    max_steps: int | None = None
    flip_prob: float = 0.5
    checkpoint_every: int = 1
    seed: int = 0

    def __post_init__(self):
        self.lr_schedule = {int(k): float(v) for k, v in self.lr_schedule.items()}
        epochs = sorted(self.lr_schedule)
        if epochs != list(self.lr_schedule):
            self.lr_schedule = {e: self.lr_schedule[e] for e in epochs}
        if not epochs or epochs[0] != 0:
            raise ConfigError("lr schedule must define a rate at epoch 0")
        if any(r <= 0 for r in self.lr_schedule.values()):
            raise ConfigError("all learning rates must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        _check_keys(d, ("epochs", "momentum", "weight_decay", "lr_schedule",
                        "max_steps", "flip_prob", "checkpoint_every", "seed"), "train")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = {str(k): v for k, v in self.lr_schedule.items()}
        return d


@dataclass
class DataConfig:
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    cache_images: bool | None = None   # None: auto (cache small datasets)

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        _check_keys(d, ("mean", "std", "cache_images"), "data")
        d = dict(d)
        for k in ("mean", "std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std),
                "cache_images": self.cache_images}


@dataclass
class EvalConfig:
    pool: str = "avg"            # multi-query pooling: avg | max
    rerank_k1: int = 20
    rerank_k2: int = 6
    rerank_lambda: float = 0.3

    def __post_init__(self):
        if self.pool not in ("avg", "max"):
            raise ConfigError("eval.pool must be 'avg' or 'max'")
        if not 0.0 <= self.rerank_lambda <= 1.0:
            raise ConfigError("eval.rerank_lambda must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        _check_keys(d, ("pool", "rerank_k1", "rerank_k2", "rerank_lambda"), "eval")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunConfig:
    """Top-level declarative run description (one JSON file per experiment)."""

    dataset_root: str = ""
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    version: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        # config_hash appears in the copies this package writes into run
        # directories; tolerate it so those copies stay loadable
        _check_keys(d, ("version", "dataset_root", "output_dir", "model",
                        "sampler", "loss", "train", "data", "eval",
                        "config_hash"), "run config")
        version = d.get("version", 1)
        if version != 1:
            raise ConfigError(f"unsupported config version: {version}")
        return cls(
            dataset_root=d.get("dataset_root", ""),
            output_dir=d.get("output_dir", "runs/default"),
            model=ModelConfig.from_dict(d.get("model", {})),
            sampler=SamplerConfig.from_dict(d.get("sampler", {})),
            loss=LossConfig.from_dict(d.get("loss", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            data=DataConfig.from_dict(d.get("data", {})),
            eval=EvalConfig.from_dict(d.get("eval", {})),
            version=1,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "dataset_root": self.dataset_root,
            "output_dir": self.output_dir,
            "model": self.model.to_dict(),
            "sampler": self.sampler.to_dict(),
            "loss": self.loss.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "eval": self.eval.to_dict(),
        }

    def config_hash(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:16]
