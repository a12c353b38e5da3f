"""SGD training loop, LR schedule, checkpointing and ablation variants.

A run writes into its output directory: a verbatim copy of the config, a
JSON-lines metrics log (one record per step with the full loss breakdown),
and per-epoch checkpoints (named-tensor .npz + JSON sidecar). Resuming from
a checkpoint restores parameters, optimizer momentum, sampler state and the
RNG, so the continuation reproduces what the uninterrupted run would have
done.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .configs import BranchConfig, RunConfig, TrainConfig
from .data import BatchLoader, DatasetMeta, ImageRecord, PKSampler, load_market_layout
from .errors import ConfigError, TrainingAborted
from .layers import Param
from .losses import route_losses, routing_plan
from .model import MultiBranchNet, build_model

log = logging.getLogger(__name__)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant learning rate for a 0-based epoch index."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    rate = None
    for start, value in config.lr_schedule.items():
        if epoch >= start:
            rate = value
    return rate


class SGD:
    """SGD with momentum; weight decay skips parameters flagged decay=False."""

    def __init__(self, params: list[Param], momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if p.decay and self.weight_decay:
                g = g + self.weight_decay * p.value
            v = self.velocity.get(p.name)
            if v is None:
                v = np.zeros_like(p.value)
                self.velocity[p.name] = v
            v *= self.momentum
            v += g
            p.value -= lr * v

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.velocity)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.velocity = {k: np.array(v) for k, v in state.items()}


# ---------------------------------------------------------------------------
# Ablation variants

_VARIANT_BRANCHES = {
    "canonical": [1, 2, 3],
    "wo-part3": [1, 2],
    "w-part4": [1, 2, 3, 4],
    "part2+4": [1, 2, 4],
    "part3+4": [1, 3, 4],
    "wo-tp": [1, 2, 3],
}


def _normalize_variant(variant: str) -> str:
    token = variant.lower()
    for ch in (" ", "/", "_", "-", "(", ")"):
        token = token.replace(ch, "")
    if token.startswith("mgn"):
        token = token[3:] or "canonical"
    aliases = {
        "canonical": "canonical", "full": "canonical",
        "wopart3": "wo-part3", "withoutpart3": "wo-part3",
        "wpart4": "w-part4", "withpart4": "w-part4",
        "part2+4": "part2+4", "part3+4": "part3+4",
        "wotp": "wo-tp", "withouttp": "wo-tp", "notriplet": "wo-tp",
    }
    if token not in aliases:
        raise ConfigError(
            f"unknown ablation variant '{variant}'; expected one of: "
            "canonical, w/o Part-3, w/ Part-4, Part2+4, Part3+4, w/o TP")
    return aliases[token]


def make_ablation_config(variant: str, base: RunConfig | None = None) -> RunConfig:
    """Return a run config for a named branch/loss ablation variant.

    Only the branch list and the triplet flag change; everything else is
    inherited from ``base`` (or the defaults).
    """
    key = _normalize_variant(variant)
    cfg = base if base is not None else RunConfig()
    cfg = RunConfig.from_dict(cfg.to_dict())  # deep copy through the schema
    parts = _VARIANT_BRANCHES[key]
    cfg.model.branches = [
        BranchConfig("global", 1) if n == 1 else BranchConfig(f"part{n}", n)
        for n in parts
    ]
    cfg.loss.enable_triplet = key != "wo-tp"
    return cfg


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(prefix: str | Path, model: MultiBranchNet, optimizer: SGD,
                    run_config: RunConfig, epoch: int, step: int,
                    rng: np.random.Generator, sampler: PKSampler | None) -> Path:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(model.state_dict())
    for name, v in optimizer.state().items():
        arrays[f"opt/{name}"] = v
    np.savez(str(prefix) + ".npz", **arrays)
    sidecar = {
        "epoch": epoch,
        "step": step,
        "config": run_config.to_dict(),
        "model_config_hash": run_config.model.config_hash(),
        "run_config_hash": run_config.config_hash(),
        "rng_state": _encode_rng_state(rng.bit_generator.state),
        "sampler_state": sampler.state() if sampler is not None else None,
    }
    Path(str(prefix) + ".json").write_text(json.dumps(sidecar, indent=1))
    return Path(str(prefix) + ".npz")


def _encode_rng_state(state) -> dict:
    # PCG64 state contains arbitrary-precision ints; JSON carries them fine
    return json.loads(json.dumps(state))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read (arrays, sidecar) from a checkpoint path or prefix."""
    path = str(path)
    if path.endswith(".json"):
        path = path[:-5]
    if path.endswith(".npz"):
        path = path[:-4]
    npz_path, json_path = Path(path + ".npz"), Path(path + ".json")
    if not npz_path.is_file() or not json_path.is_file():
        raise ConfigError(f"checkpoint not found: {path}(.npz/.json)")
    with np.load(npz_path) as z:
        arrays = {k: z[k] for k in z.files}
    sidecar = json.loads(json_path.read_text())
    return arrays, sidecar


def model_from_checkpoint(path: str | Path, dtype=np.float32) -> tuple[MultiBranchNet, dict]:
    """Rebuild the model a checkpoint was trained with and load its weights."""
    arrays, sidecar = load_checkpoint(path)
    run_config = RunConfig.from_dict(sidecar["config"])
    run_config.model.pretrained = None  # weights come from the checkpoint itself
    model = build_model(run_config.model, run_config.loss, dtype=dtype)
    model.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("opt/")})
    return model, sidecar


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    run_dir: Path
    checkpoint: Path
    metrics_path: Path
    steps_run: int
    first_total: float
    last_total: float


def train(run_config: RunConfig, records: list[ImageRecord] | None = None,
          meta: DatasetMeta | None = None, resume: str | Path | None = None,
          log_every: int = 1) -> TrainResult:
    """Run the optimization loop described by ``run_config``."""
    cfg = run_config
    if records is None or meta is None:
        records, meta = load_market_layout(cfg.dataset_root)
    if meta.num_identities < 2:
        raise ConfigError("training needs at least 2 identities")

    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.model.num_classes = meta.num_identities
    (run_dir / "config.json").write_text(json.dumps(
        {**cfg.to_dict(), "config_hash": cfg.config_hash()}, indent=1))

    rng = np.random.default_rng(np.random.SeedSequence(cfg.train.seed))
    sampler = PKSampler(records, meta, cfg.sampler, rng=rng)
    loader = BatchLoader(records, cfg.data, image_size=cfg.model.input_size)
    model = build_model(cfg.model, cfg.loss, seed=cfg.train.seed)
    optimizer = SGD(list(model.params()), momentum=cfg.train.momentum,
                    weight_decay=cfg.train.weight_decay)

    start_step = 0
    if resume is not None:
        arrays, sidecar = load_checkpoint(resume)
        model.load_state_dict({k: v for k, v in arrays.items()
                               if not k.startswith("opt/")})
        optimizer.load_state({k[4:]: v for k, v in arrays.items()
                              if k.startswith("opt/")})
        rng.bit_generator.state = sidecar["rng_state"]
        if sidecar.get("sampler_state"):
            sampler.load_state(sidecar["sampler_state"])
        start_step = sidecar["step"] + 1
        log.info("resumed from %s at step %d (epoch %d)", resume, start_step,
                 sidecar["epoch"] + 1)

    steps_per_epoch = sampler.batches_per_epoch
    total_steps = cfg.train.epochs * steps_per_epoch
    if cfg.train.max_steps is not None:
        total_steps = min(total_steps, cfg.train.max_steps)

    plan = routing_plan(cfg.model, cfg.loss)
    acc_feature = plan["softmax"][0][0] if plan["softmax"] else None

    metrics_path = run_dir / "metrics.jsonl"
    ckpt_dir = run_dir / "checkpoints"
    first_total = last_total = float("nan")
    mode = "a" if start_step > 0 else "w"
    epoch = 0
    with open(metrics_path, mode) as metrics:
        for step in range(start_step, total_steps):
            epoch = step // steps_per_epoch
            lr = lr_at(epoch, cfg.train)
            labels, idxs = sampler.next_batch_indices()
            batch = loader.make_batch(labels, idxs, rng=rng,
                                      flip_prob=cfg.train.flip_prob)
            model.zero_grad()
            bundle = model.forward(batch.images, train=True)
            report, fgrads = route_losses(bundle, batch.identities, model.heads,
                                          cfg.loss, cfg.model)
            if not np.isfinite(report.total):
                bad = [f"{kind}/{feat}" for (kind, feat), v in report.breakdown.items()
                       if not np.isfinite(v)]
                raise TrainingAborted(
                    f"non-finite loss at step {step}: {', '.join(bad) or 'total'}")
            model.backward(fgrads)
            optimizer.step(lr)

            if np.isnan(first_total):
                first_total = report.total
            last_total = report.total
            if step % log_every == 0 or step == total_steps - 1:
                entry = {"step": step, "epoch": epoch, "lr": lr,
                         "total": report.total, "losses": report.flat()}
                if acc_feature is not None:
                    feats = bundle.features()[acc_feature]
                    logits = feats @ model.heads[acc_feature].w.value.T
                    entry["batch_acc"] = float(
                        (logits.argmax(axis=1) == batch.identities).mean())
                metrics.write(json.dumps(entry) + "\n")

            end_of_epoch = (step + 1) % steps_per_epoch == 0
            if end_of_epoch and (epoch + 1) % cfg.train.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"epoch_{epoch:04d}", model, optimizer,
                                cfg, epoch, step, rng, sampler)

    final = save_checkpoint(run_dir / "last", model, optimizer, cfg,
                            epoch, total_steps - 1, rng, sampler)
    return TrainResult(run_dir=run_dir, checkpoint=final,
                       metrics_path=metrics_path,
                       steps_run=total_steps - start_step,
                       first_total=first_total, last_total=last_total)
