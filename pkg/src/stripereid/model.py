"""Multi-branch embedding network.

A shared residual stem runs up to a configurable split landmark (default:
after the first block of stage 4). Each branch replicates the remaining
stages with its own parameters, all branches starting from identical weights.
The final stage of a branch keeps stride 2 (global branch) or drops to
stride 1 (part branches) to preserve spatial detail; its output map is
max-pooled as a whole and, for part branches, over uniform horizontal
stripes. Every pooled vector is reduced by a bias-free linear layer with
batch normalization and ReLU; reductions and classifier heads never share
weights.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .configs import LossConfig, ModelConfig
from .layers import (BatchNorm1d, BatchNorm2d, Bottleneck, Conv2d, Linear,
                     MaxPool2d, Module, ReLU, Sequential)

log = logging.getLogger(__name__)


def partition_stripes(fmap: np.ndarray, num_parts: int) -> list[np.ndarray]:
    """Split [N,C,H,W] into num_parts contiguous horizontal stripes.

    Stripes are ordered top to bottom, disjoint, and exactly tile the input;
    H must be divisible by num_parts.
    """
    if num_parts < 1:
        raise ValueError("num_parts must be >= 1")
    h = fmap.shape[2]
    if h % num_parts != 0:
        raise ValueError(
            f"map height {h} is not divisible into {num_parts} uniform stripes")
    step = h // num_parts
    return [fmap[:, :, i * step:(i + 1) * step, :] for i in range(num_parts)]


def classifier_logits(head: Linear, features: np.ndarray) -> np.ndarray:
    """Bias-free class scores: features [N,d] (or [d]) times the head weights."""
    single = features.ndim == 1
    out = np.atleast_2d(features) @ head.w.value.T
    return out[0] if single else out


@dataclass
class BranchEmbedding:
    name: str
    feature_map: np.ndarray          # [N, Cz, h, w]
    z_global: np.ndarray             # [N, Cz] whole-map max-pool
    f_global: np.ndarray             # [N, d] reduced global feature
    f_parts: list[np.ndarray]        # num_parts reduced stripe features


class EmbeddingBundle:
    """All per-branch features of a batch, addressable by feature name."""

    def __init__(self, branches: dict[str, BranchEmbedding]):
        self.branches = branches

    def features(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, b in self.branches.items():
            out[f"{name}.z_g"] = b.z_global
            out[f"{name}.f_g"] = b.f_global
            for i, fp in enumerate(b.f_parts, start=1):
                out[f"{name}.f_p{i}"] = fp
        return out

    def feature_order(self) -> list[str]:
        """Reduced-feature names in the persisted concatenation order."""
        order = []
        for name, b in self.branches.items():
            order.append(f"{name}.f_g")
            order.extend(f"{name}.f_p{i}" for i in range(1, len(b.f_parts) + 1))
        return order

    def concat(self) -> np.ndarray:
        """Concatenate all reduced features into the final [N, D] descriptor."""
        pieces = []
        for b in self.branches.values():
            pieces.append(b.f_global)
            pieces.extend(b.f_parts)
        return np.concatenate(pieces, axis=1)


class _Reduction(Module):
    """Bias-free linear + batch norm + ReLU, applied to a pooled vector."""

    def __init__(self, cin: int, cout: int, *, rng, name: str, dtype):
        # fan-in init: the layer maps an already-pooled activation
        self.lin = Linear(cin, cout, rng=rng, name=f"{name}.lin", dtype=dtype,
                          std=float(np.sqrt(2.0 / cin)))
        self.bn = BatchNorm1d(cout, name=f"{name}.bn", dtype=dtype)
        self.relu = ReLU()
        self.seq = Sequential(self.lin, self.bn, self.relu)

    def params(self):
        yield from self.seq.params()

    def buffers(self):
        yield from self.seq.buffers()

    def forward(self, x, train=False):
        return self.seq.forward(x, train=train)

    def backward(self, g):
        return self.seq.backward(g)


class _Branch:
    def __init__(self, cfg, trunk: Sequential, reduce_global: _Reduction,
                 reduce_parts: list[_Reduction]):
        self.cfg = cfg
        self.trunk = trunk
        self.reduce_global = reduce_global
        self.reduce_parts = reduce_parts

    def modules(self):
        yield self.trunk
        yield self.reduce_global
        yield from self.reduce_parts


def _max_pool_region(region: np.ndarray):
    """Max over all spatial positions of [N,C,h,w]; returns (pooled, argmax)."""
    n, c = region.shape[:2]
    flat = region.reshape(n, c, -1)
    idx = flat.argmax(axis=2)
    pooled = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    return pooled, idx


class MultiBranchNet:
    """The full computation graph: stem, branches, reductions, heads."""

    def __init__(self, config: ModelConfig, loss_config: LossConfig | None = None,
                 seed: int = 0, dtype=np.float32):
        from .losses import routing_plan  # heads depend on the loss routing

        self.config = config
        self.loss_config = loss_config if loss_config is not None else LossConfig()
        self.dtype = dtype
        spec = config.spec
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                           spawn_key=(17,)))

        self.stem = self._build_stem(spec, config, rng, dtype)
        self.branches: dict[str, _Branch] = {}
        template: _Branch | None = None
        for bcfg in config.branches:
            branch = self._build_branch(spec, config, bcfg, rng, dtype)
            if template is None:
                template = branch
            else:
                _copy_matching(template.trunk, branch.trunk)
            self.branches[bcfg.name] = branch

        self.heads: dict[str, Linear] = {}
        if config.num_classes > 0:
            plan = routing_plan(config, self.loss_config)
            for feature_name, dim in plan["softmax"]:
                self.heads[feature_name] = Linear(
                    dim, config.num_classes, rng=rng,
                    name=f"head.{feature_name}", dtype=dtype, std=0.01)
        self._cache = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _build_stem(spec, config, rng, dtype) -> Sequential:
        pad = spec.stem_kernel // 2
        mods = [
            Conv2d(3, spec.stem_width, spec.stem_kernel, stride=spec.stem_stride,
                   pad=pad, rng=rng, name="stem.conv1", dtype=dtype),
            BatchNorm2d(spec.stem_width, name="stem.bn1", dtype=dtype),
            ReLU(),
            MaxPool2d(3, 2, 1),
        ]
        cin = spec.stem_width
        for stage in range(2, 5):
            n_blocks = spec.blocks[stage - 2]
            last = n_blocks if stage < config.split_stage else config.split_block
            if stage > config.split_stage:
                break
            mid = spec.mids[stage - 2]
            cout = mid * spec.expansion
            for b in range(last):
                stride = 2 if (b == 0 and stage > 2) else 1
                mods.append(Bottleneck(cin if b == 0 else cout, mid, cout, stride,
                                       rng=rng, name=f"stem.stage{stage}.{b}",
                                       dtype=dtype))
            cin = cout
        return Sequential(*mods)

    @staticmethod
    def _build_branch(spec, config, bcfg, rng, dtype) -> _Branch:
        name = f"branch.{bcfg.name}"
        mods = []
        cin = spec.stage_out[config.split_stage - 2]
        for stage in range(config.split_stage, 6):
            mid = spec.mids[stage - 2]
            cout = mid * spec.expansion
            first = config.split_block if stage == config.split_stage else 0
            for b in range(first, spec.blocks[stage - 2]):
                if b == 0 and stage == 5:
                    stride = bcfg.final_stride
                elif b == 0 and stage > 2:
                    stride = 2
                else:
                    stride = 1
                mods.append(Bottleneck(cin if b == first else cout, mid, cout,
                                       stride, rng=rng,
                                       name=f"{name}.stage{stage}.{b}", dtype=dtype))
            cin = cout
        trunk = Sequential(*mods)
        rdim = config.branch_reduced_dim(bcfg)
        z_dim = spec.z_dim
        reduce_global = _Reduction(z_dim, rdim, rng=rng,
                                   name=f"{name}.reduce.g", dtype=dtype)
        # a single-part branch exposes only the global pair {z_g, f_g}
        n_parts = bcfg.num_parts if bcfg.num_parts > 1 else 0
        reduce_parts = [
            _Reduction(z_dim, rdim, rng=rng, name=f"{name}.reduce.p{i}", dtype=dtype)
            for i in range(1, n_parts + 1)
        ]
        return _Branch(bcfg, trunk, reduce_global, reduce_parts)

    # -- bookkeeping --------------------------------------------------------

    def modules(self):
        yield self.stem
        for branch in self.branches.values():
            yield from branch.modules()
        for head in self.heads.values():
            yield head

    def params(self):
        for m in self.modules():
            yield from m.params()

    def buffers(self):
        for m in self.modules():
            yield from m.buffers()

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value for p in self.params()}
        state.update({name: buf for name, buf in self.buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        own = self.state_dict()
        for name, dst in own.items():
            if name in state:
                src = state[name]
                if tuple(dst.shape) != tuple(src.shape):
                    raise ValueError(
                        f"shape mismatch for tensor '{name}': expected "
                        f"{tuple(dst.shape)}, got {tuple(src.shape)}")
                dst[...] = src.astype(dst.dtype, copy=False)
            elif strict:
                raise KeyError(f"checkpoint is missing tensor '{name}'")

    # -- execution ----------------------------------------------------------

    def forward(self, images: np.ndarray, train: bool = False) -> EmbeddingBundle:
        h, w = self.config.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (h, w):
            raise ValueError(
                f"expected input of shape [N,3,{h},{w}], got {tuple(images.shape)}")
        x = images.astype(self.dtype, copy=False)
        t = self.stem.forward(x, train=train)
        branches: dict[str, BranchEmbedding] = {}
        cache = {"stem_out_shape": t.shape, "branches": {}} if train else None
        for name, branch in self.branches.items():
            fmap = branch.trunk.forward(t, train=train)
            regions = [(0, fmap.shape[2])]
            if branch.cfg.num_parts > 1:
                step = fmap.shape[2] // branch.cfg.num_parts
                if fmap.shape[2] % branch.cfg.num_parts != 0:
                    raise ValueError(
                        f"branch '{name}': map height {fmap.shape[2]} not divisible "
                        f"by {branch.cfg.num_parts}")
                regions += [(i * step, (i + 1) * step)
                            for i in range(branch.cfg.num_parts)]
            pooled, argmaxes = [], []
            for r0, r1 in regions:
                p, idx = _max_pool_region(fmap[:, :, r0:r1, :])
                pooled.append(p)
                argmaxes.append(idx)
            z_g = pooled[0]
            f_g = branch.reduce_global.forward(z_g, train=train)
            f_parts = [red.forward(p, train=train)
                       for red, p in zip(branch.reduce_parts, pooled[1:])]
            branches[name] = BranchEmbedding(name, fmap, z_g, f_g, f_parts)
            if train:
                cache["branches"][name] = {
                    "map_shape": fmap.shape, "regions": regions, "argmax": argmaxes,
                }
        if train:
            self._cache = cache
        return EmbeddingBundle(branches)

    def backward(self, feature_grads: dict[str, np.ndarray]) -> None:
        """Backprop loss gradients (keyed by feature name) into parameters."""
        if self._cache is None:
            raise RuntimeError("backward() requires a prior forward(train=True)")
        cache = self._cache
        stem_grad = np.zeros(cache["stem_out_shape"], dtype=self.dtype)
        for name in reversed(list(self.branches)):
            branch = self.branches[name]
            bc = cache["branches"][name]
            n, c = bc["map_shape"][:2]
            gmap = np.zeros(bc["map_shape"], dtype=self.dtype)

            def scatter(region_idx: int, g_pooled: np.ndarray):
                r0, r1 = bc["regions"][region_idx]
                idx = bc["argmax"][region_idx]
                flat = np.zeros((n, c, (r1 - r0) * bc["map_shape"][3]),
                                dtype=self.dtype)
                np.put_along_axis(flat, idx[:, :, None], g_pooled[:, :, None], axis=2)
                gmap[:, :, r0:r1, :] += flat.reshape(n, c, r1 - r0, bc["map_shape"][3])

            gz = np.zeros((n, c), dtype=self.dtype)
            if f"{name}.z_g" in feature_grads:
                gz += feature_grads[f"{name}.z_g"].astype(self.dtype)
            if f"{name}.f_g" in feature_grads:
                gz += branch.reduce_global.backward(
                    feature_grads[f"{name}.f_g"].astype(self.dtype))
            scatter(0, gz)
            for i, red in enumerate(branch.reduce_parts, start=1):
                key = f"{name}.f_p{i}"
                if key in feature_grads:
                    gp = red.backward(feature_grads[key].astype(self.dtype))
                    scatter(i, gp)
            stem_grad += branch.trunk.backward(gmap)
        self.stem.backward(stem_grad)
        self._cache = None

    # -- pretrained weights ---------------------------------------------------

    def load_pretrained(self, archive_path: str) -> int:
        """Initialize from a named-tensor .npz archive.

        Archive names are translated through the bundled mapping table;
        tensors at or before the split land in the stem, tensors after it are
        copied into every branch (so all branches start from the same slice).
        Returns the number of model tensors written.
        """
        mapping = load_archive_mapping()
        try:
            archive = np.load(archive_path)
        except OSError as e:
            raise ValueError(f"cannot read weight archive {archive_path}: {e}") from e
        own = self.state_dict()
        written = 0
        with archive:
            for arch_name in archive.files:
                neutral = mapping.get(arch_name)
                if neutral is None:
                    log.debug("ignoring unmapped archive tensor %s", arch_name)
                    continue
                src = archive[arch_name]
                for target in self._neutral_targets(neutral):
                    if target not in own:
                        continue
                    dst = own[target]
                    if tuple(dst.shape) != tuple(src.shape):
                        raise ValueError(
                            f"weight archive tensor '{arch_name}' has shape "
                            f"{tuple(src.shape)}, model tensor '{target}' expects "
                            f"{tuple(dst.shape)}")
                    dst[...] = src.astype(dst.dtype, copy=False)
                    written += 1
        return written

    def _neutral_targets(self, neutral: str) -> list[str]:
        if not neutral.startswith("stage"):
            return [f"stem.{neutral}"]
        stage = int(neutral[5])
        block = int(neutral.split(".")[1])
        if (stage, block) < (self.config.split_stage, self.config.split_block):
            return [f"stem.{neutral}"]
        return [f"branch.{bname}.{neutral}" for bname in self.branches]


def feature_layout(config: ModelConfig) -> tuple[list[str], int]:
    """Reduced-feature names in concatenation order and the total dimension."""
    names: list[str] = []
    dim = 0
    for b in config.branches:
        rdim = config.branch_reduced_dim(b)
        names.append(f"{b.name}.f_g")
        dim += rdim
        if b.num_parts > 1:
            names.extend(f"{b.name}.f_p{i}" for i in range(1, b.num_parts + 1))
            dim += rdim * b.num_parts
    return names, dim


def _copy_matching(src: Module, dst: Module) -> None:
    """Copy parameter/buffer values between structurally identical modules."""
    for ps, pd in zip(src.params(), dst.params()):
        pd.value[...] = ps.value
    for (_, bs), (_, bd) in zip(src.buffers(), dst.buffers()):
        bd[...] = bs


def build_model(config: ModelConfig, loss_config: LossConfig | None = None,
                seed: int = 0, dtype=np.float32) -> MultiBranchNet:
    """Construct the network; loads the configured pretrained archive if any."""
    model = MultiBranchNet(config, loss_config=loss_config, seed=seed, dtype=dtype)
    if config.pretrained:
        n = model.load_pretrained(config.pretrained)
        log.info("initialized %d tensors from %s", n, config.pretrained)
    return model


def load_archive_mapping() -> dict[str, str]:
    """Archive-name -> neutral-landmark table (shipped as package data)."""
    text = resources.files("stripereid").joinpath("archive_map.json").read_text()
    return json.loads(text)
