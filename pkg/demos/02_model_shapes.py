"""Walk the multi-branch network's shapes.

The shared stem ends after the first block of stage 4; each branch owns the
rest. The global branch keeps stride 2 in its final stage (coarse 12x4 map
on the full backbone), part branches drop to stride 1 (24x8) and slice their
map into uniform horizontal stripes. Every pooled vector is reduced to a
compact feature; at test time all reduced features concatenate.

Run with --full for the 50-layer backbone (a few seconds on CPU); the
default tiny backbone shows the same structure at toy widths.
"""

import sys

import numpy as np

from stripereid.configs import ModelConfig
from stripereid.model import build_model, partition_stripes

full = "--full" in sys.argv
config = ModelConfig(num_classes=8) if full else \
    ModelConfig(backbone="tiny", num_classes=8, reduced_dim=32)
print(f"backbone: {config.backbone}, split after {config.split_after}")

model = build_model(config, seed=0)
x = np.random.default_rng(0).standard_normal((2, 3, 384, 128)).astype(np.float32)
bundle = model.forward(x)

print(f"{'branch':8} {'map':>8} {'z dim':>6} {'reduced features':>30}")
for name, b in bundle.branches.items():
    h, w = b.feature_map.shape[2:]
    feats = [f"f_g({b.f_global.shape[1]})"]
    feats += [f"f_p{i + 1}({fp.shape[1]})" for i, fp in enumerate(b.f_parts)]
    print(f"{name:8} {f'{h}x{w}':>8} {b.z_global.shape[1]:>6} "
          f"{' '.join(feats):>30}")

concat = bundle.concat()
print(f"\nfinal concatenated descriptor: {concat.shape[1]}-d "
      f"({len(bundle.feature_order())} reduced features)")
print("order:", ", ".join(bundle.feature_order()))

# stripes exactly tile the map they came from
fmap = bundle.branches["part3"].feature_map
stripes = partition_stripes(fmap, 3)
assert np.array_equal(np.concatenate(stripes, axis=2), fmap)
print(f"part3 stripes: 3 x {stripes[0].shape[2]}x{stripes[0].shape[3]} "
      f"(tiling reconstructs the {fmap.shape[2]}x{fmap.shape[3]} map exactly)")
