"""The two supervisory signals and where they attach.

Softmax classification supervises the non-reduced pooled global of every
branch plus all reduced stripe features; the batch-hard triplet supervises
the reduced globals only (local stripes get no metric loss). Disabling the
triplet moves softmax onto the reduced globals instead.
"""

import numpy as np

from stripereid.configs import LossConfig, ModelConfig
from stripereid.losses import batch_hard_triplet, route_losses
from stripereid.model import MultiBranchNet

# batch-hard triplet on a toy batch: per anchor, the hinge
# [margin + furthest positive - closest negative]_+
feats = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0], [6.5, 0.0]])
labels = np.array([0, 0, 1, 1])
print("toy features:", feats[:, 0].tolist(), "labels:", labels.tolist())
for margin in (0.5, 1.2, 5.0):
    print(f"  margin {margin:>4}: triplet loss = "
          f"{batch_hard_triplet(feats, labels, margin):.2f}")

# routing on a real forward pass (tiny backbone, PK batch of 4 ids x 4)
config = ModelConfig(backbone="tiny", num_classes=4, reduced_dim=16,
                     input_size=(192, 64))
labels = np.repeat(np.arange(4), 4)
x = np.random.default_rng(0).standard_normal((16, 3, 192, 64)).astype(np.float32)

for triplet_on in (True, False):
    loss_cfg = LossConfig(enable_triplet=triplet_on)
    model = MultiBranchNet(config, loss_config=loss_cfg, seed=0)
    bundle = model.forward(x, train=True)
    report, grads = route_losses(bundle, labels, model.heads, loss_cfg, config)
    tag = "canonical (triplet on)" if triplet_on else "w/o TP (triplet off)"
    print(f"\n{tag}: {len(report.breakdown)} supervisory signals, "
          f"total {report.total:.3f}")
    for (kind, feat), value in report.breakdown.items():
        dim = bundle.features()[feat].shape[1]
        print(f"  {kind:8} on {feat:14} ({dim:4}-d)  loss {value:.3f}")
