"""Response maps: where each branch looks.

The intensity at every spatial location is the L2 norm of that location's
feature vector on a branch's output map. A short training run first, so the
maps reflect learned structure rather than random init; overlays for all
branches land in ./demo_out/.
"""

import tempfile
from pathlib import Path

import numpy as np

from stripereid.configs import RunConfig
from stripereid.data import (generate_synthetic, load_image,
                             load_market_layout, normalize_image,
                             split_records)
from stripereid.infer import render_heatmap, response_map
from stripereid.train import model_from_checkpoint, train

work = Path(tempfile.mkdtemp(prefix="stripereid_demo_"))
generate_synthetic(work / "data", num_ids=4, imgs_per_id=12, seed=3)
config = RunConfig.from_dict({
    "dataset_root": str(work / "data"),
    "output_dir": str(work / "run"),
    "model": {"backbone": "tiny", "reduced_dim": 32},
    "sampler": {"p": 4, "k": 4},
    "train": {"epochs": 1000, "max_steps": 60,
              "lr_schedule": {"0": 0.01}, "seed": 0},
})
result = train(config)
model, _ = model_from_checkpoint(result.checkpoint)

records, _ = load_market_layout(work / "data")
record = split_records(records, "query")[0]
raw = load_image(record.image_path, model.config.input_size)
tensor = normalize_image(raw, config.data.mean, config.data.std)

out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)
for branch in model.branches:
    grid = response_map(model, tensor, branch)
    print(f"{branch:8} map {grid.shape[0]}x{grid.shape[1]}  "
          f"intensity mean {grid.mean():.2f}  peak {grid.max():.2f}")
    render_heatmap(raw, grid).save(out_dir / f"response_{branch}.png")
print(f"overlays written to {out_dir}/response_<branch>.png")

# spot-check the definition: intensity == per-location feature norm
fmap = model.forward(tensor[None]).branches["global"].feature_map[0]
grid = response_map(model, tensor, "global")
assert np.allclose(grid, np.linalg.norm(fmap.astype(np.float64), axis=0))
print("intensity equals the per-location feature L2 norm (checked)")
