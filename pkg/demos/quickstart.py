"""Generate a small world, train a detector, evaluate it and look at one scene.

Run with ``python demos/quickstart.py``. The short schedule keeps it under a
minute, so AP is far below the full 60-epoch benchmark.
"""
import numpy as np

from ovdkt.ablation import build_world, evaluate_world, train_world
from ovdkt.config import RunConfig

rc = RunConfig.from_dict({
    "scenes": {"n_train": 80, "n_eval": 30},
    "train": {"total_epochs": 12, "phase1_epochs": 4, "decay_epoch": 10},
}, env={})

world = build_world(rc, seed=0)
cs = world.category_space
print(f"{len(cs.base_ids)} base and {len(cs.novel_ids)} novel categories, D={world.bank.dimension}")

state, log = train_world(rc, world, progress=lambda epoch, loss: print(f"  epoch {epoch:2d} loss {loss:.3f}"))
first, last = log.records[0], log.records[-1]
print(f"loss {first['loss_total']:.2f} -> {last['loss_total']:.2f} over {last['step']} steps")

result, dets = evaluate_world(state, rc, world)
for k, v in result.summary().items():
    print(f"  {k:12s} {v:.3f}")

scene = world.dataset.eval[0]
print(f"\nscene {scene.scene_id}: ground truth")
for o in scene.annotated:
    print(f"  {cs.categories[o.category_id].name:>10s} box={np.round(o.bbox, 2)}")
print("detections")
for d in sorted((d for d in dets if d.scene_id == scene.scene_id), key=lambda d: -d.score):
    print(f"  {cs.categories[d.category_id].name:>10s} box={np.round(d.bbox, 2)} score={d.score:.2f}")
