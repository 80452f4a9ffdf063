"""How the per-image concept filter picks semantic priors.

The similarity filter thresholds the logistic of cosine similarity between a
noisy image summary and every text embedding. The binary oracle reads the
true labels. Either way the kept list is padded up to ``L`` entries.
"""
import numpy as np

from ovdkt.ablation import build_world
from ovdkt.concepts import ORACLE, SIMILARITY, FilterConfig, pad_priors, select_priors
from ovdkt.config import RunConfig

rc = RunConfig.from_dict({"scenes": {"n_train": 4, "n_eval": 6}}, env={})
world = build_world(rc, seed=1)
cs = world.category_space


def names(ids):
    return ", ".join(cs.categories[i].name for i in ids) or "-"


for scene in world.dataset.eval[:4]:
    present = sorted({o.category_id for o in scene.all_objects})
    print(f"scene {scene.scene_id}: present = {names(present)}")
    for method in (ORACLE, SIMILARITY):
        fc = FilterConfig(method=method, rho=0.7, max_priors=4)
        rep = select_priors(scene, world.bank, cs, fc, rc.scenes.background_noise, seed=0)
        padded = pad_priors(list(rep.retained), fc.max_priors, cs, seed=(0, scene.scene_id))
        line = f"  {method:>13s}: kept [{names(rep.retained)}] padded [{names(padded)}]"
        if rep.scores is not None:
            line += f" top score {np.max(rep.scores):.2f}"
        print(line)
