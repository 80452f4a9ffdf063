"""Contrastive versus L1 region distillation on a toy matching problem.

Two ground-truth objects, five query embeddings. The matcher picks which
queries are positives; the other queries act as in-image negatives for the
contrastive term but are invisible to L1.
"""
import numpy as np

from ovdkt.distill import build_pairs, contrastive_loss, l1_distill
from ovdkt.matcher import hungarian

rng = np.random.default_rng(0)
r = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])  # teacher region features
e = rng.normal(0, 0.3, (5, 3))
e[1] += r[0]
e[3] += r[1]

cost = -(r / np.linalg.norm(r, axis=1, keepdims=True)) @ (e / np.linalg.norm(e, axis=1, keepdims=True)).T
match = hungarian(cost)
pairs = build_pairs(match, 2, 5)
print("matched (gt, query):", match.pairs)

matched = e[[j for _, j in match.pairs]]
c, gc = contrastive_loss(r, e, pairs, tau=0.07)
l, gl = l1_distill(r, matched)
print(f"contrastive {c:.4f}  l1 {l:.4f}")
print("contrastive gradient on each query (row norms):", np.round(np.linalg.norm(gc, axis=1), 3))
print("l1 gradient on matched queries (row norms):   ", np.round(np.linalg.norm(gl, axis=1), 3))

# pulling a negative query toward a teacher feature raises only the contrastive loss
e2 = e.copy()
e2[0] = r[0] + 0.05
print(f"after moving an unmatched query next to r0: contrastive {contrastive_loss(r, e2, pairs)[0]:.4f}"
      f"  l1 {l1_distill(r, e2[[j for _, j in match.pairs]])[0]:.4f}")
