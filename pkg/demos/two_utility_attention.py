"""One factor-graph attention step on two hand-made utilities.

    python demos/two_utility_attention.py

A "question" with three words and an "image" with four regions.  The joint
factor is a plain cosine and every word points mostly along region 1, so as
the cue weight on the question message grows the image belief moves onto
region 1 (region 3 shares part of that direction and keeps some mass).
"""

import numpy as np

from fgadialog import core, fga
from fgadialog.config import GraphConfig, UtilitySpec
from fgadialog.core import ParameterRegistry

specs = [UtilitySpec("image", "image", 4, 3, "image", "none"),
         UtilitySpec("question", "question", 3, 3, "question", "last")]
params = fga.FactorGraphParams(GraphConfig(specs, [("image", "question")]), ParameterRegistry(),
                               np.random.default_rng(0))

# identity maps so the joint factor is a plain cosine
for name in ("image", "question"):
    L, R, _, _ = params.self_factor(name)
    L.data[...] = R.data[...] = np.eye(3)
_, _, L, R, _ = params.joint_factor("image", "question")
L.data[...] = R.data[...] = np.eye(3)
for st in params.bn.values():  # identity batch norm in eval mode
    st.running_mean, st.running_var = np.float64(0.0), np.float64(1.0 - st.epsilon)
    st.initialized = True

image = np.array([[[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]]])
question = np.array([[[0.1, 1, 0.2], [0.3, 1, 0], [0, 1, 0.05]]])
utils = [fga.Utility("image", "image", "image", core.constant(image)),
         fga.Utility("question", "question", "question", core.constant(question))]

for u in ("image", "question"):
    params.weight(u, "local").data[...] = 0
    params.weight(u, u).data[...] = 0
for w in (0.0, 1.0, 4.0, 16.0):
    params.weight("image", "question").data[...] = w
    res = fga.run_attention(utils, params)
    print(f"w(question->image) = {w:5.1f}   image belief {np.round(res.beliefs['image'].data[0], 3)}")

print("question belief (prior on the last word):",
      np.round(fga.run_attention(utils, params).beliefs["question"].data[0], 3))
