"""
Which predicates end up close in relation space?
================================================

After training, the translation vectors ``t_p`` can be compared by cosine
similarity. Listing each predicate's nearest neighbours shows how the
model organises the predicate vocabulary.
"""

# %%
import numpy as np

from vtranse.data import synth_split
from vtranse.relspace import predicate_neighbors
from vtranse.training import TrainConfig, train

train_set, _ = synth_split(0, 300, 0)
model = train(train_set, TrainConfig(epochs=5)).model
names = train_set.vocab.predicates

# %%
for p, name in enumerate(names):
    nbrs = predicate_neighbors(model, p, 2)
    print(f"{name:12s} -> {', '.join(names[q] for q in nbrs)}")

# %%
unit = model.T / np.linalg.norm(model.T, axis=1, keepdims=True)
print("cosine similarity matrix:\n", (unit @ unit.T).round(2))
