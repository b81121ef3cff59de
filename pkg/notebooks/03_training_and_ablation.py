"""
Training on the synthetic task, and a feature ablation
======================================================

The synthetic generator paints objects into feature maps and labels every
ordered pair with a predicate from a fixed rule set (class-pair verbs,
spatial relations from the location feature, prepositions, comparatives).
We train the full model and models restricted to single feature blocks.
"""

# %%
import time

from vtranse.data import synth_split
from vtranse.evaluation import predicate_accuracy
from vtranse.training import TrainConfig, train

train_set, test_set = synth_split(0, 300, 100)
print(len(train_set), "train images,", len(test_set), "test images")

# %%
for features in (("classeme", "location", "visual"), ("classeme",), ("location",), ("visual",)):
    t0 = time.perf_counter()
    res = train(train_set, TrainConfig(epochs=5, features=features))
    acc = predicate_accuracy(res.model, test_set)
    print(f"{'+'.join(features):28s} test accuracy {acc:.3f}  ({time.perf_counter() - t0:.1f}s)")

# %% [markdown]
# The margin (distance) loss is a drop-in replacement for the softmax loss.

# %%
res = train(train_set, TrainConfig(epochs=5, loss_kind="margin"))
print("margin loss, test accuracy", round(predicate_accuracy(res.model, test_set), 3))
for row in res.log:
    print(row)
