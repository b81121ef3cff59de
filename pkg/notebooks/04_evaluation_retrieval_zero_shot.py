"""
Recall, retrieval and zero-shot evaluation
==========================================

Predicate prediction ranks predicates for ground-truth pairs; phrase and
relation detection run the full pipeline on proposals and match either the
union box or both boxes at IoU >= 0.5. Retrieval ranks gallery images for
a triplet query.
"""

# %%
from vtranse.data import synth_split
from vtranse.evaluation import (
    detection_predictions,
    evaluate,
    format_report,
    frequent_queries,
    ground_truth_relations,
    retrieval_eval,
)
from vtranse.training import TrainConfig, train

train_set, test_set = synth_split(3, 300, 100)
model = train(train_set, TrainConfig(epochs=5)).model

# %%
print(format_report(evaluate(model, test_set, per_type=True)))

# %% [markdown]
# Zero-shot: keep only test triplets never seen in training.

# %%
print(format_report(evaluate(model, test_set, zero_shot_train=train_set.records)))

# %% [markdown]
# Retrieval with the ten most frequent gallery triplets as queries.

# %%
gt = {rec.image_id: ground_truth_relations(rec) for rec in test_set.records}
preds = {rec.image_id: detection_predictions(model, test_set.feature_map(rec), rec)
         for rec in test_set.records}
queries = frequent_queries(gt, 10)
res = retrieval_eval(queries, preds, gt, model.N, model.R)
print("Rr@5", res.recall_at_5, "Med r", res.median_rank)
print("ranks", res.ranks)
