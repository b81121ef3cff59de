"""
Relations as translations
=========================

A predicate is modelled as a vector ``t_p`` in a low-dimensional relation
space: projected subject plus translation should land on the projected
object, ``W_s x_s + t_p ~ W_o x_o``. This script builds a tiny model by
hand, scores predicates, and checks the loss gradients numerically.
"""

# %%
import numpy as np

from vtranse.numerics import finite_diff_grad, relative_error, softmax
from vtranse.relspace import (
    RelationModel,
    margin_loss,
    predicate_logits,
    predict_predicate,
    softmax_loss,
    translation_residual,
)

rng = np.random.default_rng(0)

# %% [markdown]
# Two-dimensional relation space, three predicates pointing right, up and
# left. Features are already in relation space (identity projections,
# padded to the fused feature length of a 1-class, 1x1x1 model).

# %%
N, X, Y, C = 1, 1, 1, 1
M = (N + 1) + 4 + X * Y * C
W = np.zeros((2, M))
W[0, 0], W[1, 1] = 1.0, 1.0
T = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
model = RelationModel(W_s=W, W_o=W.copy(), T=T, scales=np.ones(3),
                      head_W=np.zeros((N + 1, X * Y * C)), head_b=np.zeros(N + 1),
                      X=X, Y=Y, C=C)

xs = np.zeros(M)
xs[:2] = [0.2, 0.1]
xo = np.zeros(M)
xo[:2] = [1.2, 0.1]  # the object sits one unit to the right of the subject

print("logits      ", predicate_logits(model, xs, xo))
print("probabilities", softmax(predicate_logits(model, xs, xo)).round(3))
print("prediction  ", predict_predicate(model, xs, xo))
for p in range(3):
    print(f"residual norm for predicate {p}:",
          np.linalg.norm(translation_residual(model, xs, p, xo)).round(3))

# %% [markdown]
# Both training losses come with hand-written gradients. A central finite
# difference confirms them on a random batch.

# %%
model = RelationModel(W_s=rng.normal(size=(3, M)), W_o=rng.normal(size=(3, M)),
                      T=rng.normal(size=(3, 3)), scales=np.ones(3),
                      head_W=np.zeros((N + 1, 1)), head_b=np.zeros(N + 1), X=1, Y=1, C=1)
bs, bo = rng.normal(size=(4, M)), rng.normal(size=(4, M))
preds = np.array([0, 1, 2, 0])
loss, grads = softmax_loss(model, bs, bo, preds)


def loss_of_T(t):
    m = model.copy()
    m.T = t
    return softmax_loss(m, bs, bo, preds)[0]


print("softmax loss", round(loss, 4), "dT rel err",
      relative_error(grads["T"], finite_diff_grad(loss_of_T, model.T)))

negs = [[1], [2], [0], [1, 2]]
loss, grads = margin_loss(model, bs, bo, preds, negs)
print("margin loss ", round(loss, 4))
