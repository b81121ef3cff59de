"""Translation-embedding relation model.

Subject and object features are projected into an ``r``-dimensional relation
space where a predicate acts as a translation vector:
``W_s x_s + t_p ~ W_o x_o``. Predicates are scored by
``t_p . (W_o x_o - W_s x_s)`` and trained either with a softmax loss or a
hinge loss on squared translation distances.

A model trained with the hinge loss scores predicates by negative squared
translation distance instead (``scoring="distance"``), the decision rule that
loss optimises.

Batched functions take ``xs`` and ``xo`` as ``(B, M)`` arrays and integer
predicate indices of shape ``(B,)``.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import (
    ConfigurationError,
    DimensionError,
    EmptyBatchError,
    FormatError,
    TruncationError,
)
from .features import feature_dim
from .numerics import check_finite, log_softmax, matvec, softmax

__all__ = [
    "RelationModel",
    "project",
    "predicate_logits",
    "softmax_loss",
    "margin_loss",
    "sample_negatives",
    "predict_predicate",
    "translation_residual",
    "predicate_neighbors",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"VTRE"
CHECKPOINT_VERSION = 1

SCORINGS = ("dot", "distance")
PARAM_NAMES = ("W_s", "W_o", "T", "scales", "head_W", "head_b")


@dataclass(eq=False)
class RelationModel:
    """All learnable parameters.

    ``W_s``, ``W_o``: ``(r, M)`` projections; ``T``: ``(R, r)`` predicate
    translations; ``scales``: the three feature-block weights; ``head_W``,
    ``head_b``: the toy object classifier over the visual block,
    ``(N + 1, D)`` and ``(N + 1,)``. ``X``, ``Y``, ``C`` record the sampling
    grid and channel count the visual block was built with.
    """

    W_s: np.ndarray
    W_o: np.ndarray
    T: np.ndarray
    scales: np.ndarray
    head_W: np.ndarray
    head_b: np.ndarray
    X: int
    Y: int
    C: int
    scoring: str = "dot"

    def __post_init__(self):
        if self.scoring not in SCORINGS:
            raise ConfigurationError(f"scoring must be one of {SCORINGS}")
        for name in PARAM_NAMES:
            arr = np.array(getattr(self, name), dtype=np.float64)
            check_finite(arr, name)
            setattr(self, name, arr)
        r, M = self.W_s.shape
        if r < 1:
            raise ConfigurationError("relation dimension r must be >= 1")
        if self.W_o.shape != (r, M):
            raise DimensionError("W_s and W_o must have equal shapes")
        if self.T.ndim != 2 or self.T.shape[1] != r:
            raise DimensionError(f"T must be R x {r}")
        if self.scales.shape != (3,):
            raise DimensionError("scales must have 3 entries")
        D = self.X * self.Y * self.C
        if self.head_W.ndim != 2 or self.head_W.shape[1] != D:
            raise DimensionError(f"head_W must be (N+1) x {D}")
        if self.head_b.shape != (self.head_W.shape[0],):
            raise DimensionError("head_b must have N+1 entries")
        if M != feature_dim(self.N, self.X, self.Y, self.C):
            raise DimensionError(
                f"M={M} inconsistent with N={self.N}, X={self.X}, Y={self.Y}, C={self.C}"
            )

    @classmethod
    def init(cls, num_classes, num_predicates, X, Y, C, r=32, rng=None, std=0.01,
             scoring="dot"):
        """Gaussian initialisation (mean 0, ``std``); scales start at 1, biases at 0."""
        rng = np.random.default_rng(rng)
        M = feature_dim(num_classes, X, Y, C)
        D = X * Y * C
        return cls(
            W_s=rng.normal(0.0, std, (r, M)),
            W_o=rng.normal(0.0, std, (r, M)),
            T=rng.normal(0.0, std, (num_predicates, r)),
            scales=np.ones(3),
            head_W=rng.normal(0.0, std, (num_classes + 1, D)),
            head_b=np.zeros(num_classes + 1),
            X=X,
            Y=Y,
            C=C,
            scoring=scoring,
        )

    @property
    def r(self):
        return self.W_s.shape[0]

    @property
    def M(self):
        return self.W_s.shape[1]

    @property
    def R(self):
        return self.T.shape[0]

    @property
    def N(self):
        return self.head_W.shape[0] - 1

    @property
    def D(self):
        return self.X * self.Y * self.C

    def params(self):
        """Live references to the parameter arrays, keyed by name."""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def zero_grads(self):
        return {name: np.zeros_like(arr) for name, arr in self.params().items()}

    def copy(self):
        return RelationModel(
            **{k: v.copy() for k, v in self.params().items()},
            X=self.X, Y=self.Y, C=self.C, scoring=self.scoring,
        )


def project(W, x):
    return matvec(W, x)


def _check_batch(model, xs, xo, predicates=None):
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    xo = np.atleast_2d(np.asarray(xo, dtype=np.float64))
    if xs.shape != xo.shape or xs.shape[1] != model.M:
        raise DimensionError(
            f"features {xs.shape} / {xo.shape} do not match model M={model.M}"
        )
    if xs.shape[0] == 0:
        raise EmptyBatchError("empty relation batch")
    if predicates is None:
        return xs, xo, None
    predicates = np.atleast_1d(np.asarray(predicates, dtype=np.int64))
    if predicates.shape != (xs.shape[0],):
        raise DimensionError("one predicate per instance expected")
    if np.any(predicates < 0) or np.any(predicates >= model.R):
        raise ValueError("predicate index out of range")
    return xs, xo, predicates


def _differences(model, xs, xo):
    return xo @ model.W_o.T - xs @ model.W_s.T


def predicate_logits(model, xs, xo):
    """Predicate scores for one pair or a batch of pairs.

    With dot scoring this is ``t_p . (W_o x_o - W_s x_s)``; with distance
    scoring it is ``-||W_s x_s + t_p - W_o x_o||^2``. Single feature
    vectors give shape ``(R,)``; batches give ``(B, R)``.
    """
    single = np.ndim(xs) == 1
    xs, xo, _ = _check_batch(model, xs, xo)
    diff = _differences(model, xs, xo)
    logits = diff @ model.T.T
    if model.scoring == "distance":
        logits = (
            2.0 * logits
            - np.sum(model.T**2, axis=1)[None, :]
            - np.sum(diff**2, axis=1, keepdims=True)
        )
    return logits[0] if single else logits


def softmax_loss(model, xs, xo, predicates):
    """Mean negative log-likelihood of the true predicates.

    Returns ``(loss, grads)`` where ``grads`` holds ``W_s``, ``W_o``, ``T``,
    ``xs`` and ``xo``.
    """
    xs, xo, predicates = _check_batch(model, xs, xo, predicates)
    B = xs.shape[0]
    diff = _differences(model, xs, xo)
    logits = diff @ model.T.T
    logp = log_softmax(logits)
    rows = np.arange(B)
    loss = -np.mean(logp[rows, predicates])

    dlogits = np.exp(logp)
    dlogits[rows, predicates] -= 1.0
    dlogits /= B
    ddiff = dlogits @ model.T
    grads = {
        "T": dlogits.T @ diff,
        "W_o": ddiff.T @ xo,
        "W_s": -ddiff.T @ xs,
        "xo": ddiff @ model.W_o,
        "xs": -ddiff @ model.W_s,
    }
    return float(loss), grads


def margin_loss(model, xs, xo, predicates, negatives, margin=1.0):
    """Hinge loss on squared translation distances against corrupted predicates.

    For every positive ``(x_s, p, x_o)`` and each corrupted predicate ``q`` in
    ``negatives[b]`` the term is
    ``[d(W_s x_s + t_p, W_o x_o) + margin - d(W_s x_s + t_q, W_o x_o)]_+``
    with ``d`` the squared Euclidean distance. Terms are summed and divided
    by the number of positives. Returns ``(loss, grads)`` like
    :func:`softmax_loss`.
    """
    xs, xo, predicates = _check_batch(model, xs, xo, predicates)
    B = xs.shape[0]
    if len(negatives) != B:
        raise DimensionError("need one list of negatives per positive")
    pos_idx = np.array([b for b in range(B) for _ in negatives[b]], dtype=np.int64)
    neg_pred = np.array([q for b in range(B) for q in negatives[b]], dtype=np.int64)
    if pos_idx.size == 0:
        raise EmptyBatchError("every positive needs at least one corrupted triplet")
    if np.any(neg_pred < 0) or np.any(neg_pred >= model.R):
        raise ValueError("negative predicate index out of range")

    # residual e = W_s x_s + t - W_o x_o = t - diff
    diff = _differences(model, xs, xo)
    e_pos = model.T[predicates[pos_idx]] - diff[pos_idx]
    e_neg = model.T[neg_pred] - diff[pos_idx]
    pre = np.sum(e_pos**2, axis=1) + margin - np.sum(e_neg**2, axis=1)
    active = pre > 0
    loss = np.sum(pre[active]) / B

    ga = (2.0 / B) * active[:, None]
    de_pos = ga * e_pos
    de_neg = -ga * e_neg
    dT = np.zeros_like(model.T)
    np.add.at(dT, predicates[pos_idx], de_pos)
    np.add.at(dT, neg_pred, de_neg)
    ddiff = np.zeros_like(diff)
    np.add.at(ddiff, pos_idx, -(de_pos + de_neg))
    grads = {
        "T": dT,
        "W_o": ddiff.T @ xo,
        "W_s": -ddiff.T @ xs,
        "xo": ddiff @ model.W_o,
        "xs": -ddiff @ model.W_s,
    }
    return float(loss), grads


def sample_negatives(predicates, annotated, num_predicates, k, rng):
    """Corrupt each positive's predicate, uniformly among predicates not
    annotated for that pair, without replacement.

    ``annotated[b]`` is the set of predicates labelled for the pair of
    instance ``b``. Pairs with every predicate annotated get no negatives.
    """
    out = []
    for p, seen in zip(predicates, annotated):
        pool = [q for q in range(num_predicates) if q != p and q not in seen]
        if len(pool) <= k:
            out.append(pool)
        else:
            pick = rng.choice(len(pool), size=k, replace=False)
            out.append([pool[i] for i in sorted(pick)])
    return out


def predict_predicate(model, xs, xo):
    """Most probable predicate and its softmax probability (lowest index on ties)."""
    probs = softmax(predicate_logits(model, xs, xo))
    idx = int(np.argmax(probs))
    return idx, float(probs[idx])


def translation_residual(model, xs, p, xo):
    """``W_s x_s + t_p - W_o x_o``."""
    return project(model.W_s, xs) + model.T[p] - project(model.W_o, xo)


def predicate_neighbors(model, p, k):
    """The ``k`` predicates whose translation vectors are most cosine-similar
    to ``t_p``, most similar first; ties go to the lower index."""
    R = model.R
    if not 0 <= p < R:
        raise ValueError("predicate index out of range")
    if not 0 <= k < R:
        raise ValueError("k must satisfy 0 <= k < R")
    norms = np.linalg.norm(model.T, axis=1)
    if np.any(norms == 0):
        raise ZeroDivisionError("cosine similarity undefined for a zero translation vector")
    unit = model.T / norms[:, None]
    sims = unit @ unit[p]
    others = [q for q in range(R) if q != p]
    others.sort(key=lambda q: (-sims[q], q))
    return others[:k]


# -- checkpoint IO -----------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIIIII")


def save_checkpoint(model, path):
    """Write ``model`` in the versioned little-endian binary format.

    Header: magic ``VTRE``, then u32 version, N, R, M, r, X, Y, C and the
    scoring flag (0 dot, 1 distance). Payload: ``W_s``, ``W_o``, ``T``,
    ``scales``, ``head_W``, ``head_b`` as row-major f64.
    """
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        model.N,
        model.R,
        model.M,
        model.r,
        model.X,
        model.Y,
        model.C,
        SCORINGS.index(model.scoring),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TruncationError(f"{path}: checkpoint header truncated")
    magic, version, N, R, M, r, X, Y, C, scoring = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if M != feature_dim(N, X, Y, C):
        raise FormatError(f"{path}: header M={M} inconsistent with N, X, Y, C")
    if scoring >= len(SCORINGS):
        raise FormatError(f"{path}: unknown scoring flag {scoring}")
    D = X * Y * C
    shapes = {
        "W_s": (r, M),
        "W_o": (r, M),
        "T": (R, r),
        "scales": (3,),
        "head_W": (N + 1, D),
        "head_b": (N + 1,),
    }
    total = sum(int(np.prod(s)) for s in shapes.values())
    payload = blob[_HEADER.size:]
    if len(payload) != 8 * total:
        raise TruncationError(
            f"{path}: expected {8 * total} payload bytes, found {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise FormatError(f"{path}: non-finite parameter values")
    arrays = {}
    offset = 0
    for name in PARAM_NAMES:
        n = int(np.prod(shapes[name]))
        arrays[name] = flat[offset:offset + n].reshape(shapes[name]).copy()
        offset += n
    return RelationModel(**arrays, X=X, Y=Y, C=C, scoring=SCORINGS[scoring])
