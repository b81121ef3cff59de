"""Candidate generation and scoring around the relation model: IoU, per-class
NMS, the toy object head, pair enumeration and relation ranking."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DegenerateBoxError, DimensionError
from .features import BoundingBox, fuse, location_feature, visual_feature
from .numerics import log_softmax, softmax
from .relspace import predicate_logits

__all__ = [
    "Detection",
    "RelationPrediction",
    "iou",
    "nms",
    "object_head",
    "object_head_backward",
    "object_loss",
    "classify_boxes",
    "enumerate_pairs",
    "relation_score",
    "pair_features",
    "ground_truth_features",
    "detect_relations",
    "TRAIN_NMS_IOU",
    "TEST_NMS_IOU",
    "MAX_DETECTIONS",
]

TRAIN_NMS_IOU = 0.4
TEST_NMS_IOU = 0.6
MAX_DETECTIONS = 32


@dataclass(frozen=True, eq=False)
class Detection:
    box: BoundingBox
    label: int
    score: float
    classeme: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_classeme(cls, box, classeme):
        """Label and score taken from the classeme's arg-max."""
        classeme = np.asarray(classeme, dtype=np.float64)
        label = int(np.argmax(classeme))
        return cls(box, label, float(classeme[label]), classeme)


@dataclass(frozen=True, eq=False)
class RelationPrediction:
    subject: Detection
    object: Detection
    predicate: int
    score: float
    predicate_score: float = 0.0
    subject_index: int = -1
    object_index: int = -1

    @property
    def triplet(self):
        return (self.subject.label, self.predicate, self.object.label)


def iou(a, b):
    """Intersection over union of two boxes."""
    if not (a.w > 0 and a.h > 0 and b.w > 0 and b.h > 0):
        raise DegenerateBoxError("iou of a degenerate box")
    if (a.x, a.y, a.w, a.h) == (b.x, b.y, b.w, b.h):
        return 1.0
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # rounding can push near-identical boxes a hair above 1
    return min(1.0, inter / (a.area + b.area - inter))


def nms(detections, iou_threshold=TEST_NMS_IOU):
    """Greedy non-maximum suppression, independently per class.

    Within a class the highest-scoring detection is kept and every other
    detection overlapping it with IoU above ``iou_threshold`` is dropped.
    Equal scores go to the lower input index. The survivors are returned
    sorted by descending score.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept = []
    suppressed = set()
    for pos, i in enumerate(order):
        if i in suppressed:
            continue
        kept.append(i)
        di = detections[i]
        for j in order[pos + 1:]:
            if j in suppressed or detections[j].label != di.label:
                continue
            if iou(di.box, detections[j].box) > iou_threshold:
                suppressed.add(j)
    return [detections[i] for i in kept]


def object_head(visual, head_W, head_b):
    """Class probabilities ``softmax(head_W v + head_b)`` for one or many
    flattened visual blocks."""
    visual = np.asarray(visual, dtype=np.float64)
    if visual.shape[-1] != head_W.shape[1]:
        raise DimensionError(
            f"visual block has {visual.shape[-1]} entries, head expects {head_W.shape[1]}"
        )
    return softmax(visual @ head_W.T + head_b)


def object_head_backward(visual, head_W, probs, dprobs):
    """Back-propagate a gradient on the head's probabilities.

    Returns ``(dW, db, dvisual)``; batched input sums over the batch.
    """
    visual = np.atleast_2d(visual)
    probs = np.atleast_2d(probs)
    dprobs = np.atleast_2d(dprobs)
    dlogits = probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))
    return dlogits.T @ visual, dlogits.sum(axis=0), dlogits @ head_W


def object_loss(visual, labels, head_W, head_b):
    """Mean cross-entropy of the object head. Returns ``(loss, probs, dW, db, dvisual)``."""
    visual = np.atleast_2d(np.asarray(visual, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n = visual.shape[0]
    logp = log_softmax(visual @ head_W.T + head_b)
    rows = np.arange(n)
    loss = -np.mean(logp[rows, labels])
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return float(loss), probs, dlogits.T @ visual, dlogits.sum(axis=0), dlogits @ head_W


def classify_boxes(fmap, boxes, model, drop_background=True):
    """Run the object head over ``boxes`` and wrap the results as detections.

    The background class is the last index, ``N``.
    """
    out = []
    for box in boxes:
        v, _ = visual_feature(fmap, box, model.X, model.Y)
        det = Detection.from_classeme(box, object_head(v, model.head_W, model.head_b))
        if drop_background and det.label == model.N:
            continue
        out.append(det)
    return out


def enumerate_pairs(detections):
    n = len(detections)
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def relation_score(subject_score, predicate_score, object_score):
    return subject_score + predicate_score + object_score


def pair_features(model, fmap, boxes, classemes, pairs, visual=None):
    """Fused subject and object features for each ordered pair.

    Returns ``(xs, xo)`` with shape ``(len(pairs), M)``.
    """
    if visual is None:
        visual = np.stack([visual_feature(fmap, b, model.X, model.Y)[0] for b in boxes])
    classemes = np.asarray(classemes, dtype=np.float64)
    s_idx = np.array([p[0] for p in pairs], dtype=np.int64)
    o_idx = np.array([p[1] for p in pairs], dtype=np.int64)
    loc_s = np.stack([location_feature(boxes[i], boxes[j]) for i, j in pairs])
    loc_o = np.stack([location_feature(boxes[j], boxes[i]) for i, j in pairs])
    xs = fuse(classemes[s_idx], loc_s, visual[s_idx], model.scales)
    xo = fuse(classemes[o_idx], loc_o, visual[o_idx], model.scales)
    return xs, xo


def ground_truth_features(model, fmap, record):
    """Features of every annotated pair in ``record`` built on its
    ground-truth boxes, with classemes from the object head.

    Returns ``(xs, xo, predicates)``.
    """
    boxes = [o.box for o in record.objects]
    visual = np.stack([visual_feature(fmap, b, model.X, model.Y)[0] for b in boxes])
    classemes = object_head(visual, model.head_W, model.head_b)
    pairs = [(r.subject, r.object) for r in record.relations]
    xs, xo = pair_features(model, fmap, boxes, classemes, pairs, visual)
    return xs, xo, np.array([r.predicate for r in record.relations], dtype=np.int64)


def _check_config(model, fmap, detections):
    if fmap.channels != model.C:
        raise ConfigurationError(
            f"feature map has {fmap.channels} channels, model expects {model.C}"
        )
    for d in detections:
        if d.classeme is None or np.shape(d.classeme) != (model.N + 1,):
            raise ConfigurationError(
                f"detections need a classeme of length N+1={model.N + 1}"
            )


def detect_relations(fmap, detections, model, top_k=None):
    """Score every predicate for every ordered pair of detections.

    Each candidate scores ``S = S_s + S_p + S_o`` where ``S_p`` is the
    softmax probability of the predicate. Candidates are ordered by
    descending ``S``, then subject index, object index and predicate index,
    and truncated to ``top_k`` if given.
    """
    _check_config(model, fmap, detections)
    pairs = enumerate_pairs(detections)
    if not pairs:
        return []
    boxes = [d.box for d in detections]
    xs, xo = pair_features(model, fmap, boxes, [d.classeme for d in detections], pairs)
    probs = softmax(predicate_logits(model, xs, xo))
    cands = []
    for k, (i, j) in enumerate(pairs):
        si, sj = detections[i].score, detections[j].score
        for p in range(model.R):
            cands.append((relation_score(si, probs[k, p], sj), i, j, p, probs[k, p]))
    cands.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    if top_k is not None:
        cands = cands[:top_k]
    return [
        RelationPrediction(
            detections[i], detections[j], p, float(s), float(sp), i, j
        )
        for s, i, j, p, sp in cands
    ]
