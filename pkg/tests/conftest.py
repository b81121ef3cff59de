"""Shared fixtures, random-instance builders and brute-force oracles.

The oracles here are written in plain Python (``math``, loops, itertools)
and deliberately avoid the library's own helpers, so a test comparing the
two checks the implementation against an independent computation.
"""

import itertools
import math

import numpy as np
import pytest

from vtranse.detector import Detection, RelationPrediction
from vtranse.evaluation import GroundTruthRelation
from vtranse.features import BoundingBox, FeatureMap, feature_dim, visual_feature
from vtranse.relspace import RelationModel


# -- random instances -----------------------------------------------------------


def random_box(rng, extent=20.0, min_side=1.0, max_side=8.0):
    w, h = rng.uniform(min_side, max_side, 2)
    x, y = rng.uniform(0.0, extent - w), rng.uniform(0.0, extent - h)
    return BoundingBox(float(x), float(y), float(w), float(h))


def random_fmap(rng, W=6, H=5, C=2, stride=1.0):
    return FeatureMap(rng.normal(size=(W, H, C)), stride)


def random_model(rng, N=3, R=4, X=2, Y=2, C=2, r=5, scale=0.5, scoring="dot"):
    M = feature_dim(N, X, Y, C)
    return RelationModel(
        W_s=rng.normal(0, scale, (r, M)),
        W_o=rng.normal(0, scale, (r, M)),
        T=rng.normal(0, scale, (R, r)),
        scales=rng.uniform(0.5, 1.5, 3),
        head_W=rng.normal(0, scale, (N + 1, X * Y * C)),
        head_b=rng.normal(0, scale, N + 1),
        X=X,
        Y=Y,
        C=C,
        scoring=scoring,
    )


def random_detection(rng, num_classes, extent=20.0):
    probs = rng.dirichlet(np.ones(num_classes + 1))
    return Detection.from_classeme(random_box(rng, extent), probs)


def make_prediction(subject_label, subject_box, predicate, object_label, object_box, score):
    s = Detection(subject_box, subject_label, 1.0)
    o = Detection(object_box, object_label, 1.0)
    return RelationPrediction(s, o, predicate, float(score))


def make_gt(image_id, subject_label, subject_box, predicate, object_label, object_box):
    return GroundTruthRelation(image_id, subject_label, subject_box, object_label,
                               object_box, predicate)


def _jitter(rng, box, amount):
    d = rng.uniform(-amount, amount, 4) * np.array([box.w, box.h, box.w, box.h])
    return BoundingBox(box.x + d[0], box.y + d[1], max(0.5, box.w + d[2]), max(0.5, box.h + d[3]))


def random_instance(rng, n_images=None, n_classes=2, n_predicates=3):
    """<= 5 images, <= 5 boxes each, <= 3 predicates; predictions reuse
    jittered ground-truth boxes so that every match mode fires."""
    n_images = n_images or int(rng.integers(1, 6))
    preds, gt = {}, {}
    for k in range(n_images):
        image_id = f"im{k}"
        pool = [BoundingBox(*rng.uniform(0, 20, 2), *rng.uniform(2, 8, 2))
                for _ in range(int(rng.integers(2, 6)))]
        labels = rng.integers(0, n_classes, len(pool))
        g = []
        for _ in range(int(rng.integers(0, 4))):
            i, j = rng.choice(len(pool), 2, replace=False)
            g.append(make_gt(image_id, int(labels[i]), pool[i], int(rng.integers(n_predicates)),
                             int(labels[j]), pool[j]))
        p = []
        for _ in range(int(rng.integers(0, 6))):
            i, j = rng.choice(len(pool), 2, replace=False)
            amount = float(rng.choice([0.0, 0.1, 0.4]))
            p.append(make_prediction(int(labels[i]), _jitter(rng, pool[i], amount),
                                     int(rng.integers(n_predicates)), int(labels[j]),
                                     _jitter(rng, pool[j], amount),
                                     float(rng.choice([1.0, 2.0, rng.uniform(0, 3)]))))
        p.sort(key=lambda x: -x.score)
        if p or rng.uniform() < 0.8:
            preds[image_id] = p
        gt[image_id] = g
    return preds, gt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- plain-python oracles -------------------------------------------------------


def iou_oracle(a, b):
    """IoU from corner coordinates."""
    ax1, ay1, ax2, ay2 = a.x, a.y, a.x + a.w, a.y + a.h
    bx1, by1, bx2, by2 = b.x, b.y, b.x + b.w, b.y + b.h
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def union_box_oracle(a, b):
    x1, y1 = min(a.x, b.x), min(a.y, b.y)
    x2, y2 = max(a.x + a.w, b.x + b.w), max(a.y + a.h, b.y + b.h)
    return BoundingBox(x1, y1, x2 - x1, y2 - y1)


def location_oracle(s, o):
    return [(s.x - o.x) / o.w, (s.y - o.y) / o.h, math.log(s.w / o.w), math.log(s.h / o.h)]


def bilinear_oracle(values, gx, gy):
    """Direct double sum of the tent-kernel interpolation over every cell."""
    W, H, C = values.shape
    out = [0.0] * C
    for i in range(W):
        ki = max(0.0, 1.0 - abs(i - gx))
        if ki == 0.0:
            continue
        for j in range(H):
            kj = max(0.0, 1.0 - abs(j - gy))
            if kj == 0.0:
                continue
            for c in range(C):
                out[c] += values[i, j, c] * ki * kj
    return out


def nms_oracle(dets, threshold):
    """Exhaustive search for the self-consistent keep set.

    A detection survives iff no surviving detection of the same class with
    higher priority (score, then lower index) overlaps it above the
    threshold. Exactly one subset satisfies this; find it by enumeration.
    """
    n = len(dets)

    def before(a, b):
        return (dets[a].score, -a) > (dets[b].score, -b)

    solutions = []
    for mask in itertools.product([False, True], repeat=n):
        kept = {i for i in range(n) if mask[i]}
        ok = True
        for d in range(n):
            blocked = any(
                e in kept and before(e, d) and dets[e].label == dets[d].label
                and iou_oracle(dets[e].box, dets[d].box) > threshold
                for e in range(n)
            )
            if (d in kept) == blocked:
                ok = False
                break
        if ok:
            solutions.append(kept)
    assert len(solutions) == 1
    kept = solutions[0]
    return sorted(kept, key=lambda i: (-dets[i].score, i))


def match_oracle(pred, gt, mode):
    if (pred.subject.label, pred.predicate, pred.object.label) != (
        gt.subject_label, gt.predicate, gt.object_label
    ):
        return None
    if mode == "predicate":
        return 1.0
    if mode == "relation":
        a = iou_oracle(pred.subject.box, gt.subject_box)
        b = iou_oracle(pred.object.box, gt.object_box)
        ov = min(a, b)
    else:
        ov = iou_oracle(
            union_box_oracle(pred.subject.box, pred.object.box),
            union_box_oracle(gt.subject_box, gt.object_box),
        )
    return ov if ov >= 0.5 else None


def image_hits_oracle(preds, gts, K, mode):
    """Overlap table first, then a greedy sweep in score order."""
    table = [[match_oracle(p, g, mode) for g in gts] for p in preds[:K]]
    taken = set()
    for row in table:
        free = [(ov, -g) for g, ov in enumerate(row) if ov is not None and g not in taken]
        if free:
            taken.add(-max(free)[1])
    return [g in taken for g in range(len(gts))]


def recall_oracle(predictions, ground_truth, K, mode):
    hit = total = 0
    for image_id, gts in ground_truth.items():
        flags = image_hits_oracle(predictions.get(image_id, []), gts, K, mode)
        hit += sum(flags)
        total += len(flags)
    return None if total == 0 else hit / total


def retrieval_oracle(queries, predictions, ground_truth):
    gallery = sorted(set(predictions) | set(ground_truth))
    ranks = []
    for q in queries:
        keyed = []
        hits = {}
        for img in gallery:
            scores = [p.score for p in predictions.get(img, []) if
                      (p.subject.label, p.predicate, p.object.label) == tuple(q)]
            mean = sum(scores) / len(scores) if scores else None
            # images without a prediction of the query sort after all others
            keyed.append(((0, -mean) if scores else (1, 0.0), img))
            hits[img] = any(
                match_oracle(p, g, "relation") is not None
                for p in predictions.get(img, [])
                if (p.subject.label, p.predicate, p.object.label) == tuple(q)
                for g in ground_truth.get(img, [])
            )
        keyed.sort()
        rank = len(gallery) + 1
        for pos, ((missing, _), img) in enumerate(keyed, start=1):
            if not missing and hits[img]:
                rank = pos
                break
        ranks.append(rank)
    if not ranks:
        return None, None, []
    srt = sorted(ranks)
    m = len(srt)
    median = srt[m // 2] if m % 2 else (srt[m // 2 - 1] + srt[m // 2]) / 2
    found = [r for r in ranks if r <= len(gallery)]
    return sum(r <= 5 for r in found) / m, float(median), ranks


def detect_relations_oracle(fmap, dets, m):
    """Every (i, j, p) scored from scratch with explicit loops, then sorted."""
    cands = []
    for i, j in itertools.permutations(range(len(dets)), 2):
        feats = []
        for a, b in ((i, j), (j, i)):
            v, _ = visual_feature(fmap, dets[a].box, m.X, m.Y)
            feats.append(np.concatenate([
                m.scales[0] * dets[a].classeme,
                m.scales[1] * np.array(location_oracle(dets[a].box, dets[b].box)),
                m.scales[2] * v,
            ]))
        xs, xo = feats
        logits = [float(m.T[p] @ (m.W_o @ xo - m.W_s @ xs)) for p in range(m.R)]
        top = max(logits)
        z = sum(math.exp(l - top) for l in logits)
        for p in range(m.R):
            sp = math.exp(logits[p] - top) / z
            cands.append((dets[i].score + sp + dets[j].score, i, j, p))
    cands.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    return cands
