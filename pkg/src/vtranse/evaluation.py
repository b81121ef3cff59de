"""Evaluation protocol: predicate prediction, phrase and relation detection,
relation retrieval, zero-shot filtering and per-predicate-type breakdown.

Predictions and ground truth are passed per image as dicts keyed by image id.
Predictions for an image must already be sorted by descending score.
"""

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import PREDICATE_TYPES
from .detector import (
    MAX_DETECTIONS,
    TEST_NMS_IOU,
    Detection,
    RelationPrediction,
    classify_boxes,
    detect_relations,
    ground_truth_features,
    iou,
    nms,
    object_head,
    pair_features,
)
from .exceptions import ConfigurationError, QueryError
from .features import visual_feature
from .numerics import softmax
from .relspace import predicate_logits

__all__ = [
    "MODES",
    "TASKS",
    "GroundTruthRelation",
    "ground_truth_relations",
    "match_overlap",
    "match_relation",
    "recall_hits",
    "recall_at_k",
    "per_type_breakdown",
    "RetrievalResult",
    "retrieval_eval",
    "frequent_queries",
    "zero_shot_filter",
    "zero_shot_records",
    "predicate_accuracy",
    "predicate_task_predictions",
    "detection_predictions",
    "evaluate",
    "map_images",
    "format_report",
]

MODES = ("predicate", "phrase", "relation")
TASKS = {"predicate": "predicate", "phrase": "phrase", "relation": "relation"}
MIN_OVERLAP = 0.5


@dataclass(frozen=True)
class GroundTruthRelation:
    image_id: str
    subject_label: int
    subject_box: object
    object_label: int
    object_box: object
    predicate: int

    @property
    def triplet(self):
        return (self.subject_label, self.predicate, self.object_label)


def ground_truth_relations(record):
    out = []
    for r in record.relations:
        s, o = record.objects[r.subject], record.objects[r.object]
        out.append(
            GroundTruthRelation(record.image_id, s.label, s.box, o.label, o.box, r.predicate)
        )
    return out


def match_overlap(pred, gt, mode):
    """Overlap score if ``pred`` matches ``gt`` in ``mode``, else ``None``.

    Relation mode needs both boxes at IoU >= 0.5 (score: the smaller IoU);
    phrase mode compares the union boxes; predicate mode only compares
    classes and predicate (score 1).
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown match mode {mode!r}")
    if (pred.subject.label, pred.predicate, pred.object.label) != gt.triplet:
        return None
    if mode == "predicate":
        return 1.0
    if mode == "relation":
        ov = min(iou(pred.subject.box, gt.subject_box), iou(pred.object.box, gt.object_box))
    else:
        ov = iou(pred.subject.box.union(pred.object.box), gt.subject_box.union(gt.object_box))
    return ov if ov >= MIN_OVERLAP else None


def match_relation(pred, gt, mode):
    return match_overlap(pred, gt, mode) is not None


def _image_hits(preds, gts, K, mode):
    hit = [False] * len(gts)
    for pred in preds[:K]:
        best, best_ov = None, -1.0
        for g, gt in enumerate(gts):
            if hit[g]:
                continue
            ov = match_overlap(pred, gt, mode)
            if ov is not None and ov > best_ov:
                best, best_ov = g, ov
        if best is not None:
            hit[best] = True
    return hit


def recall_hits(predictions, ground_truth, K, mode):
    """Per-image list of booleans: is each ground-truth relation recovered
    by the image's top-``K`` predictions? Matching is one-to-one and greedy
    in score order; a prediction takes the best-overlapping free match."""
    if K <= 0:
        raise ConfigurationError("K must be positive")
    if mode not in MODES:
        raise ConfigurationError(f"unknown match mode {mode!r}")
    return {
        image_id: _image_hits(predictions.get(image_id, []), gts, K, mode)
        for image_id, gts in ground_truth.items()
    }


def _recall(hits):
    total = sum(len(h) for h in hits.values())
    if total == 0:
        return None
    return sum(sum(h) for h in hits.values()) / total


def recall_at_k(predictions, ground_truth, K, mode):
    """Fraction of ground-truth relations found in their image's top-K.

    Returns ``None`` when there is no ground truth at all.
    """
    return _recall(recall_hits(predictions, ground_truth, K, mode))


def per_type_breakdown(hits, ground_truth, table):
    """Recall restricted to each predicate type; ``None`` for types without
    ground truth. ``hits`` comes from :func:`recall_hits`."""
    counts = {t: [0, 0] for t in PREDICATE_TYPES}
    for image_id, gts in ground_truth.items():
        for gt, h in zip(gts, hits[image_id]):
            try:
                kind = table[gt.predicate]
            except (IndexError, KeyError):
                raise ConfigurationError(f"predicate {gt.predicate} has no type") from None
            counts[kind][0] += int(h)
            counts[kind][1] += 1
    return {t: (c[0] / c[1] if c[1] else None) for t, c in counts.items()}


@dataclass
class RetrievalResult:
    recall_at_5: float
    median_rank: float
    ranks: list
    rankings: list


def retrieval_eval(queries, predictions, ground_truth, num_classes, num_predicates):
    """Relation retrieval over a gallery of images.

    For each ``(subject class, predicate, object class)`` query, gallery
    images are ranked by the mean score of their predictions of that
    triplet; images without any such prediction come last, ties by image
    id. An image is a hit if one of its query predictions matches a ground
    truth relation in relation mode. A query never hit gets rank
    ``len(gallery) + 1``. Returns Rr@5, the median first-hit rank, per-query
    ranks and per-query ``[(image_id, score or None), ...]`` rankings.
    """
    gallery = sorted(set(predictions) | set(ground_truth))
    ranks, rankings = [], []
    for q in queries:
        s, p, o = q
        if not (0 <= s < num_classes and 0 <= o < num_classes and 0 <= p < num_predicates):
            raise QueryError(f"query {tuple(q)} is outside the vocabulary")
        q = (s, p, o)
        scored, unscored = [], []
        hit = {}
        for image_id in gallery:
            mine = [pr for pr in predictions.get(image_id, []) if pr.triplet == q]
            gts = [g for g in ground_truth.get(image_id, []) if g.triplet == q]
            hit[image_id] = any(match_relation(pr, g, "relation") for pr in mine for g in gts)
            if mine:
                scored.append((-float(np.mean([pr.score for pr in mine])), image_id))
            else:
                unscored.append(image_id)
        scored.sort()
        order = [(img, -neg) for neg, img in scored] + [(img, None) for img in unscored]
        rank = len(gallery) + 1
        for pos, (img, score) in enumerate(order, start=1):
            if score is not None and hit[img]:
                rank = pos
                break
        ranks.append(rank)
        rankings.append(order)
    if not ranks:
        return RetrievalResult(None, None, [], [])
    # the sentinel is not a hit even when the gallery has fewer than 5 images
    sentinel = len(gallery) + 1
    rr5 = float(np.mean([r <= 5 and r != sentinel for r in ranks]))
    return RetrievalResult(rr5, float(np.median(ranks)), ranks, rankings)


def frequent_queries(ground_truth, n):
    """The ``n`` most frequent triplets (ties by triplet order)."""
    counts = Counter(g.triplet for gts in ground_truth.values() for g in gts)
    return [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]


def zero_shot_filter(train_gt, test_gt):
    """Test relations whose triplet never occurs in the training ground truth."""
    seen = {g.triplet for g in train_gt}
    return [g for g in test_gt if g.triplet not in seen]


def zero_shot_records(train_records, test_records):
    """Copies of the test records keeping only zero-shot relations."""
    seen = {t for rec in train_records for t in rec.triplets()}
    out = []
    for rec in test_records:
        rels = [
            r for r, t in zip(rec.relations, rec.triplets()) if t not in seen
        ]
        out.append(type(rec)(rec.image_id, rec.width, rec.height, rec.feature_map,
                             rec.objects, rels, rec.proposals))
    return out


# -- running the model over a dataset -----------------------------------------


def predicate_accuracy(model, dataset):
    """Top-1 predicate accuracy on ground-truth pairs; ``None`` without relations."""
    correct = total = 0
    for rec in dataset.records:
        if not rec.relations:
            continue
        xs, xo, preds = ground_truth_features(model, dataset.feature_map(rec), rec)
        guess = np.argmax(predicate_logits(model, xs, xo), axis=1)
        correct += int(np.sum(guess == preds))
        total += len(preds)
    return correct / total if total else None


def predicate_task_predictions(model, fmap, record):
    """Rank every predicate for every annotated ground-truth pair.

    Subject and object scores are 1 (the objects are given); candidates are
    ordered like :func:`~vtranse.detector.detect_relations`.
    """
    pairs = sorted({(r.subject, r.object) for r in record.relations})
    if not pairs:
        return []
    boxes = [o.box for o in record.objects]
    visual = np.stack([visual_feature(fmap, b, model.X, model.Y)[0] for b in boxes])
    classemes = object_head(visual, model.head_W, model.head_b)
    dets = [
        Detection(o.box, o.label, 1.0, classemes[k]) for k, o in enumerate(record.objects)
    ]
    xs, xo = pair_features(model, fmap, boxes, classemes, pairs, visual)
    probs = softmax(predicate_logits(model, xs, xo))
    cands = []
    for k, (i, j) in enumerate(pairs):
        for p in range(model.R):
            cands.append((2.0 + probs[k, p], i, j, p, probs[k, p]))
    cands.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    return [
        RelationPrediction(dets[i], dets[j], p, float(s), float(sp), i, j)
        for s, i, j, p, sp in cands
    ]


def detection_predictions(model, fmap, record, top_k=100, nms_iou=TEST_NMS_IOU,
                          max_detections=MAX_DETECTIONS):
    """Full detection path: classify proposals, per-class NMS, cap, rank pairs.

    Images without proposals fall back to their ground-truth boxes as
    proposals.
    """
    proposals = record.proposals
    if proposals is None:
        proposals = [o.box for o in record.objects]
    dets = nms(classify_boxes(fmap, proposals, model), nms_iou)[:max_detections]
    return detect_relations(fmap, dets, model, top_k)


def map_images(fn, items, jobs=1):
    """``[fn(x) for x in items]``, optionally on a thread pool; order is kept."""
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def evaluate(model, dataset, tasks=("predicate", "phrase", "relation"), ks=(50, 100),
             per_type=False, zero_shot_train=None, jobs=1):
    """Run the recall protocol and return report rows.

    Each row is a dict with ``task``, ``mode``, ``subset``, ``K`` and
    ``value`` (``None`` when undefined). ``zero_shot_train`` (training
    records) restricts the ground truth to zero-shot triplets.
    """
    for t in tasks:
        if t not in TASKS:
            raise ConfigurationError(f"unknown task {t!r}")
    if dataset.vocab.num_predicates != model.R or dataset.vocab.num_classes != model.N:
        raise ConfigurationError("checkpoint and dataset vocabularies differ")
    records = dataset.records
    if zero_shot_train is not None:
        records = zero_shot_records(zero_shot_train, records)
    gt = {rec.image_id: ground_truth_relations(rec) for rec in records}
    kmax = max(ks)
    subset = "zero-shot" if zero_shot_train is not None else "all"

    rows = []
    for task in tasks:
        if task == "predicate":
            fn = lambda rec: predicate_task_predictions(model, dataset.feature_map(rec), rec)
        else:
            fn = lambda rec: detection_predictions(model, dataset.feature_map(rec), rec, kmax)
        preds = dict(zip([r.image_id for r in records], map_images(fn, records, jobs)))
        mode = TASKS[task]
        for K in ks:
            hits = recall_hits(preds, gt, K, mode)
            rows.append(dict(task=task, mode=mode, subset=subset, K=K, value=_recall(hits)))
            if per_type:
                for kind, val in per_type_breakdown(hits, gt, dataset.vocab.predicate_types).items():
                    rows.append(dict(task=task, mode=mode, subset=kind, K=K, value=val))
    return rows


def format_report(rows):
    """Tab-separated ``task mode subset K value`` lines with a header."""
    lines = ["task\tmode\tsubset\tK\tvalue"]
    for r in rows:
        val = "NA" if r["value"] is None else f"{r['value']:.6f}"
        lines.append(f"{r['task']}\t{r['mode']}\t{r['subset']}\t{r['K']}\t{val}")
    return "\n".join(lines) + "\n"
