"""Image-centric training of the object head and the relation model.

Each step uses the objects and relations of a single image. The objective is
``L_obj + rel_loss_weight * L_rel`` with both terms averaged over their own
sample counts. Relation gradients reach the object head through the classeme
block and the box coordinates through the location and visual blocks.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .detector import object_head_backward, object_loss
from .exceptions import ConfigurationError, EmptyBatchError
from .features import (
    bilinear_backward,
    bilinear_sample,
    fuse,
    fuse_backward,
    grid_positions,
    location_feature,
    location_feature_backward,
)
from .numerics import OptimizerState, sgd_momentum_step
from .relspace import RelationModel, margin_loss, sample_negatives, softmax_loss

logger = logging.getLogger(__name__)

__all__ = [
    "FEATURE_BLOCKS",
    "TrainConfig",
    "LossBreakdown",
    "multi_task_loss",
    "image_loss_and_grads",
    "train_image_batch",
    "split_validation",
    "init_model",
    "train",
]

FEATURE_BLOCKS = ("classeme", "location", "visual")
LOSS_KINDS = ("softmax", "margin")


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    rel_loss_weight: float = 0.4
    loss_kind: str = "softmax"
    seed: int = 0
    r: int = 32
    X: int = 2
    Y: int = 2
    init_std: float = 0.01
    negatives: int = 4
    margin: float = 1.0
    features: tuple = FEATURE_BLOCKS
    val_fraction: float = 0.1

    def validate(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be nonnegative")
        if self.rel_loss_weight < 0:
            raise ConfigurationError("rel_loss_weight must be nonnegative")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.r < 1 or self.X < 1 or self.Y < 1:
            raise ConfigurationError("r, X and Y must be >= 1")
        if self.negatives < 1:
            raise ConfigurationError("negatives must be >= 1")
        if not self.features or any(f not in FEATURE_BLOCKS for f in self.features):
            raise ConfigurationError(f"features must be a nonempty subset of {FEATURE_BLOCKS}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError("val_fraction must lie in [0, 1)")
        return self

    @property
    def feature_mask(self):
        return np.array([f in self.features for f in FEATURE_BLOCKS], dtype=np.float64)

    @classmethod
    def from_dict(cls, obj):
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        if "features" in known:
            known["features"] = tuple(known["features"])
        return cls(**known)


@dataclass
class LossBreakdown:
    obj: float
    rel: float
    total: float


def multi_task_loss(obj_loss, rel_loss, rel_weight=0.4):
    """``obj_loss + rel_weight * rel_loss``; both inputs must already be
    normalised by their own sample counts."""
    if obj_loss < 0 or rel_loss < 0 or rel_weight < 0:
        raise ValueError("losses and weight must be nonnegative")
    return obj_loss + rel_weight * rel_loss


def _boxes(record):
    return [o.box for o in record.objects]


def image_loss_and_grads(model, fmap, record, rel_weight=0.4, loss_kind="softmax",
                         negatives=None, margin=1.0, feature_mask=None, boxes=None):
    """Forward and backward pass over one image.

    ``negatives`` is required for the margin loss (one list of corrupted
    predicates per relation). ``boxes`` overrides the record's ground-truth
    boxes, which is how box gradients are checked numerically.

    Returns ``(LossBreakdown, param_grads, box_grads)`` where ``box_grads``
    has one ``(x, y, w, h)`` row per object.
    """
    if not record.objects:
        raise EmptyBatchError("image has no objects")
    boxes = _boxes(record) if boxes is None else boxes
    labels = np.array([o.label for o in record.objects], dtype=np.int64)
    K = len(boxes)
    grids = [grid_positions(b, model.X, model.Y, fmap.stride) for b in boxes]
    visual = np.stack([bilinear_sample(fmap, g).reshape(-1) for g in grids])

    l_obj, probs, d_head_W, d_head_b, d_visual = object_loss(
        visual, labels, model.head_W, model.head_b
    )
    grads = model.zero_grads()
    grads["head_W"] += d_head_W
    grads["head_b"] += d_head_b
    box_grads = np.zeros((K, 4))

    l_rel = 0.0
    if record.relations and rel_weight > 0:
        s_idx = np.array([r.subject for r in record.relations], dtype=np.int64)
        o_idx = np.array([r.object for r in record.relations], dtype=np.int64)
        preds = np.array([r.predicate for r in record.relations], dtype=np.int64)
        loc_s = np.stack([location_feature(boxes[i], boxes[j]) for i, j in zip(s_idx, o_idx)])
        loc_o = np.stack([location_feature(boxes[j], boxes[i]) for i, j in zip(s_idx, o_idx)])
        xs = fuse(probs[s_idx], loc_s, visual[s_idx], model.scales)
        xo = fuse(probs[o_idx], loc_o, visual[o_idx], model.scales)
        if loss_kind == "softmax":
            l_rel, g = softmax_loss(model, xs, xo, preds)
        elif loss_kind == "margin":
            if negatives is None:
                raise ConfigurationError("margin loss needs negatives")
            l_rel, g = margin_loss(model, xs, xo, preds, negatives, margin)
        else:
            raise ConfigurationError(f"unknown loss kind {loss_kind!r}")

        lam = rel_weight
        for name in ("W_s", "W_o", "T"):
            grads[name] += lam * g[name]
        dc_s, dl_s, dv_s, dsc_s = fuse_backward(
            probs[s_idx], loc_s, visual[s_idx], model.scales, lam * g["xs"]
        )
        dc_o, dl_o, dv_o, dsc_o = fuse_backward(
            probs[o_idx], loc_o, visual[o_idx], model.scales, lam * g["xo"]
        )
        grads["scales"] += dsc_s + dsc_o

        d_classeme = np.zeros_like(probs)
        np.add.at(d_classeme, s_idx, dc_s)
        np.add.at(d_classeme, o_idx, dc_o)
        np.add.at(d_visual, s_idx, dv_s)
        np.add.at(d_visual, o_idx, dv_o)
        dW2, db2, dv2 = object_head_backward(visual, model.head_W, probs, d_classeme)
        grads["head_W"] += dW2
        grads["head_b"] += db2
        d_visual += dv2

        for b, (i, j) in enumerate(zip(s_idx, o_idx)):
            d_sub, d_cp = location_feature_backward(boxes[i], boxes[j], dl_s[b])
            box_grads[i] += d_sub
            box_grads[j] += d_cp
            d_sub, d_cp = location_feature_backward(boxes[j], boxes[i], dl_o[b])
            box_grads[j] += d_sub
            box_grads[i] += d_cp

    for k in range(K):
        dV = d_visual[k].reshape(model.X, model.Y, model.C)
        box_grads[k] += bilinear_backward(fmap, grids[k], dV)[2]

    if feature_mask is not None:
        grads["scales"] *= feature_mask
    total = multi_task_loss(l_obj, l_rel, rel_weight)
    return LossBreakdown(l_obj, l_rel, total), grads, box_grads


def _annotated_sets(record):
    by_pair = {}
    for r in record.relations:
        by_pair.setdefault((r.subject, r.object), set()).add(r.predicate)
    return [by_pair[(r.subject, r.object)] for r in record.relations]


def train_image_batch(model, fmap, record, state, config, rng):
    """One momentum-SGD step on a single image, in place.

    Returns ``(LossBreakdown, box_grads)`` or ``None`` when the image has no
    relations (the caller counts skips).
    """
    if not record.relations:
        return None
    negatives = None
    if config.loss_kind == "margin":
        negatives = sample_negatives(
            [r.predicate for r in record.relations],
            _annotated_sets(record),
            model.R,
            config.negatives,
            rng,
        )
        if not any(negatives):
            return None
        if not all(negatives):
            # drop positives whose every predicate is annotated
            keep = [k for k, n in enumerate(negatives) if n]
            record = type(record)(
                record.image_id, record.width, record.height, record.feature_map,
                record.objects, [record.relations[k] for k in keep], record.proposals,
            )
            negatives = [negatives[k] for k in keep]
    losses, grads, box_grads = image_loss_and_grads(
        model,
        fmap,
        record,
        config.rel_loss_weight,
        config.loss_kind,
        negatives,
        config.margin,
        config.feature_mask,
    )
    params = model.params()
    if config.rel_loss_weight == 0:
        # relation parameters are outside the objective: leave them (and
        # their decay) alone so the step is pure object-head training
        params = {k: params[k] for k in ("head_W", "head_b")}
        grads = {k: grads[k] for k in params}
    sgd_momentum_step(params, grads, state)
    return losses, box_grads


def split_validation(records, fraction, rng):
    """Seeded shuffle, then hold out ``round(fraction * n)`` images."""
    order = rng.permutation(len(records))
    n_val = int(round(fraction * len(records)))
    val = sorted((records[i] for i in order[:n_val]), key=lambda r: r.image_id)
    tr = sorted((records[i] for i in order[n_val:]), key=lambda r: r.image_id)
    return tr, val


def scoring_for(loss_kind):
    return "distance" if loss_kind == "margin" else "dot"


def init_model(vocab, channels, config, rng):
    model = RelationModel.init(
        vocab.num_classes, vocab.num_predicates, config.X, config.Y, channels,
        config.r, rng, config.init_std, scoring_for(config.loss_kind),
    )
    model.scales *= config.feature_mask
    return model


@dataclass
class TrainResult:
    model: RelationModel
    log: list = field(default_factory=list)
    skipped: int = 0
    box_grad_norm: float = 0.0


def train(dataset, config, model=None, log_path=None):
    """Train on ``dataset`` for ``config.epochs`` passes.

    A fraction ``config.val_fraction`` of the images is held out for the
    per-epoch predicate accuracy. Everything random flows from
    ``config.seed``. Returns a :class:`TrainResult`; if ``log_path`` is given
    each epoch's record is also appended there as a JSON line.
    """
    from .evaluation import predicate_accuracy

    config.validate()
    if len(dataset) == 0:
        raise ConfigurationError("training set is empty")
    rng = np.random.default_rng(config.seed)
    channels = dataset.feature_map(dataset.records[0]).channels
    if model is None:
        model = init_model(dataset.vocab, channels, config, rng)
    elif (model.N, model.R, model.C, model.X, model.Y) != (
        dataset.vocab.num_classes, dataset.vocab.num_predicates, channels, config.X, config.Y
    ):
        raise ConfigurationError("model dimensions do not match the dataset/config")
    elif model.scoring != scoring_for(config.loss_kind):
        raise ConfigurationError(
            f"a {config.loss_kind}-loss run needs {scoring_for(config.loss_kind)} scoring"
        )

    train_recs, val_recs = split_validation(dataset.records, config.val_fraction, rng)
    val_set = dataset.subset(val_recs)
    state = OptimizerState(config.learning_rate, config.momentum, config.weight_decay)
    result = TrainResult(model)
    if log_path is not None:
        open(log_path, "w").close()

    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        steps = 0
        for idx in rng.permutation(len(train_recs)):
            rec = train_recs[idx]
            out = train_image_batch(model, dataset.feature_map(rec), rec, state, config, rng)
            if out is None:
                result.skipped += 1
                continue
            losses, box_grads = out
            sums += (losses.obj, losses.rel, losses.total)
            result.box_grad_norm += float(np.linalg.norm(box_grads))
            steps += 1
        mean = sums / max(steps, 1)
        entry = {
            "epoch": epoch,
            "L_obj": float(mean[0]),
            "L_rel": float(mean[1]),
            "loss": float(mean[2]),
            "accuracy": predicate_accuracy(model, val_set) if val_recs else None,
        }
        result.log.append(entry)
        logger.info("epoch %d: %s", epoch, entry)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
    if result.skipped:
        logger.warning("skipped %d image steps without usable relations", result.skipped)
    return result


def config_dict(config):
    obj = asdict(config)
    obj["features"] = list(config.features)
    return obj
