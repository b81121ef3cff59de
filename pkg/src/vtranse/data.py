"""Datasets: vocabularies, annotation and feature-map files, converters and
a synthetic generator with known ground truth.

On disk a dataset is a directory::

    vocab.json          object / predicate names and predicate types
    <split>.jsonl       one image record per line
    maps/<id>.vtfm      one binary feature map per image

Feature-map files hold the magic ``VTFM``, a u32 version, u32 ``W'``, ``H'``,
``C``, an f64 stride, then ``W' * H' * C`` little-endian f32 values in
``(i', j', c)`` row-major order.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import (
    DegenerateBoxError,
    FormatError,
    GenerationError,
    IntegrityError,
    ParseError,
    TruncationError,
)
from .features import BoundingBox, FeatureMap, location_feature

__all__ = [
    "PREDICATE_TYPES",
    "PredicateTypeTable",
    "Vocabulary",
    "ObjectAnnotation",
    "RelationAnnotation",
    "ImageRecord",
    "Dataset",
    "load_vocabulary",
    "save_vocabulary",
    "load_annotations",
    "save_annotations",
    "load_feature_map",
    "save_feature_map",
    "load_dataset",
    "save_dataset",
    "builtin_predicate_types",
    "convert_vrd",
    "Rule",
    "default_rules",
    "apply_rules",
    "synth_generate",
    "synth_split",
]

PREDICATE_TYPES = ("verb", "spatial", "preposition", "comparative")
BACKGROUND = "__background__"

FMAP_MAGIC = b"VTFM"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sIIIId")


# -- vocabulary ----------------------------------------------------------------


class PredicateTypeTable:
    """Total map from predicate index to one of :data:`PREDICATE_TYPES`."""

    def __init__(self, types):
        types = list(types)
        for i, t in enumerate(types):
            if t not in PREDICATE_TYPES:
                raise ValueError(f"predicate {i} has unknown type {t!r}")
        self._types = types

    def __len__(self):
        return len(self._types)

    def __getitem__(self, predicate):
        return self._types[predicate]

    def __iter__(self):
        return iter(self._types)

    def __eq__(self, other):
        return isinstance(other, PredicateTypeTable) and self._types == other._types

    def predicates_of(self, kind):
        return [i for i, t in enumerate(self._types) if t == kind]


@dataclass
class Vocabulary:
    """Object classes (the background class is implicit at index ``N``)
    and predicates with their types."""

    objects: list
    predicates: list
    predicate_types: PredicateTypeTable = None

    def __post_init__(self):
        self.objects = list(self.objects)
        self.predicates = list(self.predicates)
        for what, names in (("object", self.objects), ("predicate", self.predicates)):
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {what} names")
        if BACKGROUND in self.objects:
            raise ValueError(f"{BACKGROUND!r} is reserved")
        if self.predicate_types is None:
            raise ValueError("vocabulary needs a predicate type for every predicate")
        if not isinstance(self.predicate_types, PredicateTypeTable):
            self.predicate_types = PredicateTypeTable(self.predicate_types)
        if len(self.predicate_types) != len(self.predicates):
            raise ValueError("every predicate must be categorised exactly once")

    @property
    def num_classes(self):
        return len(self.objects)

    @property
    def num_predicates(self):
        return len(self.predicates)

    @property
    def background(self):
        return len(self.objects)

    def to_json(self):
        return {
            "objects": self.objects,
            "predicates": self.predicates,
            "predicate_types": list(self.predicate_types),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["objects"], obj["predicates"], obj["predicate_types"])


def builtin_predicate_types(dataset="vrd"):
    """Predicate name -> type for the published VRD or VG predicate lists."""
    text = resources.files("vtranse.resources").joinpath("predicate_types.json").read_text()
    table = json.loads(text)[dataset]
    return {name: kind for kind, names in table.items() for name in names}


def save_vocabulary(vocab, path):
    Path(path).write_text(json.dumps(vocab.to_json(), indent=1) + "\n")


def load_vocabulary(path):
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path=path, line=exc.lineno) from None
    for key in ("objects", "predicates", "predicate_types"):
        if key not in obj or not isinstance(obj[key], list):
            raise ParseError("missing or non-list entry", path=path, field=key)
    try:
        return Vocabulary.from_json(obj)
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from None


# -- records -------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectAnnotation:
    label: int
    box: BoundingBox


@dataclass(frozen=True)
class RelationAnnotation:
    subject: int
    predicate: int
    object: int


@dataclass
class ImageRecord:
    image_id: str
    width: float
    height: float
    feature_map: str
    objects: list
    relations: list
    proposals: list = None

    def triplets(self):
        """``(subject class, predicate, object class)`` of every relation."""
        return [
            (self.objects[r.subject].label, r.predicate, self.objects[r.object].label)
            for r in self.relations
        ]

    def to_json(self):
        obj = {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "feature_map": self.feature_map,
            "objects": [{"class": o.label, "box": o.box.as_list()} for o in self.objects],
            "relations": [
                {"subject": r.subject, "predicate": r.predicate, "object": r.object}
                for r in self.relations
            ],
        }
        if self.proposals is not None:
            obj["proposals"] = [b.as_list() for b in self.proposals]
        return obj


def _require(obj, key, kind, path, line, prefix=""):
    name = prefix + key
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError("missing field", path=path, line=line, field=name)
    val = obj[key]
    if kind is int:
        ok = isinstance(val, int) and not isinstance(val, bool)
    elif kind is float:
        ok = isinstance(val, (int, float)) and not isinstance(val, bool) and math.isfinite(val)
    else:
        ok = isinstance(val, kind)
    if not ok:
        raise ParseError(f"expected {kind.__name__}", path=path, line=line, field=name)
    return val


def _parse_box(raw, path, line, name, width, height):
    if (
        not isinstance(raw, list)
        or len(raw) != 4
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw)
    ):
        raise ParseError("box must be [x, y, w, h]", path=path, line=line, field=name)
    try:
        return BoundingBox(*map(float, raw)).clamp(width, height)
    except DegenerateBoxError as exc:
        raise ParseError(str(exc), path=path, line=line, field=name) from None


def _parse_record(obj, vocab, path, line):
    image_id = obj.get("image_id") if isinstance(obj, dict) else None
    if isinstance(image_id, int) and not isinstance(image_id, bool):
        image_id = str(image_id)
    if not isinstance(image_id, str):
        raise ParseError("missing or invalid image id", path=path, line=line, field="image_id")
    width = float(_require(obj, "width", float, path, line))
    height = float(_require(obj, "height", float, path, line))
    if width <= 0 or height <= 0:
        raise ParseError("image size must be positive", path=path, line=line, field="width")
    fmap = _require(obj, "feature_map", str, path, line)
    objects = []
    for k, o in enumerate(_require(obj, "objects", list, path, line)):
        pre = f"objects[{k}]."
        label = _require(o, "class", int, path, line, pre)
        if not 0 <= label < vocab.num_classes:
            raise IntegrityError(f"{path}: line {line}: {pre}class {label} out of range")
        box = _parse_box(o["box"] if "box" in o else None, path, line, pre + "box", width, height)
        objects.append(ObjectAnnotation(label, box))
    relations = []
    for k, r in enumerate(_require(obj, "relations", list, path, line)):
        pre = f"relations[{k}]."
        s = _require(r, "subject", int, path, line, pre)
        p = _require(r, "predicate", int, path, line, pre)
        o = _require(r, "object", int, path, line, pre)
        if not (0 <= s < len(objects) and 0 <= o < len(objects)):
            raise IntegrityError(f"{path}: line {line}: {pre} dangling object index")
        if s == o:
            raise IntegrityError(f"{path}: line {line}: {pre} subject equals object")
        if not 0 <= p < vocab.num_predicates:
            raise IntegrityError(f"{path}: line {line}: {pre}predicate {p} out of range")
        relations.append(RelationAnnotation(s, p, o))
    proposals = None
    if "proposals" in obj:
        raw = _require(obj, "proposals", list, path, line)
        proposals = [
            _parse_box(b, path, line, f"proposals[{k}]", width, height)
            for k, b in enumerate(raw)
        ]
    return ImageRecord(image_id, width, height, fmap, objects, relations, proposals)


def load_annotations(path, vocab=None):
    """Read a line-delimited annotation file.

    ``vocab`` is a :class:`Vocabulary` or a path; by default ``vocab.json``
    next to ``path`` is used. Returns ``(records, vocab)`` with records
    sorted by image id.
    """
    path = Path(path)
    if vocab is None:
        vocab = path.parent / "vocab.json"
    if not isinstance(vocab, Vocabulary):
        vocab = load_vocabulary(vocab)
    records = []
    seen = set()
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(exc.msg, path=path, line=lineno) from None
            rec = _parse_record(obj, vocab, path, lineno)
            if rec.image_id in seen:
                raise IntegrityError(f"{path}: line {lineno}: duplicate image id {rec.image_id!r}")
            seen.add(rec.image_id)
            records.append(rec)
    records.sort(key=lambda r: r.image_id)
    return records, vocab


def save_annotations(records, path):
    with open(path, "w") as fh:
        for rec in sorted(records, key=lambda r: r.image_id):
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")


# -- feature maps --------------------------------------------------------------


def save_feature_map(fmap, path):
    """Write ``fmap``; values are stored as float32."""
    W, H, C = fmap.values.shape
    with open(path, "wb") as fh:
        fh.write(_FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, W, H, C, fmap.stride))
        fh.write(np.ascontiguousarray(fmap.values, dtype="<f4").tobytes())


def load_feature_map(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _FMAP_HEADER.size:
        raise TruncationError(f"{path}: header truncated")
    magic, version, W, H, C, stride = _FMAP_HEADER.unpack_from(blob)
    if magic != FMAP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FMAP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if min(W, H, C) < 1 or not (math.isfinite(stride) and stride > 0):
        raise FormatError(f"{path}: invalid dimensions or stride")
    payload = blob[_FMAP_HEADER.size:]
    if len(payload) != 4 * W * H * C:
        raise TruncationError(
            f"{path}: declared {W}x{H}x{C} needs {4 * W * H * C} bytes, found {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(W, H, C)
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{path}: non-finite values in payload")
    return FeatureMap(values, stride)


# -- datasets ------------------------------------------------------------------


@dataclass
class Dataset:
    """Records plus the means to fetch each record's feature map.

    Maps are read lazily from ``root / record.feature_map`` unless already
    present in ``maps`` (keyed by image id).
    """

    vocab: Vocabulary
    records: list
    root: Path = None
    maps: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def feature_map(self, record):
        fmap = self.maps.get(record.image_id)
        if fmap is None:
            if self.root is None:
                raise FileNotFoundError(f"no feature map for image {record.image_id!r}")
            fmap = load_feature_map(Path(self.root) / record.feature_map)
            self.maps[record.image_id] = fmap
        return fmap

    def subset(self, records):
        ids = {r.image_id for r in records}
        maps = {k: v for k, v in self.maps.items() if k in ids}
        return Dataset(self.vocab, list(records), self.root, maps)


def load_dataset(path, vocab=None):
    """Load an annotation file together with its feature maps' location."""
    path = Path(path)
    records, vocab = load_annotations(path, vocab)
    return Dataset(vocab, records, path.parent)


def save_dataset(dataset, directory, split):
    """Write ``vocab.json``, ``<split>.jsonl`` and every feature map."""
    directory = Path(directory)
    (directory / "maps").mkdir(parents=True, exist_ok=True)
    save_vocabulary(dataset.vocab, directory / "vocab.json")
    for rec in dataset.records:
        save_feature_map(dataset.feature_map(rec), directory / rec.feature_map)
    save_annotations(dataset.records, directory / f"{split}.jsonl")
    return directory / f"{split}.jsonl"


def convert_vrd(annotations, objects, predicates, image_sizes=None, min_samples=0,
                stride=16.0):
    """Convert a VRD-style dump into native records and a vocabulary.

    ``annotations`` maps image file names to lists of relations of the form
    ``{"predicate": p, "subject": {"category": c, "bbox": [ymin, ymax, xmin, xmax]},
    "object": {...}}``. ``objects`` and ``predicates`` are the name lists.
    Predicate types come from the published VRD lists. Triplets seen fewer
    than ``min_samples`` times are dropped. Image sizes default to the
    extent of the annotated boxes; feature maps are referenced as
    ``maps/<stem>.vtfm`` and must be produced separately.
    """
    types = builtin_predicate_types("vrd")
    missing = [p for p in predicates if p not in types]
    if missing:
        raise IntegrityError(f"predicates without a known type: {missing}")
    vocab = Vocabulary(objects, predicates, [types[p] for p in predicates])

    counts = {}
    for rels in annotations.values():
        for rel in rels:
            key = (rel["subject"]["category"], rel["predicate"], rel["object"]["category"])
            counts[key] = counts.get(key, 0) + 1

    records = []
    for name in sorted(annotations):
        objs = {}
        rels = []
        extent = [1.0, 1.0]
        for rel in annotations[name]:
            key = (rel["subject"]["category"], rel["predicate"], rel["object"]["category"])
            if counts[key] < min_samples:
                continue
            idx = []
            for role in ("subject", "object"):
                ymin, ymax, xmin, xmax = rel[role]["bbox"]
                extent = [max(extent[0], xmax), max(extent[1], ymax)]
                k = (rel[role]["category"], xmin, ymin, xmax, ymax)
                if k not in objs:
                    objs[k] = len(objs)
                idx.append(objs[k])
            if idx[0] != idx[1]:
                rels.append(RelationAnnotation(idx[0], rel["predicate"], idx[1]))
        if not rels:
            continue
        width, height = (image_sizes or {}).get(name, extent)
        stem = Path(name).stem
        objects_out = [None] * len(objs)
        for (c, x1, y1, x2, y2), k in objs.items():
            objects_out[k] = ObjectAnnotation(
                c, BoundingBox.from_corners(x1, y1, x2, y2).clamp(width, height)
            )
        records.append(
            ImageRecord(stem, float(width), float(height), f"maps/{stem}.vtfm", objects_out, rels)
        )
    return records, vocab


# -- synthetic data ------------------------------------------------------------


@dataclass(frozen=True)
class Rule:
    """One entry of a first-match decision list over a (subject, object) pair.

    Every given condition must hold: subject / object class membership,
    ``t_y < ty_below``, ``t_y > ty_above``, ``t_h > th_above`` on the
    subject-relative location feature.
    """

    predicate: str
    kind: str
    subject_classes: frozenset = None
    object_classes: frozenset = None
    ty_below: float = None
    ty_above: float = None
    th_above: float = None

    def matches(self, subject_class, object_class, loc):
        if self.subject_classes is not None and subject_class not in self.subject_classes:
            return False
        if self.object_classes is not None and object_class not in self.object_classes:
            return False
        if self.ty_below is not None and not loc[1] < self.ty_below:
            return False
        if self.ty_above is not None and not loc[1] > self.ty_above:
            return False
        if self.th_above is not None and not loc[3] > self.th_above:
            return False
        return True

    def clear_of_thresholds(self, loc, margin):
        for value, thr in ((loc[1], self.ty_below), (loc[1], self.ty_above), (loc[3], self.th_above)):
            if thr is not None and abs(value - thr) < margin:
                return False
        return True


def default_rules(num_classes, num_predicates):
    """A total rule set for ``num_predicates`` predicates covering all four types.

    The first predicates are ``ride`` (verb; class-gated and spatial),
    ``above``, ``below``, ``taller than`` and a catch-all ``with``. Beyond
    five, class-pair verbs ``verb<k>`` are inserted ahead of the catch-all.
    """
    if num_classes < 2 or num_predicates < 2:
        raise ValueError("need at least 2 classes and 2 predicates")
    half = max(1, num_classes // 3)
    riders = frozenset(range(half))
    rideable = frozenset(range(half, 2 * half)) or frozenset([num_classes - 1])
    core = [
        Rule("ride", "verb", riders, rideable, ty_below=-0.3),
        Rule("above", "spatial", ty_below=-0.3),
        Rule("below", "spatial", ty_above=0.3),
        Rule("taller than", "comparative", th_above=math.log(1.5)),
    ]
    catch_all = Rule("with", "preposition")
    extra = []
    pairs = [(a, b) for a in range(num_classes) for b in range(num_classes) if a != b]
    for k in range(max(0, num_predicates - 5)):
        if k >= len(pairs):
            raise ValueError("not enough class pairs for the requested predicates")
        a, b = pairs[-1 - k]
        extra.append(Rule(f"verb{k}", "verb", frozenset([a]), frozenset([b])))
    rules = core[: num_predicates - 1] + extra + [catch_all]
    return rules


def apply_rules(rules, subject_class, object_class, loc):
    """Index of the first matching rule, or ``None``."""
    for i, rule in enumerate(rules):
        if rule.matches(subject_class, object_class, loc):
            return i
    return None


def _signatures(num_classes, channels):
    # one-hot class channel plus a shared objectness channel
    sig = np.zeros((num_classes, channels))
    sig[np.arange(num_classes), np.arange(num_classes) % (channels - 1)] = 1.0
    sig[:, channels - 1] = 0.5
    return sig


def _jitter(box, rng, width, height, scale=0.1):
    dx, dy = rng.normal(0.0, scale, 2) * np.array([box.w, box.h])
    sw, sh = np.exp(rng.normal(0.0, scale, 2))
    w, h = box.w * sw, box.h * sh
    cx, cy = box.x + box.w / 2 + dx, box.y + box.h / 2 + dy
    return BoundingBox(cx - w / 2, cy - h / 2, w, h).clamp(width, height)


def synth_generate(seed, n_images, num_classes=6, num_predicates=5, rules=None,
                   image_size=64, stride=4.0, objects_per_image=(3, 5),
                   max_relations=6, margin=0.1, noise=0.05, proposals_per_object=2,
                   id_offset=0):
    """Generate images whose predicates follow a deterministic rule set.

    Objects are boxes painted into the feature map with a class-specific
    channel signature plus Gaussian noise. For every ordered object pair
    the first matching rule gives the predicate; pairs whose location
    feature lies within ``margin`` of any rule threshold are left
    unannotated, and at most ``max_relations`` pairs per image are kept.
    Each image also carries jittered proposal boxes around its objects
    and one random distractor.

    Returns a :class:`Dataset` with in-memory feature maps (values rounded
    to float32 so they survive a save/load round trip unchanged).
    """
    if num_classes < 2 or num_predicates < 2:
        raise ValueError("need at least 2 classes and 2 predicates")
    rules = default_rules(num_classes, num_predicates) if rules is None else list(rules)
    if len(rules) != num_predicates:
        raise ValueError("need exactly one rule per predicate")
    vocab = Vocabulary(
        [f"obj{k}" for k in range(num_classes)],
        [r.predicate for r in rules],
        [r.kind for r in rules],
    )
    rng = np.random.default_rng(seed)
    channels = num_classes + 2
    sig = _signatures(num_classes, channels)
    side = int(image_size // stride)
    coords = np.arange(side) * stride
    lo, hi = 0.15 * image_size, 0.45 * image_size

    records, maps = [], {}
    for n in range(n_images):
        image_id = f"img{id_offset + n:06d}"
        k = int(rng.integers(objects_per_image[0], objects_per_image[1]))
        values = rng.normal(0.0, noise, (side, side, channels))
        objects = []
        for _ in range(k):
            label = int(rng.integers(num_classes))
            w, h = rng.uniform(lo, hi, 2)
            x = rng.uniform(0, image_size - w)
            y = rng.uniform(0, image_size - h)
            box = BoundingBox(x, y, w, h)
            inside_x = (coords >= x) & (coords <= x + w)
            inside_y = (coords >= y) & (coords <= y + h)
            values[np.ix_(inside_x, inside_y)] += sig[label]
            objects.append(ObjectAnnotation(label, box))

        candidates = []
        for i in range(k):
            for j in range(k):
                if i == j:
                    continue
                loc = location_feature(objects[i].box, objects[j].box)
                if not all(r.clear_of_thresholds(loc, margin) for r in rules):
                    continue
                p = apply_rules(rules, objects[i].label, objects[j].label, loc)
                if p is None:
                    raise GenerationError(
                        f"no rule covers classes ({objects[i].label}, {objects[j].label}) "
                        f"at location {loc.round(3).tolist()}"
                    )
                candidates.append(RelationAnnotation(i, p, j))
        if len(candidates) > max_relations:
            pick = np.sort(rng.choice(len(candidates), size=max_relations, replace=False))
            candidates = [candidates[c] for c in pick]

        proposals = []
        for obj in objects:
            proposals.append(obj.box)
            proposals.extend(
                _jitter(obj.box, rng, image_size, image_size) for _ in range(proposals_per_object)
            )
        w, h = rng.uniform(lo, hi, 2)
        proposals.append(
            BoundingBox(rng.uniform(0, image_size - w), rng.uniform(0, image_size - h), w, h)
        )

        values = values.astype(np.float32).astype(np.float64)
        maps[image_id] = FeatureMap(values, stride)
        records.append(
            ImageRecord(
                image_id,
                float(image_size),
                float(image_size),
                f"maps/{image_id}.vtfm",
                objects,
                candidates,
                proposals,
            )
        )
    return Dataset(vocab, records, None, maps)


def synth_split(seed, n_train, n_test, **kwargs):
    """Generate ``n_train + n_test`` images in one stream and split them."""
    full = synth_generate(seed, n_train + n_test, **kwargs)
    return full.subset(full.records[:n_train]), full.subset(full.records[n_train:])
