"""Visual relation detection with translation embeddings.

Objects are described by a classeme, a relative location and bilinearly
sampled visual features; predicates are translation vectors in a learned
relation space.
"""

from .data import Dataset, Vocabulary, load_dataset, save_dataset, synth_generate, synth_split
from .detector import Detection, RelationPrediction, detect_relations, iou, nms
from .evaluation import evaluate, recall_at_k, retrieval_eval, zero_shot_filter
from .features import BoundingBox, FeatureMap, bilinear_sample, grid_positions, location_feature
from .relspace import RelationModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"
