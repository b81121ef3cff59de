"""Command-line front end: ``vtranse {synth,train,eval,detect,retrieve}``.

Options may also come from a JSON file given with ``--config``; keys are
the long option names with dashes replaced by underscores. Explicit flags
win over the file.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import load_dataset, load_annotations, save_dataset, synth_split
from .evaluation import (
    detection_predictions,
    evaluate,
    format_report,
    frequent_queries,
    map_images,
    ground_truth_relations,
    retrieval_eval,
)
from .exceptions import ConfigurationError, DataError, NumericError, QueryError, VTransEError
from .relspace import load_checkpoint, save_checkpoint
from .training import FEATURE_BLOCKS, TrainConfig, config_dict, train

logger = logging.getLogger("vtranse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# defaults applied after config-file merging, so "unset" stays detectable
DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "n_train": 500,
    "n_test": 200,
    "classes": 6,
    "predicates": 5,
    "top_k": 100,
    "tasks": ["predicate", "phrase", "relation"],
    "k": [50, 100],
    "per_type": False,
    "num_queries": 1000,
}


def _common(p):
    p.add_argument("--config", type=Path, help="JSON file with option defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="parallel workers for per-image work")
    p.add_argument("--out", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="vtranse", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--predicates", type=int)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", type=Path, help="training annotation file")
    p.add_argument("--log", type=Path, help="per-epoch metrics (JSON lines)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--rel-loss-weight", type=float)
    p.add_argument("--loss-kind", choices=["softmax", "margin"])
    p.add_argument("--r", type=int)
    p.add_argument("--X", type=int)
    p.add_argument("--Y", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--features", nargs="+", choices=FEATURE_BLOCKS)

    p = sub.add_parser("eval", help="recall report for predicate/phrase/relation tasks")
    _common(p)
    p.add_argument("--data", type=Path, help="test annotation file")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--tasks", nargs="+", choices=["predicate", "phrase", "relation"])
    p.add_argument("--k", type=int, nargs="+")
    p.add_argument("--per-type", action="store_true", default=None)
    p.add_argument("--zero-shot", type=Path, metavar="TRAIN",
                   help="training annotations; keep only unseen test triplets")

    p = sub.add_parser("detect", help="write ranked relation detections")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--top-k", type=int)

    p = sub.add_parser("retrieve", help="relation retrieval over a gallery")
    _common(p)
    p.add_argument("--data", type=Path, help="gallery annotation file")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--queries", type=Path,
                   help="one 'subject,predicate,object' per line (names or indices)")
    p.add_argument("--num-queries", type=int,
                   help="without --queries: use this many frequent gallery triplets")
    p.add_argument("--top-k", type=int)
    return parser


def resolve(args):
    """Merge defaults < config file < explicit flags into a plain dict."""
    opts = {}
    if args.config is not None:
        try:
            loaded = json.loads(args.config.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc.msg})") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        opts.update(loaded)
    for key, val in vars(args).items():
        if val is not None:
            opts[key] = val
    for key, val in DEFAULTS.items():
        opts.setdefault(key, val)
    return opts


def _path(opts, key, must_exist=True):
    val = opts.get(key)
    if val is None:
        raise UsageError(f"--{key.replace('_', '-')} is required")
    path = Path(val)
    if must_exist and not path.exists():
        raise UsageError(f"{key.replace('_', '-')} path does not exist: {path}")
    return path


def cmd_synth(opts):
    out = _path(opts, "out", must_exist=False)
    train_set, test_set = synth_split(
        opts["seed"], opts["n_train"], opts["n_test"],
        num_classes=opts["classes"], num_predicates=opts["predicates"],
    )
    save_dataset(train_set, out, "train")
    save_dataset(test_set, out, "test")
    print(f"wrote {len(train_set)} train and {len(test_set)} test images to {out}")
    return EXIT_OK


def cmd_train(opts):
    data = _path(opts, "data")
    out = _path(opts, "out", must_exist=False)
    cfg = TrainConfig.from_dict(opts)
    cfg.validate()
    dataset = load_dataset(data)
    result = train(dataset, cfg, log_path=opts.get("log"))
    save_checkpoint(result.model, out)
    last = result.log[-1]
    print(
        f"trained {cfg.epochs} epochs: L_obj={last['L_obj']:.4f} L_rel={last['L_rel']:.4f} "
        f"val accuracy={last['accuracy'] if last['accuracy'] is not None else 'NA'}"
    )
    logger.debug("config: %s", config_dict(cfg))
    return EXIT_OK


def _model_and_data(opts):
    model = load_checkpoint(_path(opts, "checkpoint"))
    dataset = load_dataset(_path(opts, "data"))
    vocab = dataset.vocab
    if (vocab.num_classes, vocab.num_predicates) != (model.N, model.R):
        raise ConfigurationError(
            f"checkpoint has N={model.N}, R={model.R}; dataset has "
            f"N={vocab.num_classes}, R={vocab.num_predicates}"
        )
    return model, dataset


def cmd_eval(opts):
    model, dataset = _model_and_data(opts)
    zs_train = None
    if opts.get("zero_shot") is not None:
        zs_train, _ = load_annotations(_path(opts, "zero_shot"), dataset.vocab)
    rows = evaluate(
        model, dataset, tuple(opts["tasks"]), tuple(opts["k"]),
        per_type=bool(opts["per_type"]), zero_shot_train=zs_train, jobs=opts["jobs"],
    )
    report = format_report(rows)
    if opts.get("out") is not None:
        Path(opts["out"]).write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


def _prediction_json(image_id, pred):
    return {
        "image_id": image_id,
        "subject": {"class": pred.subject.label, "box": pred.subject.box.as_list()},
        "predicate": pred.predicate,
        "object": {"class": pred.object.label, "box": pred.object.box.as_list()},
        "score": pred.score,
    }


def _all_detections(model, dataset, top_k, jobs):
    fn = lambda rec: detection_predictions(model, dataset.feature_map(rec), rec, top_k)
    preds = map_images(fn, dataset.records, jobs)
    return {rec.image_id: p for rec, p in zip(dataset.records, preds)}


def cmd_detect(opts):
    model, dataset = _model_and_data(opts)
    out = _path(opts, "out", must_exist=False)
    preds = _all_detections(model, dataset, opts["top_k"], opts["jobs"])
    with open(out, "w") as fh:
        for image_id in sorted(preds):
            for pred in preds[image_id]:
                fh.write(json.dumps(_prediction_json(image_id, pred)) + "\n")
    print(f"wrote detections for {len(preds)} images to {out}")
    return EXIT_OK


def parse_queries(path, vocab):
    """Read ``subject,predicate,object`` lines; fields are names or indices."""
    names = (
        {n: i for i, n in enumerate(vocab.objects)},
        {n: i for i, n in enumerate(vocab.predicates)},
        {n: i for i, n in enumerate(vocab.objects)},
    )
    queries = []
    for lineno, text in enumerate(Path(path).read_text().splitlines(), start=1):
        if not text.strip() or text.lstrip().startswith("#"):
            continue
        fields = [f.strip() for f in text.split(",")]
        if len(fields) != 3:
            raise QueryError(f"{path}: line {lineno}: expected 'subject,predicate,object'")
        q = []
        for field, table in zip(fields, names):
            if field in table:
                q.append(table[field])
            elif field.lstrip("-").isdigit():
                q.append(int(field))
            else:
                raise QueryError(f"{path}: line {lineno}: unknown name {field!r}")
        queries.append(tuple(q))
    return queries


def cmd_retrieve(opts):
    model, dataset = _model_and_data(opts)
    gt = {rec.image_id: ground_truth_relations(rec) for rec in dataset.records}
    if opts.get("queries") is not None:
        queries = parse_queries(_path(opts, "queries"), dataset.vocab)
    else:
        queries = frequent_queries(gt, opts["num_queries"])
    preds = _all_detections(model, dataset, opts["top_k"], opts["jobs"])
    res = retrieval_eval(queries, preds, gt, model.N, model.R)
    if opts.get("out") is not None:
        with open(opts["out"], "w") as fh:
            for q, rank, order in zip(queries, res.ranks, res.rankings):
                fh.write(json.dumps({
                    "query": list(q),
                    "first_hit_rank": rank,
                    "ranking": [{"image_id": i, "score": s} for i, s in order],
                }) + "\n")
    rr = "NA" if res.recall_at_5 is None else f"{res.recall_at_5:.6f}"
    med = "NA" if res.median_rank is None else f"{res.median_rank:g}"
    print(f"queries\t{len(queries)}\nRr@5\t{rr}\nMed r\t{med}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "detect": cmd_detect,
    "retrieve": cmd_retrieve,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except (UsageError, ConfigurationError, QueryError) as exc:
        print(f"vtranse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"vtranse {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, VTransEError, OSError) as exc:
        print(f"vtranse {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
