import json
import warnings

import pytest

from vtranse.cli import main, parse_queries
from vtranse.data import load_dataset
from vtranse.evaluation import frequent_queries, ground_truth_relations
from vtranse.exceptions import QueryError
from vtranse.relspace import load_checkpoint


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A small synthetic dataset plus a briefly trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n-train", "60", "--n-test", "20"]) == 0
    assert main(["train", "--data", str(root / "data" / "train.jsonl"),
                 "--out", str(root / "model.npz"), "--epochs", "3",
                 "--log", str(root / "log.jsonl")]) == 0
    return root


def test_synth_is_seeded(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--n-train", "5",
                     "--n-test", "3", "--seed", "4"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 2 + 1 + 8  # two splits, vocabulary, eight maps
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    ds = load_dataset(tmp_path / "a" / "test.jsonl")
    assert len(ds) == 3 and ds.feature_map(ds.records[0]).values.ndim == 3


def test_train_writes_checkpoint_and_log(run):
    model = load_checkpoint(run / "model.npz")
    assert (model.N, model.R) == (6, 5)
    lines = (run / "log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2, 3]


def test_eval_report(run, capsys):
    out = run / "report.tsv"
    capsys.readouterr()
    assert main(["eval", "--data", str(run / "data" / "test.jsonl"),
                 "--checkpoint", str(run / "model.npz"), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed == out.read_text()
    lines = printed.splitlines()
    assert lines[0] == "task\tmode\tsubset\tK\tvalue"
    rows = [ln.split("\t") for ln in lines[1:]]
    assert {(r[0], r[3]) for r in rows} == {(t, k) for t in ("predicate", "phrase", "relation")
                                            for k in ("50", "100")}
    for r in rows:
        assert 0.0 <= float(r[4]) <= 1.0


def test_eval_zero_shot_against_itself_is_na(run, capsys):
    test = str(run / "data" / "test.jsonl")
    capsys.readouterr()
    assert main(["eval", "--data", test, "--checkpoint", str(run / "model.npz"),
                 "--zero-shot", test, "--tasks", "predicate", "--k", "50"]) == 0
    rows = [ln.split("\t") for ln in capsys.readouterr().out.splitlines()[1:]]
    zs = [r for r in rows if r[2] == "zero-shot"]
    assert zs and all(r[4] == "NA" for r in zs)


def test_eval_per_type_rows(run, capsys):
    capsys.readouterr()
    assert main(["eval", "--data", str(run / "data" / "test.jsonl"),
                 "--checkpoint", str(run / "model.npz"), "--per-type",
                 "--tasks", "predicate", "--k", "100"]) == 0
    subsets = {ln.split("\t")[2] for ln in capsys.readouterr().out.splitlines()[1:]}
    assert "all" in subsets and len(subsets) > 1


def test_detect_writes_ranked_lines(run):
    out = run / "dets.jsonl"
    assert main(["detect", "--data", str(run / "data" / "test.jsonl"),
                 "--checkpoint", str(run / "model.npz"), "--out", str(out),
                 "--top-k", "5"]) == 0
    recs = [json.loads(x) for x in out.read_text().splitlines()]
    assert recs and set(recs[0]) == {"image_id", "subject", "predicate", "object", "score"}
    by_image = {}
    for r in recs:
        by_image.setdefault(r["image_id"], []).append(r["score"])
    for scores in by_image.values():
        assert len(scores) <= 5 and scores == sorted(scores, reverse=True)


def test_retrieve_unique_query_ranks_first(run, tmp_path, capsys):
    ds = load_dataset(run / "data" / "test.jsonl")
    gt = {rec.image_id: ground_truth_relations(rec) for rec in ds.records}
    counts = {}
    for img, rels in gt.items():
        for t in {(g.subject_label, g.predicate, g.object_label) for g in rels}:
            counts.setdefault(t, []).append(img)
    unique = [t for t, imgs in counts.items() if len(imgs) == 1]
    assert unique
    s, p, o = unique[0]
    q = tmp_path / "q.txt"
    q.write_text(f"# one query\n{ds.vocab.objects[s]},{ds.vocab.predicates[p]},{o}\n")
    out = tmp_path / "ranks.jsonl"
    capsys.readouterr()
    assert main(["retrieve", "--data", str(run / "data" / "test.jsonl"),
                 "--checkpoint", str(run / "model.npz"), "--queries", str(q),
                 "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed.splitlines()[0] == "queries\t1"
    rec = json.loads(out.read_text())
    assert rec["query"] == [s, p, o]
    # the only gallery image holding the triplet is the only one that can hit
    assert rec["first_hit_rank"] == 1
    assert rec["ranking"][0]["image_id"] == counts[(s, p, o)][0]


def test_retrieve_frequent_queries_default(run, capsys):
    capsys.readouterr()
    assert main(["retrieve", "--data", str(run / "data" / "test.jsonl"),
                 "--checkpoint", str(run / "model.npz"), "--num-queries", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    ds = load_dataset(run / "data" / "test.jsonl")
    gt = {rec.image_id: ground_truth_relations(rec) for rec in ds.records}
    assert lines[0] == f"queries\t{len(frequent_queries(gt, 3))}"
    assert lines[1].startswith("Rr@5\t") and lines[2].startswith("Med r\t")


def test_query_parse_error_names_line(tmp_path, run):
    vocab = load_dataset(run / "data" / "test.jsonl").vocab
    q = tmp_path / "q.txt"
    q.write_text(f"{vocab.objects[0]},{vocab.predicates[0]},{vocab.objects[1]}\nfoo,bar\n")
    with pytest.raises(QueryError, match="line 2"):
        parse_queries(q, vocab)
    q.write_text(f"\n{vocab.objects[0]},nonsense,1\n")
    with pytest.raises(QueryError, match="line 2.*nonsense"):
        parse_queries(q, vocab)


def test_config_file_merging(run, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"tasks": ["phrase"], "k": [7]}))
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--data", str(run / "data" / "test.jsonl"),
                 "--checkpoint", str(run / "model.npz"), "--k", "9"]) == 0
    rows = [ln.split("\t") for ln in capsys.readouterr().out.splitlines()[1:]]
    assert {(r[0], r[3]) for r in rows} == {("phrase", "9")}


def test_exit_codes(run, tmp_path, capsys):
    data = str(run / "data" / "train.jsonl")
    # usage errors
    with pytest.raises(SystemExit) as exc:
        main(["train", "--epochs", "two"])
    assert exc.value.code == 1
    assert main(["train", "--data", str(tmp_path / "missing.jsonl"), "--out", "x"]) == 1
    assert main(["train", "--data", data, "--out", str(tmp_path / "m.npz"), "--epochs", "0"]) == 1
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text("{not json")
    assert main(["synth", "--config", str(bad_cfg), "--out", str(tmp_path / "s")]) == 1
    # data errors
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"image_id": 0, "width": 10\n')
    assert main(["train", "--data", str(broken), "--out", str(tmp_path / "m.npz")]) == 2
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--data", str(run / "data" / "test.jsonl"),
                 "--checkpoint", str(junk)]) == 2
    # numeric failure
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert main(["train", "--data", data, "--out", str(tmp_path / "m.npz"),
                     "--epochs", "2", "--learning-rate", "1e6"]) == 3
    err = capsys.readouterr().err
    assert "numeric failure" in err
