import csv
import json
import os
import shutil
import subprocess
import sys
from types import SimpleNamespace

import pytest

from xote.align import read_projection
from xote.cli import _workers, atomic_write, main, rows_to_csv
from xote.synthetic import write_fixture

FIXTURE_XML = os.path.join(os.path.dirname(__file__), "fixtures", "semeval3.xml")


@pytest.fixture(scope="module")
def fx(tmp_path_factory):
    d = tmp_path_factory.mktemp("fixture")
    return d, write_fixture(str(d))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_ingest_fixture(tmp_path, capsys):
    out = tmp_path / "en.conll"
    code, stdout, _ = run(capsys, "ingest", FIXTURE_XML, "--lang", "en", "--out", out)
    assert code == 0
    assert stdout.splitlines()[0] == "3\t20\t2"
    report = json.loads((tmp_path / "en.conll.report.json").read_text())
    assert report["null_targets"] == 1 and report["duplicate_targets"] == 1
    assert out.read_text().count("# id=") == 3


def test_ingest_reports_oov(tmp_path, capsys):
    vec = tmp_path / "en.vec"
    vec.write_text("2 2\nwine 1 0\nthe 0 1\n")
    code, stdout, _ = run(capsys, "ingest", FIXTURE_XML, "--lang", "en", "--embeddings", f"en={vec}")
    oov = json.loads(stdout.splitlines()[1])["oov"]["en"]
    assert code == 0 and oov["tokens"] == 20 and oov["oov"] == 18  # only "The" (lowercase fallback) and "wine" are known


def test_eval_pred_equals_gold(tmp_path, capsys):
    conll = tmp_path / "gold.conll"
    run(capsys, "ingest", FIXTURE_XML, "--lang", "en", "--out", conll)
    report = tmp_path / "report.json"
    code, stdout, _ = run(capsys, "eval", FIXTURE_XML, "--lang", "en", "--pred", conll, "--out", report)
    tsv, js = stdout.splitlines()
    assert code == 0 and tsv.split("\t")[3:] == ["1.0", "1.0", "1.0"]
    assert json.loads(js)["f1"] == 1.0 and json.loads(report.read_text())["f1"] == 1.0


def test_eval_jsonl_predictions(tmp_path, capsys):
    pred = tmp_path / "pred.jsonl"
    pred.write_text("\n".join(json.dumps({"id": f"1004293:{i}", "spans": s}) for i, s in enumerate(
        [[{"start": 4, "end": 13}], [], []])) + "\n")
    code, stdout, _ = run(capsys, "eval", FIXTURE_XML, "--lang", "en", "--pred", pred)
    r = json.loads(stdout.splitlines()[1])
    assert code == 0 and (r["precision"], r["recall"]) == (1.0, 0.5)


def test_align_command(fx, tmp_path, capsys):
    d, _ = fx
    out = tmp_path / "bb-aa.xprj"
    code, stdout, _ = run(capsys, "align", d / "bb.vec", d / "aa.vec", d / "bb-aa.dict", "--out", out,
                          "--src-lang", "bb", "--tgt-lang", "aa", "--seed", 0)
    res = json.loads(stdout)
    assert code == 0 and res["precision@1"] == 1.0 and res["precision@5"] == 1.0
    with open(out, "rb") as fh:
        W, s, t = read_projection(fh)
    assert W.shape == (32, 32) and (s, t) == ("bb", "aa")


def test_train_eval_predict(fx, tmp_path, capsys):
    d, cfg = fx
    code, stdout, _ = run(capsys, "train", "--config", cfg, "--seed", 0, "--out", tmp_path)
    res = json.loads(stdout)
    assert code == 0 and res["failure"] is None and res["best_val_f1"] > 0.9
    ckpt = os.path.join(res["run_dir"], "checkpoint.xote")
    assert os.path.exists(os.path.join(res["run_dir"], "record.json"))
    code, stdout, _ = run(capsys, "eval", d / "bb.test.xml", "--lang", "bb", "--checkpoint", ckpt, "--config", cfg)
    assert code == 0 and json.loads(stdout.splitlines()[1])["f1"] > 0.9

    raw = tmp_path / "raw.txt"
    raw.write_text("i loved our xazzip!\nxi devol ruo xazzip!\n")
    out = tmp_path / "pred.jsonl"
    code, _, _ = run(capsys, "predict", ckpt, raw, "--lang", "bb", "--config", cfg, "--out", out)
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert code == 0 and [l["id"] for l in lines] == ["1", "2"]
    assert lines[1]["spans"] == [{"start": 13, "end": 19, "surface": "xazzip"}]


def test_zero_shot_grid_and_reproducibility(fx, tmp_path, capsys):
    d, cfg = fx
    outs = []
    for name in ("a", "b"):
        code, stdout, _ = run(capsys, "zero-shot", "--config", cfg, "--workers", 1, "--out", tmp_path / name)
        assert code == 0
        outs.append(tmp_path / name / "zero_shot")
    rows = read_csv(outs[0] / "grid.csv")
    assert rows[0] == ["source\\target", "aa", "bb"]
    vals = {(r[0], c): float(v) for r in rows[1:] for c, v in zip(rows[0][1:], r[1:])}
    assert abs(vals[("aa", "bb")] - vals[("bb", "aa")]) < 0.05
    assert abs(vals[("aa", "aa")] - vals[("aa", "bb")]) < 0.05
    for rel in ("grid.csv", "grid.json", "runs.csv", "aa__bb/seed1/record.json"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()
    assert not [f for f in os.listdir(outs[0]) if f.startswith(".tmp")]

    # leave-one-out picks up the grid for the best->target row
    code, stdout, _ = run(capsys, "leave-one-out", "--config", cfg, "--workers", 1, "--out", tmp_path / "a")
    table = read_csv(tmp_path / "a" / "leave_one_out" / "table.csv")
    assert code == 0 and [r[0] for r in table] == ["target", "best->target", "all others->target", "target->target"]


def test_curve_command(fx, tmp_path, capsys):
    d, cfg = fx
    code, stdout, _ = run(capsys, "curve", "--config", cfg, "--seed", 0, "--workers", 1, "--out", tmp_path)
    rows = read_csv(tmp_path / "curve" / "aa_bb.csv")
    assert code == 0 and [r[0] for r in rows] == ["size", "0", "10", "40"]
    assert rows[1][2] == "NA"
    assert os.path.exists(tmp_path / "curve" / "runs.csv")


def test_errors_are_json(fx, tmp_path, capsys):
    d, cfg = fx
    code, _, err = run(capsys, "train", "--bogus")
    assert code == 2 and json.loads(err)["error"] == "usage"
    code, _, err = run(capsys, "train")
    assert code == 2 and "--config" in json.loads(err)["message"]

    bad = json.loads(open(cfg).read())
    bad["schema_version"] = 99
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    code, _, err = run(capsys, "train", "--config", p)
    assert code == 1 and json.loads(err)["error"] == "config"

    missing = json.loads(open(cfg).read())
    missing["embeddings"]["aa"] = str(tmp_path / "nowhere.vec")
    p.write_text(json.dumps(missing))
    code, _, err = run(capsys, "zero-shot", "--config", p)
    assert code == 1 and "nowhere.vec" in json.loads(err)["message"]

    code, _, err = run(capsys, "eval", FIXTURE_XML, "--lang", "en")
    assert code == 2


def test_workers_fallback(monkeypatch):
    args = SimpleNamespace(workers=None)
    monkeypatch.setenv("XOTE_WORKERS", "3")
    assert _workers(args) == 3
    assert _workers(SimpleNamespace(workers=2)) == 2
    monkeypatch.delenv("XOTE_WORKERS")
    assert _workers(args) == (os.cpu_count() or 1)


def test_atomic_write_and_csv(tmp_path):
    p = tmp_path / "sub" / "x.csv"
    atomic_write(str(p), rows_to_csv([["a", None, 0.5], [1, "b", None]]))
    assert p.read_text() == "a,NA,0.5000\n1,b,NA\n"
    assert os.listdir(p.parent) == ["x.csv"]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "xote", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("xote ")
