import json
import re
import subprocess
import sys

import pytest

from vpg.cli import main


def run(capsys, *argv):
    capsys.readouterr()
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "world.cfg").write_text("seed = 3\ndimension = 32\nproducts = 120\nscenes = 600\n")
    common = ["--config", d / "world.cfg", "--store", d / "store", "--index", d / "index"]
    steps = [
        ["synth", "generate", "--config", d / "world.cfg", "--out", d / "data" / "scenes.jsonl", "--products", d / "data" / "products.jsonl"],
        ["store", "backfill", *common, "--input", d / "data" / "scenes.jsonl", "--products", d / "data" / "products.jsonl"],
        ["index", "build", *common, "--products", d / "data" / "products.jsonl", "--report", d / "report.json"],
        ["calibrate", *common, "--queries", 100],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    products = [json.loads(line) for line in open(d / "data" / "products.jsonl")]
    scenes = [json.loads(line) for line in open(d / "data" / "scenes.jsonl")]
    return d, common, products, scenes


def test_pipeline_artifacts(pipeline):
    d, _, products, scenes = pipeline
    assert len(products) == 120 and len(scenes) == 600
    for name in ("world.jsonl", "logs.jsonl", "cases.jsonl", "world.json"):
        assert (d / "data" / name).exists()
    report = json.loads((d / "report.json").read_text())
    assert report["products_indexed"] == 120 and report["objects_indexed"] > 0


def test_query_reverse_and_forward(pipeline, capsys):
    d, common, products, scenes = pipeline
    code, out = run(capsys, "query", "reverse", *common, "--product", products[0]["signature"])
    assert code == 0 and out["product"] == products[0]["signature"]
    assert 1 <= len(out["scenes"]) <= 10
    assert [r["rank"] for r in out["scenes"]] == list(range(len(out["scenes"])))
    code, out = run(capsys, "query", "forward", *common, "--scene", scenes[0]["signature"])
    assert code == 0 and len(out["products"]) <= 3
    code, batch = run(capsys, "query", "forward", *common, "--scene", scenes[0]["signature"], "--scene", scenes[1]["signature"])
    assert code == 0


def test_replayable(pipeline, capsys):
    d, common, products, _ = pipeline
    argv = ("query", "reverse", *common, "--product", products[3]["signature"])
    assert run(capsys, *argv) == run(capsys, *argv)
    synth = ["synth", "generate", "--config", d / "world.cfg", "--out"]
    run(capsys, *synth, d / "again")
    run(capsys, *synth, d / "again2")
    assert (d / "again" / "scenes.jsonl").read_bytes() == (d / "again2" / "scenes.jsonl").read_bytes()
    assert (d / "again" / "scenes.jsonl").read_bytes() == (d / "data" / "scenes.jsonl").read_bytes()


def test_store_stats_and_eval(pipeline, capsys):
    d, common, *_ = pipeline
    code, stats = run(capsys, "store", "stats", *common)
    assert code == 0 and stats["entries"] == 720
    code, det = run(capsys, "eval", "detection", "--cases", d / "data" / "cases.jsonl")
    assert code == 0 and det["map"] == 1.0


def test_flag_overrides_win(pipeline, capsys):
    d, common, products, _ = pipeline
    code, out = run(capsys, "query", "reverse", *common, "--set", "rerank.n_out=2", "--product", products[0]["signature"])
    assert code == 0 and len(out["scenes"]) <= 2


def test_exit_codes(tmp_path, capsys):
    assert main(["index", "build", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["calibrate", "--set", "hnsw.M=0", "--set", "dedup.hamming_max=99"]) == 1
    err = capsys.readouterr().err
    assert "hnsw.M" in err and "dedup.hamming_max" in err
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"signature": 1}\n{bad\n')
    assert main(["store", "backfill", "--store", str(tmp_path / "s"), "--input", str(bad)]) == 2
    assert re.search(r"bad.jsonl:[12]:", capsys.readouterr().err)


def test_index_build_on_empty_store(tmp_path, capsys):
    code, report = run(capsys, "index", "build", "--store", tmp_path / "s", "--index", tmp_path / "ix")
    assert code == 0 and report["objects_indexed"] == 0 and report["scenes"]["input_count"] == 0


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "vpg.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout
