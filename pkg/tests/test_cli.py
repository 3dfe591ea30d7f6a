import csv
import json

import pytest

from locembed.cli import main
from locembed.poi_data import load_poi_csv

FAST = ["--set", "max_epochs=2", "--set", "num_scales=4", "--set", "hidden_dim=16", "--set", "embedding_dim=8",
        "--set", "batch_size=32"]


@pytest.fixture(scope="module")
def city(tmp_path_factory):
    d = tmp_path_factory.mktemp("city")
    assert main(["synth", "--n-pois", "300", "--fallback-dim", "32", "--seed", "1", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(city):
    out = city / "run"
    assert main(["train", "--config", str(city / "train_config.json"), "--out", str(out), *FAST]) == 0
    return out


def test_synth_outputs(city):
    for name in ("pois.csv", "luc.csv", "sdm.csv", "synth_spec.json", "train_config.json", "manifest_synth.json",
                 "vectors_type_only.gemb", "ids_name_only.txt"):
        assert (city / name).exists(), name
    assert len(load_poi_csv(city / "pois.csv")) == 300


def test_prepare_three_lines(tmp_path):
    src = tmp_path / "p.csv"
    src.write_text("id,lon,lat,name,category_l1,category_l2\n"
                   "a,0,0,Alpha Cafe,Food,Cafe\nb,1,1,Beta Park,Leisure,Park\nc,2,0,Gamma Mill,Industry,Mill\n")
    out = tmp_path / "o"
    assert main(["prepare", str(src), "--variant", "type_only", "--out", str(out)]) == 0
    lines = (out / "descriptions_type_only.txt").read_text().splitlines()
    assert lines == ["A place of Cafe, a type of Food.", "A place of Park, a type of Leisure.",
                     "A place of Mill, a type of Industry."]
    assert not any(n in t for t in lines for n in ("Alpha", "Beta", "Gamma"))
    assert (out / "ids_type_only.txt").read_text().splitlines() == ["a", "b", "c"]
    first = (out / "descriptions_type_only.txt").read_bytes()
    assert main(["prepare", str(src), "--variant", "type_only", "--out", str(out)]) == 0
    assert (out / "descriptions_type_only.txt").read_bytes() == first


def test_prepare_bad_csv_exit_1(tmp_path, capsys):
    src = tmp_path / "p.csv"
    src.write_text("id,lon,lat,name,category_l1,category_l2\na,0,95,A,B,C\n")
    assert main(["prepare", str(src), "--out", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_train_outputs_and_manifest(trained):
    assert (trained / "checkpoint.ckpt").exists()
    rows = list(csv.reader((trained / "train_log.csv").open()))
    assert rows[0] == ["epoch", "train_loss", "val_loss"] and len(rows) == 3
    man = json.loads((trained / "manifest_train.json").read_text())
    assert man["subcommand"] == "train" and len(man["config_hash"]) == 16
    assert all(len(v) == 64 for v in man["inputs"].values())


def test_train_twice_identical(city, trained, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--config", str(city / "train_config.json"), "--out", str(out), *FAST]) == 0
    assert (out / "checkpoint.ckpt").read_bytes() == (trained / "checkpoint.ckpt").read_bytes()


def test_train_zero_temperature_exit_1(city, tmp_path, capsys):
    rc = main(["train", "--config", str(city / "train_config.json"), "--out", str(tmp_path), "--set",
               "temperature=0", "--set", "batch_size=1"])
    assert rc == 1
    err = capsys.readouterr().err
    assert "temperature must be positive" in err and "batch_size" in err
    assert not (tmp_path / "checkpoint.ckpt").exists()


def test_train_unknown_field_exit_1(city, tmp_path):
    assert main(["train", "--config", str(city / "train_config.json"), "--out", str(tmp_path), "--set",
                 "tempreture=0.1"]) == 1


def test_eval_luc(city, trained, tmp_path, capsys):
    out = tmp_path / "ev"
    rc = main(["eval", "--checkpoint", str(trained / "checkpoint.ckpt"), "--task", "luc", "--dataset",
               str(city / "luc.csv"), "--heads", "linear", "--seeds", "2", "--out", str(out)])
    assert rc == 0
    rep = json.loads((out / "luc_report.json").read_text())
    assert rep["seeds"] == [0, 1] and list(rep["heads"]) == ["linear"]
    assert "f1_mean" in capsys.readouterr().out


def test_eval_bad_heads(city, trained, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.ckpt"), "--task", "sdm", "--dataset",
                 str(city / "sdm.csv"), "--heads", "forest", "--out", str(tmp_path)]) == 1


def test_retrieve(trained, tmp_path, capsys):
    out = tmp_path / "r"
    rc = main(["retrieve", "--checkpoint", str(trained / "checkpoint.ckpt"), "--query", "A place of Parks.",
               "--grid", "10x8", "--k", "4", "--svg", "--out", str(out)])
    assert rc == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 4
    assert len(json.loads((out / "retrieval_topk.geojson").read_text())["features"]) == 4
    assert (out / "retrieval_heatmap.svg").read_text().startswith("<svg")
    assert (out / "manifest_retrieve.json").exists()


def test_retrieve_k_exceeds_grid(trained, tmp_path, capsys):
    rc = main(["retrieve", "--checkpoint", str(trained / "checkpoint.ckpt"), "--query", "x", "--grid", "3x3",
               "--k", "10", "--out", str(tmp_path)])
    assert rc == 1
    assert "exceeds" in capsys.readouterr().err


def test_retrieve_unknown_query_id(city, trained, tmp_path):
    rc = main(["retrieve", "--checkpoint", str(trained / "checkpoint.ckpt"), "--query-id", "nope",
               "--vectors", str(city / "vectors_name_and_type.gemb"), "--ids", str(city / "ids_name_and_type.txt"),
               "--out", str(tmp_path)])
    assert rc == 1


def test_ablate(city, tmp_path):
    out = tmp_path / "ab"
    rc = main(["ablate", "--config", str(city / "train_config.json"), "--heads", "linear", "--seeds", "1",
               "--no-sdm", "--out", str(out), *FAST])
    assert rc == 0
    reports = sorted(p.name for p in out.glob("*_luc.json"))
    assert reports == ["name_and_type_fallback_luc.json", "name_only_fallback_luc.json",
                       "type_only_fallback_luc.json"]
    rows = list(csv.DictReader((out / "ablation.csv").open()))
    assert {r["variant"] for r in rows} == {"name_and_type", "name_only", "type_only"}


def test_ablate_single_variant(city, tmp_path):
    out = tmp_path / "ab1"
    assert main(["ablate", "--config", str(city / "train_config.json"), "--variant", "nameOnly", "--heads", "linear",
                 "--seeds", "1", "--no-sdm", "--out", str(out), *FAST]) == 0
    assert [p.name for p in out.glob("*_luc.json")] == ["name_only_fallback_luc.json"]


def test_missing_file_exit_1(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--task", "luc", "--dataset", "x",
                 "--out", str(tmp_path)]) == 1


def test_module_entry_point(tmp_path):
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "locembed.cli", "train", "--config", str(tmp_path / "missing.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "error:" in proc.stderr
