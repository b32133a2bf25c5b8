import hashlib
import json
import subprocess
import sys

import pandas as pd
import pytest

from mammo_age.cli import run


def digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def pipeline(archive, tmp_path):
    """Manifest and baseline features for the archive fixture."""
    m, f = tmp_path / "manifest.csv", tmp_path / "features.bin"
    assert run(["ingest", "--root", str(archive), "--out", str(m)]) == 0
    assert run(["extract", "--manifest", str(m), "--out", str(f), "--grid", "2", "--bins", "8"]) == 0
    return m, f


def test_version(capsys):
    assert run(["--version"]) == 0
    assert capsys.readouterr().out.startswith("mammo-age 0.1.0")


def test_usage_errors(capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["train", "--features", "x"]) == 1
    assert run(["train", "--features", "f", "--manifest", "m", "--out", "o", "--trees", "many"]) == 1


def test_missing_input_is_exit_2(tmp_path, capsys):
    assert run(["train", "--features", str(tmp_path / "gone.bin"), "--manifest", str(tmp_path / "m.csv"),
                "--out", str(tmp_path / "o.json")]) == 2
    assert "gone.bin" in capsys.readouterr().err
    assert run(["summarize", "--manifest", str(tmp_path / "nope.csv")]) == 2
    assert run(["predict", "--model", str(tmp_path / "m"), "--features", str(tmp_path / "f"),
                "--out", str(tmp_path / "o")]) == 2


def test_summarize(pipeline, tmp_path, capsys):
    m, _ = pipeline
    assert run(["summarize", "--manifest", str(m), "--json", str(tmp_path / "s.json"),
                "--histogram", str(tmp_path / "h.csv")]) == 0
    out = capsys.readouterr().out
    assert "Normal" in out and "Total" in out
    rows = json.loads((tmp_path / "s.json").read_text())["rows"]
    assert [r["image_count"] for r in rows] == [8, 10, 6, 24]
    assert (tmp_path / "h.csv").read_text().startswith("age,count\n")


def test_train_predict_eval(pipeline, tmp_path):
    m, f = pipeline
    model = tmp_path / "model.json"
    assert run(["train", "--features", str(f), "--manifest", str(m), "--out", str(model),
                "--trees", "10", "--min-leaf", "1"]) == 0
    assert json.loads(model.read_text())["extractor_tag"] == "baseline:grid=2:bins=8"
    assert run(["predict", "--model", str(model), "--features", str(f), "--out", str(tmp_path / "p.csv")]) == 0
    pred = pd.read_csv(tmp_path / "p.csv")
    assert len(pred) == 24 and pred["predicted_age"].between(41, 80).all()

    assert run(["eval", "--features", str(f), "--manifest", str(m), "--out", str(tmp_path / "r.json"),
                "--repeats", "3", "--trees", "5", "--scatter", str(tmp_path / "s.csv")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["aggregate"]["n_repeats"] == 3
    # balanced: 6 images per status, 70/30 of 18
    assert all(s["train_n"] == 13 and s["test_n"] == 5 for s in report["per_split"])

    assert run(["eval", "--features", str(f), "--manifest", str(m), "--out", str(tmp_path / "r2.json"),
                "--repeats", "2", "--trees", "5", "--no-balance", "--group-by-case"]) == 0
    r2 = json.loads((tmp_path / "r2.json").read_text())
    assert all(s["train_n"] + s["test_n"] == 24 for s in r2["per_split"])


def test_predict_tag_mismatch(pipeline, tmp_path):
    m, f = pipeline
    model = tmp_path / "model.json"
    run(["train", "--features", str(f), "--manifest", str(m), "--out", str(model), "--trees", "2"])
    other = tmp_path / "other.bin"
    run(["extract", "--manifest", str(m), "--out", str(other), "--grid", "1", "--bins", "4"])
    assert run(["predict", "--model", str(model), "--features", str(other), "--out", str(tmp_path / "p")]) == 2


def test_corrupt_model_exit_2(pipeline, tmp_path):
    _, f = pipeline
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["predict", "--model", str(bad), "--features", str(f), "--out", str(tmp_path / "p")]) == 2


def test_config_file(pipeline, tmp_path):
    m, f = pipeline
    cfg = tmp_path / "c.ini"
    cfg.write_text("[forest]\ntrees = 3\nseed = 7\n[train]\nmin_leaf = 2\n")
    assert run(["--config", str(cfg), "train", "--features", str(f), "--manifest", str(m),
                "--out", str(tmp_path / "a.json")]) == 0
    d = json.loads((tmp_path / "a.json").read_text())
    assert (d["params"]["n_trees"], d["params"]["seed"], d["params"]["min_leaf"]) == (3, 7, 2)
    # flags win over the file
    assert run(["--config", str(cfg), "train", "--features", str(f), "--manifest", str(m),
                "--out", str(tmp_path / "b.json"), "--trees", "4"]) == 0
    assert json.loads((tmp_path / "b.json").read_text())["params"]["n_trees"] == 4


def test_cohort_impute_analyze(tmp_path, capsys):
    t = tmp_path / "cohort.csv"
    assert run(["make-cohort", "--seed", "1", "--out", str(t)]) == 0
    assert run(["impute", "--table", str(t), "--family", "linear", "--ks", "63,112", "--seeds", "5",
                "--out", str(tmp_path / "rows.csv")]) == 0
    rows = pd.read_csv(tmp_path / "rows.csv")
    assert rows["covariate"].tolist() == ["Age_base", "Age_63", "Age_112"]
    assert run(["impute", "--table", str(t), "--seeds", "3", "--out", str(tmp_path / "log.csv")]) == 0
    assert pd.read_csv(tmp_path / "log.csv")["covariate"].tolist() == ["Age_base", "Age_36", "Age_63", "Age_80"]
    assert run(["analyze", "--table", str(t), "--family", "logistic", "--outcome", "status",
                "--covariates", "age,PD,FGT", "--out", str(tmp_path / "fit.json")]) == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert [c["name"] for c in fit["coefficients"]] == ["(Intercept)", "age", "PD", "FGT"]
    assert "AIC" in capsys.readouterr().out


def test_impute_model_strategy(tmp_path):
    import numpy as np

    from mammo_age.features import FeatureMatrix, save_features
    from mammo_age.forest import ForestParams, fit_forest, save_model

    t = tmp_path / "cohort.csv"
    run(["make-cohort", "--seed", "2", "--missing", "20", "--out", str(t)])
    table = pd.read_csv(t)
    assert table["age"].isna().sum() == 20
    rng = np.random.default_rng(0)
    X = rng.normal(size=(len(table), 3)).astype(np.float32)
    save_features(FeatureMatrix(table["id"].tolist(), X, "baseline:grid=1:bins=2"), tmp_path / "f.bin")
    model = fit_forest(X[:50], rng.uniform(40, 70, 50), ForestParams(n_trees=3), "baseline:grid=1:bins=2")
    save_model(model, tmp_path / "m.json")
    assert run(["impute", "--strategy", "model", "--table", str(t), "--model", str(tmp_path / "m.json"),
                "--features", str(tmp_path / "f.bin"), "--family", "linear", "--out", str(tmp_path / "r.csv"),
                "--imputed-out", str(tmp_path / "filled.csv")]) == 0
    assert pd.read_csv(tmp_path / "r.csv")["covariate"].tolist() == ["Age_model"]
    assert not pd.read_csv(tmp_path / "filled.csv")["age"].isna().any()
    assert run(["impute", "--strategy", "model", "--table", str(t), "--out", str(tmp_path / "x")]) == 1


def test_separation_is_exit_3(tmp_path):
    t = tmp_path / "sep.csv"
    t.write_text("status,x\n0,1\n0,2\n0,3\n1,4\n1,5\n1,6\n")
    assert run(["analyze", "--table", str(t), "--family", "logistic", "--outcome", "status",
                "--covariates", "x", "--out", str(tmp_path / "o.json")]) == 3


def test_inputs_not_mutated(pipeline, archive, tmp_path):
    m, f = pipeline
    before = digest(archive), m.read_bytes(), f.read_bytes()
    run(["train", "--features", str(f), "--manifest", str(m), "--out", str(tmp_path / "x.json"), "--trees", "2"])
    run(["eval", "--features", str(f), "--manifest", str(m), "--out", str(tmp_path / "e.json"),
         "--repeats", "1", "--trees", "2"])
    assert (digest(archive), m.read_bytes(), f.read_bytes()) == before


def test_crawl_command(mirror_dir, tmp_path):
    assert run(["crawl", "--mirror", str(mirror_dir), "--out", str(tmp_path / "o"),
                "--report", str(tmp_path / "r.json")]) == 0
    r = json.loads((tmp_path / "r.json").read_text())
    assert (r["pages_fetched"], r["images_saved"]) == (3, 6)
    assert run(["crawl", "--out", str(tmp_path / "o")]) == 1


def test_jobs_byte_identical(archive, tmp_path):
    outs = {}
    for jobs in (1, 2):
        d = tmp_path / f"j{jobs}"
        d.mkdir()
        j = ["--jobs", str(jobs)]
        assert run(j + ["ingest", "--root", str(archive), "--out", str(d / "m.csv")]) == 0
        assert run(j + ["extract", "--manifest", str(d / "m.csv"), "--out", str(d / "f.bin")]) == 0
        assert run(j + ["train", "--features", str(d / "f.bin"), "--manifest", str(d / "m.csv"),
                        "--out", str(d / "model.json"), "--trees", "6", "--seed", "3"]) == 0
        assert run(j + ["eval", "--features", str(d / "f.bin"), "--manifest", str(d / "m.csv"),
                        "--out", str(d / "r.json"), "--scatter", str(d / "s.csv"), "--repeats", "3",
                        "--trees", "4"]) == 0
        assert run(j + ["predict", "--model", str(d / "model.json"), "--features", str(d / "f.bin"),
                        "--out", str(d / "p.csv")]) == 0
        assert run(j + ["make-cohort", "--seed", "4", "--out", str(d / "c.csv")]) == 0
        assert run(j + ["impute", "--table", str(d / "c.csv"), "--seeds", "4", "--out", str(d / "i.csv")]) == 0
        outs[jobs] = digest(d)
    assert outs[1] == outs[2]


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mammo_age", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "model format 1" in r.stdout


def test_extract_backbone(pipeline, tmp_path):
    pytest.importorskip("onnxruntime")
    from test_features import tiny_onnx

    m, _ = pipeline
    model = tiny_onnx(tmp_path / "tiny.onnx")
    outs = []
    for jobs in ("1", "2"):
        out = tmp_path / f"b{jobs}.bin"
        assert run(["--jobs", jobs, "extract", "--manifest", str(m), "--extractor", "backbone",
                    "--model", str(model), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    from mammo_age.features import load_features

    fm = load_features(tmp_path / "b1.bin")
    assert fm.X.shape == (24, 8) and fm.extractor_tag.startswith("backbone:")
    assert run(["extract", "--manifest", str(m), "--extractor", "backbone", "--model",
                str(tmp_path / "missing.onnx"), "--out", str(tmp_path / "x.bin")]) == 2
