import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from hamkit.cli import main


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "s.csv"), "--length", "300", "--channels", "2", "--periods", "12,6",
                 "--amplitudes", "1,0.5", "--noise", "0.1", "--config-out", str(d / "s.json")]) == 0
    assert main(["train", "--data", str(d / "s.csv"), "--lookback", "12", "--horizon", "6", "--kind", "mlp",
                 "--hidden", "8", "--dropout", "0.2", "--epochs", "4", "--patience", "2", "--batch-size", "16",
                 "--out", str(d / "run")]) == 0
    assert main(["ham", "--run", str(d / "run"), "--layerwise", "--id", "m", "--out", str(d / "t.json")]) == 0
    return d


def test_synth_writes_csv_and_config(work):
    rows = (work / "s.csv").read_text().splitlines()
    assert rows[0] == "ch0,ch1" and len(rows) == 301
    assert json.loads((work / "s.json").read_text())["length"] == 300


def test_ham_trace_is_canonical(work, capsys):
    assert main(["ingest", str(work / "t.json")]) == 0
    out = capsys.readouterr().out
    assert "valid trace" in out and "canonical" not in out
    doc = json.loads((work / "t.json").read_text())
    assert doc["horizon"] == 6 and "mlp.0.weight" in doc["curves"]["causal"]["per_layer"]


def test_ham_is_reproducible(work):
    assert main(["ham", "--run", str(work / "run"), "--layerwise", "--id", "m", "--out", str(work / "t2.json")]) == 0
    assert (work / "t2.json").read_bytes() == (work / "t.json").read_bytes()


def test_naive_and_fast_traces_agree(work):
    assert main(["ham", "--run", str(work / "run"), "--naive", "--out", str(work / "n.json")]) == 0
    assert main(["ham", "--run", str(work / "run"), "--out", str(work / "f.json")]) == 0
    n, f = (json.loads((work / p).read_text())["curves"] for p in ("n.json", "f.json"))
    for mode in n:
        np.testing.assert_allclose(n[mode]["overall"], f[mode]["overall"], rtol=1e-8)


def test_areas_diff_export_render(work, capsys):
    t = str(work / "a.json")
    assert main(["areas", str(work / "t.json"), "--out", t]) == 0
    capsys.readouterr()
    assert main(["diff", t]) == 0
    assert "equivariant point" in capsys.readouterr().out
    doc = json.loads((work / "a.json").read_text())
    assert {"areas", "difference", "equivariant"} <= set(doc["analytics"])
    assert main(["export", t, "--out", str(work / "a.csv")]) == 0
    assert (work / "a.csv").read_text().splitlines()[0] == "# hamkit-csv v1"
    for kind in ("ham", "areas", "diff", "layerwise"):
        assert main(["render", t, "--kind", kind, "--out", str(work / f"{kind}.svg")]) == 0
    assert main(["interp", t, str(work / "t.json"), "--grid-size", "21", "--out", str(work / "i.json")]) == 0
    assert main(["render", t, str(work / "t.json"), "--kind", "interp", "--out", str(work / "i.svg")]) == 0


def test_partial_trace_export(work):
    p = str(work / "p.json")
    assert main(["ham", "--run", str(work / "run"), "--mode", "causal", "--out", p]) == 0
    assert json.loads((work / "p.json").read_text())["partial"] is True
    assert main(["diff", p]) == 2
    assert main(["export", p, "--out", str(work / "p.csv")]) == 0
    assert "anticausal mode missing" in (work / "p.csv").read_text().splitlines()[0]


@pytest.mark.parametrize("argv", [[], ["nope"], ["ham"], ["train", "--data", "x.csv"], ["synth", "--out"]])
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_corrupted_trace_exits_2_with_path(work, capsys):
    doc = json.loads((work / "t.json").read_text())
    doc["curves"]["causal"]["overall"][2] = -1.0
    bad = work / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["ingest", str(bad)]) == 2
    assert "$.curves.causal.overall[2]" in capsys.readouterr().err


def test_missing_files_exit_2(work):
    assert main(["ingest", str(work / "absent.json")]) == 2
    assert main(["ham", "--run", str(work / "absent")]) == 2


def test_bad_csv_exits_2(tmp_path, capsys):
    (tmp_path / "x.csv").write_text("a\n1\n\n2\nzz\n")
    assert main(["train", "--data", str(tmp_path / "x.csv"), "--lookback", "2", "--horizon", "1",
                 "--out", str(tmp_path / "r")]) == 2
    assert "non-numeric" in capsys.readouterr().err


def test_divergent_training_exits_3(work):
    with np.errstate(all="ignore"):
        code = main(["train", "--data", str(work / "s.csv"), "--lookback", "12", "--horizon", "6", "--kind",
                     "linear", "--optimizer", "sgd", "--lr", "1e4", "--epochs", "50", "--patience", "50",
                     "--out", str(work / "div")])
    assert code == 3


def test_sweep_emits_three_bundles(tmp_path):
    d = tmp_path
    assert main(["synth", "--out", str(d / "s.csv"), "--length", "800", "--noise", "0.2"]) == 0
    assert main(["sweep", "--data", str(d / "s.csv"), "--lookback", "8", "--horizon", "4", "--kind", "linear",
                 "--epochs", "3", "--patience", "1", "--lr", "0.01", "--cells", "3", "--out", str(d / "sw")]) == 0
    for bs in (500, 2000, 4000):
        files = sorted((d / "sw" / f"bs_{bs}").glob("epoch_*.json"))
        assert files and files[0].name == "epoch_000.json"
    with open(d / "sw" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["batch_size"]) for r in rows] == [500, 2000, 4000]
    assert all(float(r["full_norm_avg"]) >= 0 for r in rows)


def test_module_entry_point(work):
    res = subprocess.run([sys.executable, "-m", "hamkit", "ingest", str(work / "t.json")], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "valid trace" in res.stdout
