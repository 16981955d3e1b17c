import json
import subprocess
import sys

import numpy as np
import pytest

from otmatch.cli import InstanceError, bench_instance, fast_dirac_scaling, main, parse_instances


def _write(path, lines):
    path.write_text("\n".join(json.dumps(x) for x in lines) + "\n")
    return path


def test_parse_nested_and_flat_cost():
    text = '{"mu":[1,0],"nu":[0.4,0.6],"cost":[[0,1],[1,0]]}\n\n{"mu":[1,0],"nu":[0.4,0.6],"cost":[0,1,1,0],"epsilon":0.1}'
    a, b = parse_instances(text)
    np.testing.assert_array_equal(a["cost"], b["cost"])
    assert a["epsilon"] == 0.01 and b["epsilon"] == 0.1 and b["line"] == 3


@pytest.mark.parametrize("text, fragment", [
    ('{"mu": [1', "line 1: invalid JSON"),
    ('{"mu":[1],"nu":[1]}', "missing field"),
    ('[1, 2]', "JSON object"),
    ('{"mu":[1,0],"nu":[1,0],"cost":[0,1,1]}', "expected 4"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(InstanceError, match=fragment):
        parse_instances("\n" + text if "line 1" not in fragment else text)


def test_dirac_instance_solvers_agree():
    rng = np.random.default_rng(0)
    for K in (2, 3, 5):
        pts = rng.normal(size=(K, 2))
        C = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        mu = np.eye(K)[1]
        row = bench_instance({"line": 1, "mu": mu, "nu": rng.dirichlet(np.ones(K)), "cost": C, "epsilon": 0.01})
        assert row["max_discrepancy"] < 1e-6
        assert None not in (row["exact"], row["sinkhorn"], row["fast_dirac"])


def test_scaling_is_linear():
    s = fast_dirac_scaling(repeats=100)
    assert s["sizes"] == [4, 16, 64, 256]
    assert s["r2"] > 0.95


def test_ot_bench_exit_codes(tmp_path, capsys):
    good = _write(tmp_path / "good.jsonl", [{"mu": [1, 0, 0], "nu": [0.5, 0.3, 0.2],
                                             "cost": [[0, 1, 2], [1, 0, 1], [2, 1, 0]]}])
    assert main(["ot-bench", str(good), "--json", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["instances"][0]["fast_dirac"] == pytest.approx(0.7)
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"mu":[1,0],"nu":[1,0],"cost":[[0,1],[1,0]]}\n{oops\n')
    assert main(["ot-bench", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err
    assert main(["ot-bench", str(tmp_path / "missing.jsonl")]) == 2


def test_train_eval_and_cluster(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("total_steps = 120\neval_interval = 60\nhidden = 8\nn_samples = 100\nn_test = 100\ncost_momentum = 0.9\n")
    out = tmp_path / "run"
    assert main(["train", str(cfg), "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists() and (out / "timing.csv").exists()
    ck = str(out / "checkpoint.npz")
    capsys.readouterr()
    assert main(["eval", ck]) == 0
    assert json.loads(capsys.readouterr().out)["step"] == 120
    assert main(["cost-cluster", ck, "--labels", "upper,lower"]) == 0
    tree = json.loads((out / "dendrogram.json").read_text())
    assert tree["members"] == [0, 1] and tree["left"]["label"] == "upper"
    assert (out / "cost.csv").read_text().startswith(",upper,lower")
    assert main(["cost-cluster", ck, "--labels", "a,b,c"]) == 2


def test_train_rejects_bad_config(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("lam = -2\n")
    assert main(["train", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["eval", str(tmp_path / "nothing.npz")]) == 2


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "otmatch", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("train", "eval", "ot-bench", "cost-cluster"):
        assert cmd in res.stdout
