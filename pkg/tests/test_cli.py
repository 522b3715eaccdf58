import csv
import io
import json
import math

import pytest

from logz.cli import ConfigError, build_parser, cmd_bench, main, parse_json, strip_timing


def write(path, obj):
    path.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return str(path)


SMOKE = {"target": {"type": "gaussian", "d": 2}, "method": "mlmc-uld", "eps": 0.25, "seed": 7}


def test_estimate_smoke(tmp_path):
    cfg = write(tmp_path / "c.json", SMOKE)
    out, stages = tmp_path / "r.json", tmp_path / "s.csv"
    assert main(["estimate", cfg, "--out", str(out), "--csv", str(stages)]) == 0
    rep = json.loads(out.read_text())
    assert math.isfinite(rep["z_hat"]) and rep["queries"]["grad"] > 0
    assert rep["config"]["seed"] == 7 and rep["config"]["target"] == SMOKE["target"]
    rows = list(csv.reader(io.StringIO(stages.read_text())))
    assert rows[0] == ["stage", "sigma_sq", "r_hat", "r_plus", "R_hat", "queries", "seconds"]
    assert len(rows) == 1 + rep["schedule"]["M"]
    assert b"\r\n" not in stages.read_bytes()


def test_estimate_byte_identical_and_threads(tmp_path):
    cfg = write(tmp_path / "c.json", SMOKE)
    outs = []
    for i, threads in enumerate(("1", "1", "4")):
        p = tmp_path / f"r{i}.json"
        assert main(["estimate", cfg, "--out", str(p), "--strip-timing", "--threads", threads]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_seed_env_override(tmp_path, monkeypatch):
    cfg = write(tmp_path / "c.json", dict(SMOKE, method="mala", eps=0.4))
    monkeypatch.setenv("LOGZ_SEED", "3")
    p = tmp_path / "r.json"
    assert main(["estimate", cfg, "--out", str(p), "--strip-timing"]) == 0
    assert json.loads(p.read_text())["seed"] == 3


def test_estimate_invalid_eps(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", dict(SMOKE, eps=0))
    assert main(["estimate", cfg]) == 2
    assert "eps" in capsys.readouterr().err


def test_estimate_bad_json_has_line_context(tmp_path, capsys):
    cfg = write(tmp_path / "c.json", '{\n  "eps": 0.25,\n  "method" "mala"\n}')
    assert main(["estimate", cfg]) == 2
    err = capsys.readouterr().err
    assert "c.json:3:" in err and '"method" "mala"' in err
    with pytest.raises(ConfigError):
        parse_json("[1,")


def test_estimate_check_failure_exit_4(tmp_path):
    bad = {"target": {"type": "gaussian", "d": 2}, "method": "mala", "eps": 0.25, "seed": 1,
           "settings": {"max_stages": 1, "mala_max_samples": 1}}
    cfg = write(tmp_path / "c.json", bad)
    p = tmp_path / "r.json"
    assert main(["estimate", cfg, "--check", "--out", str(p)]) == 4
    assert json.loads(p.read_text())["check"]["passed"] is False


def test_estimate_numerical_failure_exit_3(tmp_path):
    # a single huge step makes the chain diverge and trips the finite-value guards
    bad = {"target": {"type": "diag_quadratic", "lambdas": [1.0, 1e6]}, "method": "mlmc-uld",
           "eps": 0.5, "seed": 0,
           "settings": {"eta_max_factor": 1e9, "eta_floor": 100.0, "max_stages": 2}}
    cfg = write(tmp_path / "c.json", bad)
    p = tmp_path / "r.json"
    code = main(["estimate", cfg, "--out", str(p)])
    assert code == 3
    assert json.loads(p.read_text())["status"] == "failed"


def test_bench_rows_and_queries(tmp_path):
    p = tmp_path / "b.csv"
    assert main(["bench", "--methods", "mlmc-uld", "mala", "--d", "2", "4", "8", "--eps", "0.3",
                 "--out", str(p)]) == 0
    rows = list(csv.DictReader(io.StringIO(p.read_text())))
    assert len(rows) == 6
    assert all(float(r["rel_error"]) == float(r["rel_error"]) for r in rows)
    # queries equals the prediction of an identical rerun's report
    from logz.annealing import PipelineSettings, run_method
    from logz.potentials import make_gaussian
    rep = run_method(make_gaussian(2), 0.3, "mala", 0, PipelineSettings.desk())
    mala2 = [r for r in rows if r["method"] == "mala" and r["d"] == "2"][0]
    assert int(mala2["queries"]) == rep.predicted_grad_queries == rep.grad_queries


def test_bench_empty_sweep():
    args = build_parser().parse_args(["bench"])
    args.d = []
    with pytest.raises(ConfigError, match="at d"):
        cmd_bench(args)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["bench", "--d"])


def test_oracle_gaussian(capsys):
    assert main(["oracle", "gaussian", "--lambdas", "1", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["log_z"] == pytest.approx(1.837877, abs=1e-6)


def test_oracle_quadrature_and_ratio(capsys):
    assert main(["oracle", "quadrature", "--lambdas", "1", "--quad-eps", "1e-3"]) == 0
    assert json.loads(capsys.readouterr().out)["z"] == pytest.approx(math.sqrt(2 * math.pi), abs=1e-3)
    assert main(["oracle", "stage-ratio", "--s2", "1", "--sigma-sq", "1", "--d", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["ratio"] == pytest.approx(2.0)


def test_sample_uld_trace(tmp_path):
    p = tmp_path / "t.csv"
    assert main(["sample", "uld", "--d", "1", "--eta", "0.1", "--T", "1", "--out", str(p)]) == 0
    rows = list(csv.reader(io.StringIO(p.read_text())))
    assert rows[0] == ["chain", "t", "x1", "v1"] and len(rows) == 11


def test_hardgen_hardverify_round_trip(tmp_path, capsys):
    p = tmp_path / "h.json"
    assert main(["hardgen", "--k", "1", "--n", "4", "--types", "1,1,1,1", "--out", str(p)]) == 0
    inst = json.loads(p.read_text())
    assert inst["types"] == [1, 1, 1, 1]
    assert main(["hardverify", str(p), "--points", "300"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["ok"] and rep["n_type2"] == 0 and rep["min_eig"] == rep["max_eig"] == 1.0
    q = tmp_path / "h2.json"
    assert main(["hardgen", "--k", "2", "--n", "4", "--p-type1", "0.5", "--seed", "2",
                 "--mode", "equalized", "--out", str(q)]) == 0
    from logz.hardness import HardInstance
    text = q.read_text()
    assert HardInstance.from_json(text).to_json() + "\n" == text


def test_hardgen_errors():
    assert main(["hardgen", "--k", "2", "--n", "5", "--types", "1,1,1,1,1"]) == 2
    assert main(["hardgen", "--k", "1", "--n", "4"]) == 2


def test_strip_timing_removes_wall_clock():
    out = strip_timing({"wall_time": 1.0, "stages": [{"seconds": 2.0, "stage": 1}]})
    assert out == {"stages": [{"stage": 1}]}
