import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from hipinn.xcli import (
    ConfigError,
    RunSummary,
    derive_seed,
    expand_runs,
    load_summaries,
    main,
    parse_config,
    report,
    run_experiments,
)

TINY = """
name: tiny
problem: manufactured:sin_pi_1d
samples: {interior: 16, boundary: 2}
weighting: {mode: ntk, every: 10}
levels:
  - network: {type: mlp, hidden: [6]}
    iterations: 30
reference: {resolution: 21}
output: {stride: 10}
"""


def tiny(**overrides):
    d = yaml.safe_load(TINY)
    d.update(overrides)
    return yaml.safe_dump(d)


def summary(run_id, err, status="ok"):
    return RunSummary(run_id, "h", "v", 0, {}, 1, status, err, {}, 0.5)


# parsing ----------------------------------------------------------------------


def test_minimal_config_defaults():
    cfg = parse_config("problem: poisson2d\nlevels:\n  - {network: {type: mlp, hidden: [8]}, iterations: 10}\n")
    d = cfg.data
    assert d["samples"] == {"interior": 400, "boundary": 400, "resample": False}
    assert d["optimizer"]["lr"] == 1e-3
    assert d["weighting"] == {"mode": "ntk", "every": 100}
    assert d["reference"]["resolution"] == 201
    assert d["output"]["stride"] == 100
    assert len(expand_runs(cfg)) == 1


def test_negative_sigma_names_field_path():
    text = "problem: poisson2d\nlevels:\n  - {network: {type: fourier, sigmas: [1, -1]}, iterations: 10}\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert any(v.startswith("levels[0].network.sigmas[1]") for v in err.value.violations)


def test_all_violations_collected():
    text = """
problem: wave
bogus: 1
samples: {interior: -3}
variants:
  - name: a
    levels: [{network: {type: mlp}, iterations: 0}]
"""
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    paths = [v.split(":")[0] for v in err.value.violations]
    for expected in ("problem", "bogus", "samples.interior", "variants[0].levels[0].network.hidden",
                     "variants[0].levels[0].iterations"):
        assert expected in paths


def test_levels_and_variants_exclusive():
    with pytest.raises(ConfigError, match="exactly one"):
        parse_config("problem: poisson2d\n")


def test_invalid_yaml():
    with pytest.raises(ConfigError):
        parse_config("problem: [unclosed\n")


def test_full_scale_replica_expands_to_one_run():
    text = """
problem: poisson2d
samples: {interior: 400, boundary: 400}
levels:
  - network: {type: fourier, sigmas: [1], features: 100, extractor: [200, 200, 200], dense: 200}
    iterations: 60000
  - network: {type: fourier, sigmas: [5], features: 100, extractor: [200, 200, 200], dense: 200}
    iterations: 140000
"""
    runs = expand_runs(parse_config(text))
    assert len(runs) == 1
    assert [lv["iterations"] for lv in runs[0].levels] == [60000, 140000]
    assert [lv["network"]["sigmas"] for lv in runs[0].levels] == [[1], [5]]


def test_sweep_expansion():
    text = """
problem: poisson2d
repeats: 2
variants:
  - name: single
    levels: [{network: {type: fourier, sigmas: [1]}, iterations: 40000}]
  - name: hier
    levels:
      - {network: {type: fourier, sigmas: [1]}, iterations: 15000}
      - {network: {type: fourier, sigmas: [5]}, iterations: 25000}
sweep:
  transition: [10000, 20000, 30000]
  sigma: [1, [1, 5]]
"""
    runs = expand_runs(parse_config(text))
    # per repeat: single 2 sigmas, hier 3 transitions x 2 sigmas
    assert len(runs) == 2 * (2 + 6)
    hier = [r for r in runs if r.variant == "hier" and r.repeat == 0]
    assert {tuple(lv["iterations"] for lv in r.levels) for r in hier} == {(10000, 30000), (20000, 20000), (30000, 10000)}
    assert all(r.levels[1]["network"]["sigmas"] == [5] for r in hier)
    assert len({r.run_id for r in runs}) == len(runs)
    assert len({r.sample_seed for r in runs if r.repeat == 0}) == 1
    assert len({r.seed for r in runs}) == len(runs)


def test_transition_out_of_range():
    text = """
problem: poisson2d
levels:
  - {network: {type: mlp, hidden: [4]}, iterations: 10}
  - {network: {type: mlp, hidden: [4]}, iterations: 10}
sweep: {transition: [25]}
"""
    with pytest.raises(ConfigError, match="transition"):
        parse_config(text)


def test_config_hash_semantic():
    a = parse_config("problem: poisson2d\nlevels: [{network: {type: mlp, hidden: [8]}, iterations: 10}]\n")
    b = parse_config("levels: [{iterations: 10, network: {hidden: [8], type: mlp}}]\nproblem: poisson2d\nseed: 0\n")
    assert a.hash() == b.hash()
    c = parse_config("problem: poisson2d\nseed: 1\nlevels: [{network: {type: mlp, hidden: [8]}, iterations: 10}]\n")
    assert a.hash() != c.hash()


def test_seed_derivation_is_stable():
    assert derive_seed(0, 3) == derive_seed(0, 3)
    assert derive_seed(0, 3) != derive_seed(1, 3)


# running ---------------------------------------------------------------------------


def test_transition_sweep_cardinality(tmp_path):
    text = tiny(
        levels=[
            {"network": {"type": "mlp", "hidden": [4]}, "iterations": 20},
            {"network": {"type": "mlp", "hidden": [4]}, "iterations": 20},
        ],
        sweep={"transition": [10, 20, 30]},
    )
    summaries = run_experiments(parse_config(text), tmp_path)
    assert len(summaries) == 3
    assert len(list(tmp_path.glob("*/trace.csv"))) == 3
    assert all(s.status == "ok" for s in summaries)


def test_outputs_and_manifest(tmp_path):
    summaries = run_experiments(parse_config(tiny()), tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    on_disk = {str(p.relative_to(tmp_path)) for p in tmp_path.rglob("*") if p.is_file()}
    assert on_disk - {"manifest.json"} <= set(manifest["files"])
    assert set(manifest["files"]) <= on_disk
    run_dir = tmp_path / summaries[0].run_id
    trace = (run_dir / "trace.csv").read_text().splitlines()
    assert trace[0].startswith("iteration,level,loss_interior,loss_boundary")
    assert len(trace) == 1 + 3
    pred = np.loadtxt(run_dir / "prediction.txt")
    assert pred.shape == (21,)


def test_two_dimensional_grid_dumps(tmp_path):
    text = tiny(problem="manufactured:sin_pi_2d", levels=[{"network": {"type": "mlp", "hidden": [4]}, "iterations": 5}])
    s = run_experiments(parse_config(text), tmp_path)[0]
    assert np.loadtxt(tmp_path / s.run_id / "prediction.txt").shape == (21, 21)
    assert np.loadtxt(tmp_path / s.run_id / "error.txt").shape == (21, 21)


def test_identical_runs_identical_outputs(tmp_path):
    a = run_experiments(parse_config(tiny()), tmp_path / "a")[0]
    b = run_experiments(parse_config(tiny()), tmp_path / "b")[0]
    da, db = json.loads(a.to_json()), json.loads(b.to_json())
    da.pop("wall_time"), db.pop("wall_time")
    assert da == db
    assert (tmp_path / "a" / a.run_id / "trace.csv").read_bytes() == (tmp_path / "b" / b.run_id / "trace.csv").read_bytes()


def test_failed_run_does_not_stop_sweep(tmp_path, monkeypatch):
    import hipinn.xcli as xcli

    real = xcli.train

    def flaky(problem, schedule, *args, **kw):
        if schedule.levels[0].network.hidden_widths == (5,):
            raise FloatingPointError("boom")
        return real(problem, schedule, *args, **kw)

    monkeypatch.setattr(xcli, "train", flaky)
    text = tiny(sweep={"hidden_widths": [[4], [5], [6]]})
    summaries = run_experiments(parse_config(text), tmp_path)
    assert [s.status for s in summaries] == ["ok", "failed", "ok"]
    assert "boom" in summaries[1].message


def test_parallel_workers_match_serial(tmp_path):
    text = tiny(sweep={"hidden_widths": [[4], [5]]})
    serial = run_experiments(parse_config(text), tmp_path / "s", workers=1)
    par = run_experiments(parse_config(text), tmp_path / "p", workers=2)
    assert [s.final_error for s in serial] == [s.final_error for s in par]


# reporting ---------------------------------------------------------------------------


def test_report_single_row():
    text, table = report([summary("r0", 0.1)])
    assert len(table.strip().splitlines()) == 2
    assert len(text.strip().splitlines()) == 2


def test_report_sorted_and_flags_best():
    _, table = report([summary("big", 1e-2), summary("small", 1e-3), summary("broken", None, "failed")])
    rows = [line.split(",") for line in table.strip().splitlines()[1:]]
    assert [r[2] for r in rows] == ["small", "big", "broken"]
    assert rows[0][1] == "*" and rows[1][1] == ""


def test_report_matches_summary_files(tmp_path):
    run_experiments(parse_config(tiny(sweep={"hidden_widths": [[4], [6]]})), tmp_path)
    rows = [line.split(",") for line in (tmp_path / "report.csv").read_text().strip().splitlines()[1:]]
    for r in rows:
        s = json.loads((tmp_path / r[2] / "summary.json").read_text())
        assert float(r[6]) == s["final_error"]
        assert int(r[8]) == s["seed"] and r[5] == s["status"] and r[3] == s["variant"]
    assert load_summaries(tmp_path)[0].run_id in {r[2] for r in rows}


def test_report_requires_runs():
    with pytest.raises(ValueError):
        report([])


# command line ------------------------------------------------------------------------


def test_cli_validate_and_errors(tmp_path, capsys):
    good = tmp_path / "good.yaml"
    good.write_text(tiny())
    assert main(["validate", str(good)]) == 0
    assert "1 runs" in capsys.readouterr().out
    bad = tmp_path / "bad.yaml"
    bad.write_text(tiny(seed="x"))
    assert main(["validate", str(bad)]) == 2
    assert "seed" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.yaml")]) == 2


def test_cli_run_and_report(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(tiny())
    out = tmp_path / "out"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    (out / "report.txt").unlink()
    assert main(["report", str(out)]) == 0
    assert (out / "report.txt").exists()
    assert main(["report", str(tmp_path / "empty")]) == 2


def test_cli_exit_code_on_failure(tmp_path, monkeypatch):
    import hipinn.xcli as xcli

    def broken(*a, **k):
        raise RuntimeError("nope")

    monkeypatch.setattr(xcli, "train", broken)
    cfg = tmp_path / "c.yaml"
    cfg.write_text(tiny())
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_worker_env_override(monkeypatch):
    from hipinn.xcli import worker_count

    monkeypatch.setenv("HIPINN_WORKERS", "3")
    assert worker_count() == 3


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(tiny())
    res = subprocess.run([sys.executable, "-m", "hipinn", "validate", str(cfg)], capture_output=True, text=True)
    assert res.returncode == 0 and "ok" in res.stdout
    assert Path(cfg).exists()
