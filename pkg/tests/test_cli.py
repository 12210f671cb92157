import csv

import numpy as np
import pytest

from platoon_mpc import cli
from platoon_mpc.cli import BatchSpec, emit_plot_data, enumerate_permutations, main, run_batch
from platoon_mpc.config import load_config
from platoon_mpc.sim import ScenarioConfig, platoon_params, run_scenario
from platoon_mpc.road import GradeProfile


def _read(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("k,count", [(3, 24), (1, 4), (4, 24), (2, 12)])
def test_permutation_counts(k, count):
    perms = enumerate_permutations(BatchSpec(platoon_size=k))
    assert len(perms) == count
    assert perms == sorted(perms)
    assert all(len(set(p)) == k for p in perms)


def test_batch_spec_validation():
    with pytest.raises(ValueError):
        BatchSpec(platoon_size=5)
    with pytest.raises(ValueError):
        BatchSpec(mass_set=(14000.0, 14000.0), platoon_size=1)


def _tiny_config(tmp_path, controllers='["cacc", "considerate"]', extra=""):
    route = tmp_path / "flat.csv"
    route.write_text("s_m,grade_rad\n0,0\n300,0.02\n600,0.02\n")
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(f"""
[scenario]
route = "flat.csv"
{extra}
[batch]
mass_set_t = [14.0, 38.0]
platoon_size = 2
controllers = {controllers}
route = "flat.csv"
batch_id = "tiny"
""")
    return cfg


@pytest.fixture(scope="module")
def tiny_batch(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("batch")
    cfg = _tiny_config(tmp)
    spec = BatchSpec.from_config(load_config(cfg), tmp / "out")
    return spec, run_batch(spec)


def test_batch_layout_and_summary_shape(tiny_batch):
    spec, table = tiny_batch
    root = spec.out_dir / "tiny"
    for c in ("cacc", "considerate"):
        for o in ("14-38", "38-14"):
            assert (root / c / o / "trajectory.csv").is_file()
            assert (root / c / o / "metrics.csv").is_file()
    rows = _read(root / "summary.csv")
    assert [(r["controller"], r["truck"]) for r in rows] == [
        ("cacc", "1"), ("cacc", "2"), ("considerate", "1"), ("considerate", "2")]
    assert {"fuel_kg_per_100km_mean", "headway_s_std", "gap_rmse_m_mean", "disengagements_mean",
            "travel_time_s_mean"} <= set(rows[0])
    assert not table.failures
    assert (root / "summary.txt").read_text().startswith("cacc (2 runs)")


def test_summary_uses_population_std(tiny_batch):
    _, table = tiny_batch
    vals = table.values("considerate", 0, "fuel_kg_per_100km")
    assert vals.size == 2
    assert table.stat("considerate", 0, "fuel_kg_per_100km")[1] == pytest.approx(abs(vals[0] - vals[1]) / 2)
    per_run = [sum(t.fuel_kg_per_100km for t in r.metrics) for r in table.runs("considerate")]
    assert table.platoon_fuel("considerate") == pytest.approx(np.mean(per_run))


def test_batch_is_byte_reproducible(tiny_batch, tmp_path):
    spec, _ = tiny_batch
    again = BatchSpec.from_config(spec.base, tmp_path, jobs=2)
    run_batch(again)
    for name in ("summary.csv", "runs.csv"):
        assert (tmp_path / "tiny" / name).read_bytes() == (spec.out_dir / "tiny" / name).read_bytes()


def test_failed_run_is_recorded_and_batch_continues(tmp_path, monkeypatch):
    real = cli.run_scenario

    def flaky(sc):
        if sc.trucks[0].m == 38000.0:
            raise RuntimeError("boom")
        return real(sc)
    monkeypatch.setattr(cli, "run_scenario", flaky)
    cfg = _tiny_config(tmp_path, controllers='["cacc"]')
    assert main(["batch", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    root = tmp_path / "o" / "tiny"
    assert "boom" in (root / "cacc" / "38-14" / "error.txt").read_text()
    assert (root / "cacc" / "14-38" / "metrics.csv").is_file()
    runs = _read(root / "runs.csv")
    assert [r["status"] for r in runs] == ["ok", "ok", "failed"]
    assert "FAILED RUNS: 1" in (root / "summary.txt").read_text()


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[scenario]\nmystery = 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "mystery" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    ok = _tiny_config(tmp_path, extra='masses_t = [14.0]\ncontroller = "cacc"\nname = "solo"')
    assert main(["run", "--config", str(ok), "--out", str(tmp_path / "o")]) == 0
    for f in ("trajectory.csv", "metrics.csv", "plots/travel.csv", "plots/traces.csv", "plots/deltas.csv"):
        assert (tmp_path / "o" / "solo" / f).is_file()


def test_fit_drag_command(tmp_path, capsys):
    assert main(["fit-drag", "--out", str(tmp_path)]) == 0
    row = _read(tmp_path / "drag_fit.csv")[0]
    assert float(row["rmse"]) <= 2e-3
    bad = tmp_path / "bad.csv"
    bad.write_text("gap,beta\n1,2\n")
    assert main(["fit-drag", "--data", str(bad), "--out", str(tmp_path)]) == 2
    # too few points for four coefficients
    few = tmp_path / "few.csv"
    few.write_text("gap_m,beta\n5,0.8\n10,0.85\n")
    assert main(["fit-drag", "--data", str(few), "--out", str(tmp_path)]) == 2


def test_check_command(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") >= 5 and "[FAIL]" not in out


# -- plot data

def _flat_pair():
    prof = GradeProfile.from_breakpoints([(-1000.0, 0.0), (3000.0, 0.0)], 3000.0)
    cfg = ScenarioConfig(platoon_params([38000.0, 38000.0]), prof, "considerate", schedule_margin=0.0)
    return cfg, run_scenario(cfg)[0]


def test_travel_and_delta_plots(tmp_path):
    cfg, log = _flat_pair()
    travel = _read(emit_plot_data(log, "travel", tmp_path, trucks=[1]))
    assert {r["truck"] for r in travel} == {"2"}
    assert np.all(np.diff([float(r["t_s"]) for r in travel]) > 0)
    deltas = _read(emit_plot_data(log, "deltas", tmp_path))
    dv = np.array([float(r["dv"]) for r in deltas])
    assert dv.size == log.n_steps
    # steady until the finish approaches and the shared arrival schedule pulls the trucks apart
    before = log.data["s"][:, 0] < 2000.0
    assert np.max(np.abs(dv[before])) < 1e-2
    with pytest.raises(ValueError):
        emit_plot_data(log, "nope", tmp_path)


@pytest.mark.slow
def test_torque_trace_saturates_on_the_climb(s_road_runs, tmp_path):
    log = s_road_runs["considerate"][0]
    rows = _read(emit_plot_data(log, "traces", tmp_path, trucks=[2],
                                params=platoon_params([14000.0, 38000.0, 38000.0])))
    t = np.array([float(r["t_s"]) for r in rows])
    s = log.data["s"][:, 2]
    uphill = (s > 20000) & (s < 30000)
    ratio = np.array([float(r["torque"]) / float(r["torque_limit"]) for r in rows])
    assert np.max(ratio[uphill]) >= 0.99
    assert t.size == uphill.size
