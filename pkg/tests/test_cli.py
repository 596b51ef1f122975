"""End-to-end CLI coverage, in-process via main(argv).

One subprocess test at the bottom exercises the installed console script;
everything else calls main() directly so coverage and debuggers see it.
"""

import filecmp
import json
import shutil
import subprocess
import sys

import pytest

from costshare import schedule_from_jsonable, schedule_to_jsonable, verify_equilibrium
from costshare.cli import DATA_FILES, main, snapshot_from_jsonable
from costshare.dynamics import ArrivalEvent, ArrivalItem
from costshare.metric import instance_to_dict
from conftest import line_instance


def _read_summary(path):
    header, row = path.read_text().splitlines()
    return dict(zip(header.split(","), row.split(",")))


# ---------------------------------------------------------------------------
# gen


def test_gen_gm_writes_instance_schedule_and_paths(tmp_path, capsys):
    assert main(["gen", "--gen", "gm", "--m", "2", "--out", str(tmp_path)]) == 0
    assert "n=13" in capsys.readouterr().out
    events = schedule_from_jsonable(json.loads((tmp_path / "schedule.json").read_text()))
    assert len(events) == 32
    paths = json.loads((tmp_path / "paths.json").read_text())
    assert sorted(paths) == ["1,1", "1,2", "2,1", "2,2"]
    assert all(len(p) == 4 and p[-1] == 0 for p in paths.values())


def test_gen_poa_snapshot_passes_verify(tmp_path, capsys):
    assert main(["gen", "--gen", "poa", "--n", "5", "--out", str(tmp_path)]) == 0
    snap = tmp_path / "snapshot.json"
    assert main(["verify", str(snap)]) == 0
    out = capsys.readouterr().out
    assert "equilibrium: yes" in out and "certified yes" in out

    state, family = snapshot_from_jsonable(json.loads(snap.read_text()))
    assert verify_equilibrium(state).ok
    family.check_invariants()


def test_verify_rejects_doctored_snapshot(tmp_path, capsys):
    main(["gen", "--gen", "poa", "--n", "5", "--out", str(tmp_path)])
    snap = json.loads((tmp_path / "snapshot.json").read_text())
    snap["terminals"][0][1] = 1  # melt the crowd down to one agent
    doctored = tmp_path / "doctored.json"
    doctored.write_text(json.dumps(snap))
    assert main(["verify", str(doctored)]) == 4
    assert "equilibrium: NO" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# run


def test_run_gm_noneqp_summary_row(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--gen", "gm", "--m", "2", "--mode", "noneqp",
                 "--out", str(out)]) == 0
    assert "final cost 12" in capsys.readouterr().out
    for name in DATA_FILES + ("meta.json",):
        assert (out / name).exists()
    row = _read_summary(out / "summary.csv")
    assert row["label"] == "gm-m2"
    assert (row["final_cost"], row["opt_cost"], row["ratio"]) == ("12", "10", "1.2")
    assert (row["events"], row["moves"], row["agents"]) == ("32", "0", "8")
    assert row["certified"] == "True" and row["verified"] == "True"
    assert row["final_class"] == "balanced-equilibrium"
    assert len((out / "events.jsonl").read_text().splitlines()) == 32

    acc = json.loads((out / "accounting.json").read_text())
    assert acc["total_cost"] == "12" and acc["certified"] is True
    assert len(acc["levels"]) == acc["levels_charged"]


def test_run_twice_is_byte_identical(tmp_path):
    argv = ["run", "--gen", "euclidean", "--n", "25", "--seed", "1"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    for name in DATA_FILES:
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name,
                           shallow=False), name


def test_run_euclidean_eqp_snapshot_is_an_equilibrium(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--gen", "euclidean", "--n", "25", "--seed", "1",
                 "--out", str(out)]) == 0
    state, family = snapshot_from_jsonable(
        json.loads((out / "snapshot.json").read_text()))
    assert verify_equilibrium(state).ok
    row = _read_summary(out / "summary.csv")
    assert int(row["moves"]) > 0  # churn forces at least some rebalancing


def _write_line_fixture(tmp_path, events):
    inst = line_instance(0, 10, 6)
    ipath = tmp_path / "instance.json"
    spath = tmp_path / "schedule.json"
    ipath.write_text(json.dumps(instance_to_dict(inst)))
    spath.write_text(json.dumps(schedule_to_jsonable(events)))
    return ipath, spath


def test_run_from_files(tmp_path):
    ipath, spath = _write_line_fixture(tmp_path, [
        ArrivalEvent((ArrivalItem(1, 1),)),
        ArrivalEvent((ArrivalItem(2, 1),)),
    ])
    out = tmp_path / "out"
    assert main(["run", "--instance", str(ipath), "--schedule", str(spath),
                 "--out", str(out)]) == 0
    row = _read_summary(out / "summary.csv")
    assert (row["label"], row["final_cost"], row["moves"]) == ("instance", "10", "1")


def test_exit_code_3_on_move_ceiling_breach(tmp_path, capsys):
    ipath, spath = _write_line_fixture(tmp_path, [
        ArrivalEvent((ArrivalItem(1, 1),)),
        ArrivalEvent((ArrivalItem(2, 1),)),
    ])
    rc = main(["run", "--instance", str(ipath), "--schedule", str(spath),
               "--move-ceiling", "0", "--out", str(tmp_path / "out")])
    assert rc == 3
    assert "invariant violated" in capsys.readouterr().err


def test_exit_code_3_on_broken_path_pin(tmp_path, capsys):
    ipath, spath = _write_line_fixture(tmp_path, [
        ArrivalEvent((ArrivalItem(1, 1, (1, 0)),)),
        ArrivalEvent((ArrivalItem(2, 1, (2, 1, 0)),)),  # engine picks (2, 0)
    ])
    rc = main(["run", "--instance", str(ipath), "--schedule", str(spath),
               "--mode", "noneqp", "--out", str(tmp_path / "out")])
    assert rc == 3
    assert "engine chose" in capsys.readouterr().err


def test_exit_code_4_on_unstable_oneshot_state(tmp_path, capsys):
    rc = main(["run", "--gen", "euclidean", "--n", "20", "--seed", "0",
               "--mode", "noneqp", "--out", str(tmp_path / "out")])
    assert rc == 4
    assert "not an equilibrium" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["run", "--gen", "gm", "--out", "{tmp}"],                      # missing --m
    ["run", "--gen", "euclidean", "--out", "{tmp}"],               # missing --n
    ["run", "--gen", "poa", "--n", "5", "--out", "{tmp}"],         # no schedule
    ["run", "--instance", "{tmp}/nope.json", "--out", "{tmp}"],    # missing file
    ["run", "--out", "{tmp}"],                                     # nothing to run
    ["verify", "{tmp}/nope.json"],
    ["sweep", "--gen", "euclidean", "--mode", "eqp", "--out", "{tmp}"],
])
def test_exit_code_2_on_config_errors(tmp_path, capsys, argv):
    rc = main([a.replace("{tmp}", str(tmp_path)) for a in argv])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_run_rejects_gen_and_instance_together(tmp_path, capsys):
    ipath, spath = _write_line_fixture(tmp_path, [ArrivalEvent((ArrivalItem(1, 1),))])
    rc = main(["run", "--gen", "gm", "--m", "1", "--instance", str(ipath),
               "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "not both" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# replay


def test_replay_round_trip_then_divergence(tmp_path, capsys):
    out = tmp_path / "run"
    main(["run", "--gen", "euclidean", "--n", "12", "--seed", "2",
          "--out", str(out)])
    assert main(["replay", str(out)]) == 0
    assert "byte-identical" in capsys.readouterr().out

    events = out / "events.jsonl"
    events.write_text(events.read_text()[:-2] + "9\n")
    assert main(["replay", str(out)]) == 4
    assert "events.jsonl" in capsys.readouterr().out


def test_replay_refuses_sweep_directories(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("COSTSHARE_THREADS", "1")
    out = tmp_path / "sweep"
    assert main(["sweep", "--gen", "gm", "--m", "1", "--mode", "noneqp",
                 "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["replay", str(out)]) == 2


# ---------------------------------------------------------------------------
# sweep


def test_sweep_gm_grid(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("COSTSHARE_THREADS", "1")
    out = tmp_path / "sweep"
    assert main(["sweep", "--gen", "gm", "--m", "1,2", "--mode", "noneqp",
                 "--out", str(out)]) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert len(lines) == 3
    assert lines[1].startswith("gm-m1,noneqp") and ",2," in lines[1]
    assert lines[2].startswith("gm-m2,noneqp") and ",12," in lines[2]
    meta = json.loads((out / "meta.json").read_text())
    assert meta["workers"] == 1 and len(meta["config"]["jobs"]) == 2


def test_sweep_euclidean_parallel(tmp_path, monkeypatch):
    monkeypatch.setenv("COSTSHARE_THREADS", "2")
    out = tmp_path / "sweep"
    assert main(["sweep", "--gen", "euclidean", "--n", "10,12",
                 "--seeds", "0,1", "--out", str(out)]) == 0
    lines = (out / "summary.csv").read_text().splitlines()
    assert len(lines) == 5
    labels = [ln.split(",")[0] for ln in lines[1:]]
    assert labels == sorted(labels)
    assert json.loads((out / "meta.json").read_text())["workers"] == 2


def test_sweep_rejects_bad_thread_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("COSTSHARE_THREADS", "many")
    rc = main(["sweep", "--gen", "gm", "--m", "1", "--mode", "noneqp",
               "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "COSTSHARE_THREADS" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# the installed entry point


def test_console_script_runs():
    exe = shutil.which("costshare")
    if exe is None:
        pytest.skip("console script not on PATH (non-editable test env?)")
    proc = subprocess.run([exe, "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip().startswith("costshare ")


def test_module_invocation_runs():
    proc = subprocess.run([sys.executable, "-m", "costshare.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("gen", "run", "verify", "sweep", "replay"):
        assert sub in proc.stdout
