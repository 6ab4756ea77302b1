import pytest

from hsclusters.cli import run
from hsclusters.dynamics import CollisionLog
from hsclusters.harness import RunManifest, read_table


def test_theory_table(tmp_path, capsys):
    assert run(["theory", "--t", "0.6931", "--kmax", "10", "--out", str(tmp_path)]) == 0
    rows = read_table(tmp_path / "theory.csv")
    assert len(rows) == 11
    for r in rows:
        assert r["pmf"] == pytest.approx(0.5 ** (r["k"] + 1), rel=1e-3)
    assert "k,pmf" in capsys.readouterr().out


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(["simulate", "--n", "2", "--beta", "1", "--t", "1", "--seed", "7", "--out", str(d)]) == 0
    assert (a / "log.txt").read_bytes() == (b / "log.txt").read_bytes()
    assert (a / "final_state.txt").read_bytes() == (b / "final_state.txt").read_bytes()
    assert CollisionLog.read(a / "log.txt").n_particles == 2


def test_clusters_pipeline_shape_and_replay(tmp_path):
    out = tmp_path / "c"
    argv = ["clusters", "--n", "100", "--beta", "1", "--grid", "0.5,1,2", "--units", "tau",
            "--samples", "300", "--root-average", "true", "--seed", "1", "--out", str(out)]
    assert run(argv) == 0
    hists = sorted(out.glob("histogram_*.csv"))
    assert len(hists) == 3
    for h in hists:
        rows = read_table(h)
        assert [list(r) for r in rows[:1]] == [["k", "count", "probability", "stderr"]]
        assert sum(r["count"] for r in rows) == 300
    series = read_table(out / "size_series.csv")
    assert [r["t"] for r in series] == sorted(r["t"] for r in series)
    assert [r["S"] for r in series] == sorted(r["S"] for r in series)
    man = RunManifest.read(out / "manifest.json")
    assert man.command == "clusters" and man.extra["root_average"] is True
    assert len(man.seeds) == 3
    replay = tmp_path / "r"
    assert run(["clusters", "--from-manifest", str(out / "manifest.json"), "--out", str(replay)]) == 0
    for f in out.glob("*.csv"):
        assert (replay / f.name).read_bytes() == f.read_bytes()


def test_percolation_mfp_and_ibf(tmp_path):
    assert run(["percolation", "--n", "100", "--grid", "0,1,3", "--units", "tau", "--samples", "2",
                "--out", str(tmp_path / "p")]) == 0
    rows = read_table(tmp_path / "p" / "percolation.csv")
    assert rows[0]["fraction"] == pytest.approx(0.01)
    assert run(["mfp", "--n", "50", "--samples", "10", "--out", str(tmp_path / "m")]) == 0
    m = read_table(tmp_path / "m" / "mfp.csv")[0]
    assert m["tau"] == pytest.approx(m["kinetic"], rel=0.25)
    assert run(["ibf-roundtrip", "--samples", "5", "--out", str(tmp_path / "i")]) == 0
    assert all(r["ok"] == "true" for r in read_table(tmp_path / "i" / "ibf_roundtrip.csv"))


def test_exit_codes(tmp_path, capsys):
    assert run(["clusters", "--bogus", "1"]) == 2
    assert run(["clusters", "--beta", "-1", "--out", str(tmp_path)]) == 2
    assert run(["clusters", "--grid", "a,b"]) == 2
    assert run([]) == 2
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["theory", "--out", str(blocker / "sub")]) == 1
    assert "failed" in capsys.readouterr().err


def test_env_default_out_and_config_file(tmp_path, monkeypatch):
    monkeypatch.setenv("HSCLUSTERS_OUT", str(tmp_path / "envout"))
    assert run(["theory", "--t", "1"]) == 0
    assert (tmp_path / "envout" / "theory.csv").exists()
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults\nn = 3\nt = 0.5\nseed = 9\n")
    assert run(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 0
    man = RunManifest.read(tmp_path / "s" / "manifest.json")
    assert man.config["n_particles"] == 3 and man.config["seed"] == 9
    # command-line flags win over the file
    assert run(["simulate", "--config", str(cfg), "--n", "4", "--out", str(tmp_path / "s2")]) == 0
    assert RunManifest.read(tmp_path / "s2" / "manifest.json").config["n_particles"] == 4
