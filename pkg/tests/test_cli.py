import csv
import json
import socket
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from epmixed.cli import EXIT_CONFIG, EXIT_OK, EXIT_PROTOCOL, load_posterior, main


def write_config(tmp_path, likelihood="zip", n_groups=12, **extra):
    sim = {"n_groups": n_groups, "obs_per_group": 6, "beta": [0.25, -0.25], "Sigma": [[0.5, 0.0], [0.0, 0.5]]}
    if likelihood == "zip":
        sim["lambda"] = -2.0
    cfg = {"likelihood": likelihood, "seed": 11, "data": "sim/data.csv", "simulate": sim,
           "ep": {"min_passes": 5, "max_passes": 8}, **extra}
    p = tmp_path / "run.json"
    p.write_text(json.dumps(cfg))
    return p


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def simulated(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim")]) == EXIT_OK
    return cfg


def test_simulate_and_fit_artifacts(simulated, tmp_path):
    out = tmp_path / "fit"
    assert main(["fit", "--config", str(simulated), "--out", str(out)]) == EXIT_OK
    for name in ("summary.csv", "sigma.json", "trace.csv", "timing.csv", "skips.json", "posterior.json"):
        assert (out / name).exists()
    rows = read_rows(out / "summary.csv")
    assert rows[0] == ["component", "mean", "sd"]
    labels = [r[0] for r in rows[1:]]
    # labels partition theta plus vech(Sigma)
    assert len(labels) == len(set(labels)) == 12 * 2 + 1 + 2 + 3
    assert labels[-3:] == ["Sigma[1,1]", "Sigma[2,1]", "Sigma[2,2]"]
    trace = read_rows(out / "trace.csv")
    assert len(trace) == 1 + 8 and "seconds" not in trace[0]
    skips = json.loads((out / "skips.json").read_text())
    assert skips["passes"] == 8 and sum(skips["like"].values()) == 0


def test_fit_is_reproducible(simulated, tmp_path):
    for d in ("a", "b"):
        assert main(["fit", "--config", str(simulated), "--out", str(tmp_path / d)]) == EXIT_OK
    for name in ("summary.csv", "sigma.json", "trace.csv", "skips.json", "posterior.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_reproducible(tmp_path):
    cfg = write_config(tmp_path)
    for d in ("s1", "s2"):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / d)]) == EXIT_OK
    assert (tmp_path / "s1" / "data.csv").read_bytes() == (tmp_path / "s2" / "data.csv").read_bytes()


def test_reloaded_posterior_matches_summary(simulated, tmp_path):
    out = tmp_path / "fit"
    main(["fit", "--config", str(simulated), "--out", str(out)])
    labels, g, _, _ = load_posterior(out)
    mu, sd = g.marginal_summaries()
    rows = read_rows(out / "summary.csv")[1:]
    assert [r[0] for r in rows[:mu.size]] == labels
    # reloading refactorises the global, so agreement is to rounding only
    np.testing.assert_allclose([float(r[1]) for r in rows[:mu.size]], mu, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose([float(r[2]) for r in rows[:mu.size]], sd, rtol=1e-12)


@pytest.mark.parametrize("field,where", [("seed", None), ("likelihood", None), ("n_groups", "simulate")])
def test_missing_config_field(tmp_path, capsys, field, where):
    cfg = json.loads(write_config(tmp_path).read_text())
    del (cfg[where] if where else cfg)[field]
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(cfg))
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert f"'{where + '.' if where else ''}{field}'" in capsys.readouterr().err


def test_bad_ep_field_and_missing_data(tmp_path, capsys):
    p = write_config(tmp_path, ep={"damping": 3.0})
    assert main(["fit", "--config", str(p), "--out", str(tmp_path / "f")]) == EXIT_CONFIG
    p = write_config(tmp_path)
    assert main(["fit", "--config", str(p), "--out", str(tmp_path / "f")]) == EXIT_CONFIG
    assert "cannot read data" in capsys.readouterr().err


def test_sample_and_diagnose(simulated, tmp_path):
    out = tmp_path / "fit"
    main(["fit", "--config", str(simulated), "--out", str(out)])
    s1, s2 = tmp_path / "s1.csv", tmp_path / "s2.csv"
    assert main(["sample", "--posterior", str(out), "--draws", "1000", "--seed", "3", "--out", str(s1)]) == EXIT_OK
    assert main(["sample", "--posterior", str(out), "--draws", "1000", "--seed", "3", "--out", str(s2)]) == EXIT_OK
    assert s1.read_bytes() == s2.read_bytes()
    rows = read_rows(s1)
    assert len(rows) == 1001
    draws = np.array(rows[1:], dtype=float)
    _, g, _, _ = load_posterior(out)
    mu, sd = g.marginal_summaries()
    z = (draws[:, :mu.size].mean(axis=0) - mu) / (sd / np.sqrt(1000))
    assert np.all(np.abs(z) < 4.5)
    np.testing.assert_allclose(draws[:, :mu.size].std(axis=0), sd, rtol=0.15)

    m = tmp_path / "metrics.csv"
    assert main(["diagnose", "--approx", str(s1), "--ref", str(s1), "--out", str(m)]) == EXIT_OK
    res = read_rows(m)
    assert res[0] == ["group", "dev_mu", "adev_mu", "dev_sigma", "adev_sigma", "mmd2_u", "mmd2_u_se"]
    allrow = res[1]
    assert allrow[0] == "all" and float(allrow[2]) == 0.0 and float(allrow[4]) == 1.0 and float(allrow[5]) == 0.0
    assert {r[0] for r in res[1:]} == {"all", "u", "lambda", "beta", "Sigma"}

    assert main(["diagnose", "--approx", str(out / "summary.csv"), "--ref", str(s1), "--groups", "beta",
                 "--out", str(m)]) == EXIT_OK
    res = read_rows(m)
    assert [r[0] for r in res[1:]] == ["all", "beta"] and len(res[0]) == 5
    assert float(res[2][2]) < 0.2


def test_bench_small_grid(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--models", "binomial", "--grid", "10,20", "--dense-grid", "10", "--reps", "2",
                 "--passes", "2", "--out", str(out)]) == EXIT_OK
    rows = read_rows(out)
    assert rows[0] == ["model", "method", "L", "rep", "passes", "seconds"]
    assert len(rows) == 1 + 2 * 2 + 2
    summary = read_rows(tmp_path / "bench_summary.csv")
    assert len(summary) == 1 + 3


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_distributed_fit_via_cli(simulated, tmp_path):
    local, dist = tmp_path / "local", tmp_path / "dist"
    assert main(["fit", "--config", str(simulated), "--out", str(local), "--schedule", "parallel"]) == EXIT_OK
    addr = f"127.0.0.1:{free_port()}"
    codes = {}
    central = threading.Thread(target=lambda: codes.setdefault(
        "c", main(["serve", "--config", str(simulated), "--out", str(dist), "--serve", addr, "--workers", "2"])))
    central.start()
    time.sleep(0.2)
    workers = [threading.Thread(target=lambda i=i: codes.setdefault(i, main(["worker", "--connect", addr])))
               for i in range(2)]
    for w in workers:
        w.start()
    central.join(60)
    for w in workers:
        w.join(30)
    assert codes == {"c": 0, 0: 0, 1: 0}
    a = np.array([float(r[1]) for r in read_rows(local / "summary.csv")[1:]])
    b = np.array([float(r[1]) for r in read_rows(dist / "summary.csv")[1:]])
    assert np.max(np.abs(a - b)) <= 1e-10 * np.max(np.abs(a))


def test_worker_protocol_error_exit_code(capsys):
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    code = {}
    t = threading.Thread(target=lambda: code.setdefault("w", main(["worker", "--connect", f"127.0.0.1:{port}"])))
    t.start()
    conn, _ = srv.accept()
    conn.recv(4096)
    conn.sendall(b"\x00\x00\x00\x00")
    t.join(10)
    conn.close()
    srv.close()
    assert code["w"] == EXIT_PROTOCOL
    assert "protocol error" in capsys.readouterr().err


def test_serve_aborts_with_dump_when_worker_disconnects(simulated, tmp_path, capsys):
    from epmixed import distributed as D

    addr = f"127.0.0.1:{free_port()}"
    code = {}
    central = threading.Thread(target=lambda: code.setdefault(
        "c", main(["serve", "--config", str(simulated), "--out", str(tmp_path / "dist"), "--serve", addr])))
    central.start()
    for _ in range(100):
        try:
            sock = socket.create_connection(D.parse_address(addr))
            break
        except ConnectionRefusedError:
            time.sleep(0.05)
    ch = D.Channel(sock)
    ch.send(D.Hello())
    assert isinstance(ch.recv(), D.AssignShard)
    ch.close()
    central.join(30)
    assert code["c"] == EXIT_PROTOCOL
    assert "disconnected" in capsys.readouterr().err
    dump = json.loads((tmp_path / "dist" / "partial_state.json").read_text())
    assert "disconnected" in dump["reason"]


def test_zip_default_setting_fits_quickly(tmp_path):
    cfg = {"likelihood": "zip", "seed": 1, "data": "sim/data.csv",
           "simulate": {"n_groups": 100, "beta": [0.25, -0.25, 0.25, -0.25, 0.25, -0.25, 0.25, -0.25],
                        "Sigma": [[0.5, 0.0], [0.0, 0.5]], "lambda": float(np.log(0.05 / 0.95))}}
    p = tmp_path / "z.json"
    p.write_text(json.dumps(cfg))
    assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "sim")]) == EXIT_OK
    t0 = time.perf_counter()
    assert main(["fit", "--config", str(p), "--out", str(tmp_path / "fit")]) == EXIT_OK
    assert time.perf_counter() - t0 < 60


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "epmixed.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for verb in ("simulate", "fit", "sample", "diagnose", "bench", "serve", "worker"):
        assert verb in r.stdout
