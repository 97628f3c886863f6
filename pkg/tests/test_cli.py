"""CLI behavior: exit codes, overrides, and the daemon pair over loopback."""

import contextlib
import subprocess
import sys

import numpy as np
import pytest

from feleak import cli
from feleak.cli import main, parse_endpoint, parse_fraction, parse_topology
from feleak.data_io import read_csv, read_pgm
from feleak.fe_pipeline import save_instance, simulate_dense_instance

CLI = [sys.executable, "-m", "feleak.cli"]


def run_cli(*args, timeout=120):
    return subprocess.run([*CLI, *map(str, args)], capture_output=True,
                          text=True, timeout=timeout)


@contextlib.contextmanager
def split_server(*extra):
    """Ephemeral-port server daemon; yields (process, port)."""
    proc = subprocess.Popen(
        [*CLI, "split-server", "--port", "0", "--accept-timeout", "30",
         *map(str, extra)],
        stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
    try:
        line = proc.stdout.readline()
        assert line.startswith("listening on ")
        yield proc, int(line.rsplit(":", 1)[1])
        proc.wait(timeout=60)
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()


# --- argument parsing helpers ------------------------------------------------

def test_parse_fraction_accepts_known_values():
    assert parse_fraction("1/2") == 0.5
    assert parse_fraction("0.25") == 0.25
    assert parse_fraction(" 1/16 ") == 1 / 16


@pytest.mark.parametrize("bad", ["1/3", "2", "x/y", "1/0", ""])
def test_parse_fraction_rejects(bad):
    with pytest.raises(cli.UsageError):
        parse_fraction(bad)


def test_parse_topology():
    assert parse_topology("784,300,10") == (784, 300, 10)
    with pytest.raises(cli.UsageError):
        parse_topology("784,300")
    with pytest.raises(cli.UsageError):
        parse_topology("a,b,c")


def test_parse_endpoint():
    assert parse_endpoint("10.0.0.1:99") == ("10.0.0.1", 99)
    with pytest.raises(cli.UsageError):
        parse_endpoint("nohost")
    with pytest.raises(cli.UsageError):
        parse_endpoint(":123")


def test_synthetic_image_is_smooth_and_seeded():
    img = cli.synthetic_image(side=32, seed=3)
    assert img.shape == (32, 32)
    assert img.min() >= 0.02 and img.max() <= 0.98
    assert np.array_equal(img, cli.synthetic_image(side=32, seed=3))
    assert not np.array_equal(img, cli.synthetic_image(side=32, seed=4))


# --- top-level dispatch ------------------------------------------------------

def test_no_subcommand_is_usage_error(capsys):
    assert main([]) == 2
    capsys.readouterr()


def test_unknown_flag_is_usage_error(capsys):
    assert main(["fe-demo", "--nope"]) == 2
    capsys.readouterr()


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "fe-demo" in capsys.readouterr().out


# --- fe-demo -----------------------------------------------------------------

def test_fe_demo_verifies_and_is_deterministic(capsys):
    args = ["fe-demo", "--dim", "3", "--bits", "128", "--trials", "2",
            "--seed", "9"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert "all 2 trials verified" in first
    assert first.count("ok") == 2
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_fe_demo_small_bits_is_usage_error(capsys):
    assert main(["fe-demo", "--bits", "32"]) == 2
    assert "at least" in capsys.readouterr().err


def test_fe_demo_zero_dim_is_usage_error(capsys):
    assert main(["fe-demo", "--dim", "0", "--bits", "128"]) == 2
    capsys.readouterr()


# --- attack ------------------------------------------------------------------

def test_attack_simulate_recovers_exactly(tmp_path, capsys):
    out = tmp_path / "att"
    assert main(["attack", "--simulate", "1100", "--seed", "3",
                 "--out-dir", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "status=solved" in stdout
    mse = float(stdout.split("mse=")[1].split()[0])
    assert mse < 1e-20
    sample = read_pgm(out / "recovered.pgm")
    assert sample.shape == (32, 32)
    header, rows = read_csv(out / "report.csv")
    assert header[0] == "status" and rows[0][0] == "solved"


def test_attack_reads_saved_instance(tmp_path, capsys):
    instance, _ = simulate_dense_instance(1100, cli.synthetic_image(seed=1),
                                          seed=2)
    path = tmp_path / "run.fli"
    save_instance(instance, path)
    assert main(["attack", str(path), "--out-dir",
                 str(tmp_path / "out")]) == 0
    stdout = capsys.readouterr().out
    assert "status=solved" in stdout
    assert "mse=n/a" in stdout  # no ground truth in the file


def test_attack_underdetermined_lp_with_augmentation(tmp_path, capsys):
    out = tmp_path / "lp"
    assert main(["attack", "--simulate", "350", "--aug", "ineq",
                 "--fraction", "1/2", "--seed", "3",
                 "--out-dir", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "status=solved" in stdout
    assert float(stdout.split("mse=")[1].split()[0]) < 0.05


def test_attack_missing_instance_file(tmp_path, capsys):
    assert main(["attack", str(tmp_path / "gone.fli")]) == 2
    assert "no such instance" in capsys.readouterr().err


def test_attack_requires_exactly_one_source(tmp_path, capsys):
    assert main(["attack"]) == 2
    assert main(["attack", "some.fli", "--simulate", "400"]) == 2
    capsys.readouterr()


# --- sweep -------------------------------------------------------------------

def test_sweep_writes_grid_csv(tmp_path, capsys):
    out = tmp_path / "grid.csv"
    assert main(["sweep", "--widths", "1100", "--fractions", "1/2",
                 "--aug", "none", "--out", str(out), "--seed", "5"]) == 0
    capsys.readouterr()
    header, rows = read_csv(out)
    assert header == list(cli.SWEEP_HEADER)
    assert len(rows) == 1
    assert rows[0][0] == "1100" and rows[0][-1] == "solved"
    assert float(rows[0][4]) < 1e-20


def test_sweep_parallel_jobs_match_serial(tmp_path, capsys):
    serial, parallel = tmp_path / "s.csv", tmp_path / "p.csv"
    base = ["sweep", "--widths", "1100,1150", "--fractions", "1/2",
            "--aug", "none", "--seed", "5"]
    assert main([*base, "--out", str(serial)]) == 0
    assert main([*base, "--out", str(parallel), "--jobs", "2"]) == 0
    capsys.readouterr()
    _, rows_s = read_csv(serial)
    _, rows_p = read_csv(parallel)
    assert [r[:5] for r in rows_s] == [r[:5] for r in rows_p]  # all but time


def test_sweep_rejects_bad_tokens(capsys):
    assert main(["sweep", "--fractions", "1/3"]) == 2
    assert main(["sweep", "--widths", "abc"]) == 2
    assert main(["sweep", "--widths", ""]) == 2
    assert main(["sweep", "--jobs", "0"]) == 2
    capsys.readouterr()


# --- overrides ---------------------------------------------------------------

def test_env_overrides_flag_default(capsys, monkeypatch):
    monkeypatch.setenv("FELEAK_DIM", "5")
    assert main(["fe-demo", "--bits", "128", "--trials", "1",
                 "--seed", "4"]) == 0
    assert "dim=5" in capsys.readouterr().out


def test_config_file_overrides_default(tmp_path, capsys):
    cfg = tmp_path / "fe.cfg"
    cfg.write_text("# demo settings\ndim=3\ntrials=1\n")
    assert main(["--config", str(cfg), "fe-demo", "--bits", "128",
                 "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert "dim=3" in out and out.count("trial ") == 1


def test_override_precedence_env_beats_config_flag_beats_env(
        tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "fe.cfg"
    cfg.write_text("dim=3\n")
    monkeypatch.setenv("FELEAK_DIM", "5")
    base = ["--config", str(cfg), "fe-demo", "--bits", "128",
            "--trials", "1", "--seed", "4"]
    assert main(base) == 0
    assert "dim=5" in capsys.readouterr().out
    assert main([*base, "--dim", "2"]) == 0
    assert "dim=2" in capsys.readouterr().out


def test_bad_env_value_is_usage_error(capsys, monkeypatch):
    monkeypatch.setenv("FELEAK_BITS", "banana")
    assert main(["fe-demo"]) == 2
    assert "banana" in capsys.readouterr().err


def test_missing_config_file(capsys):
    assert main(["--config", "/definitely/not/here.cfg", "fe-demo"]) == 2
    capsys.readouterr()


def test_malformed_config_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("this line has no equals sign\n")
    assert main(["--config", str(cfg), "fe-demo"]) == 2
    assert "key=value" in capsys.readouterr().err


# --- split daemons over loopback ----------------------------------------------

def test_split_roundtrip_over_loopback(tmp_path):
    w1 = tmp_path / "w1.bin"
    with split_server("--topology", "12,8,3", "--synthetic", "60",
                      "--seed", "11") as (server, port):
        client = run_cli("split-client", "--connect", "127.0.0.1:%d" % port,
                         "--topology", "12,8,3", "--synthetic", "60",
                         "--epochs", "3", "--batch", "10", "--seed", "11",
                         "--save-w1", str(w1))
    assert client.returncode == 0, client.stderr
    assert "accuracy=" in client.stdout
    assert server.returncode == 0
    assert "session complete" in server.stdout.read()
    assert w1.exists()


def test_split_topology_mismatch_fails_both_sides():
    with split_server("--topology", "12,8,3", "--synthetic", "30",
                      "--seed", "2") as (server, port):
        client = run_cli("split-client", "--connect", "127.0.0.1:%d" % port,
                         "--topology", "14,8,3", "--synthetic", "30",
                         "--epochs", "1", "--seed", "2")
    assert client.returncode == 1
    assert "refused" in client.stderr
    assert server.returncode == 1


def test_split_client_retries_then_gives_up():
    client = run_cli("split-client", "--connect", "127.0.0.1:1",
                     "--topology", "12,8,3", "--synthetic", "30",
                     "--epochs", "1", "--seed", "2")
    assert client.returncode == 1
    assert "3 attempts" in client.stderr


def test_split_client_requires_one_data_source(capsys):
    assert main(["split-client", "--topology", "12,8,3"]) == 2
    assert main(["split-client", "--topology", "12,8,3", "--data", "d",
                 "--synthetic", "30"]) == 2
    capsys.readouterr()


def test_split_server_requires_one_label_source(capsys):
    assert main(["split-server", "--topology", "12,8,3"]) == 2
    assert main(["split-server", "--topology", "12,8,3",
                 "--labels", "/no/such/file"]) == 2
    capsys.readouterr()
