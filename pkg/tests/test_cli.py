import csv
import io
import json

import pytest

from hatsolver import cli
from hatsolver.datagen import read_dataset
from hatsolver.ffpoly import format_poly


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def memorized(tmp_path_factory):
    """A one-sample dataset and a checkpoint that has memorized it."""
    root = tmp_path_factory.mktemp("mem")
    data = root / "one.jsonl"
    assert cli.main(["gen", "--n", "2", "--count", "1", "--seed", "4", "--max-degree-G", "2",
                     "--out", str(data)]) == 0
    conf = root / "tiny.conf"
    conf.write_text("\n".join([
        "model = hatsolver.2", "num_encoder_layers = 1", "num_decoder_layers = 1",
        "encoder_embedding_dim = 16", "num_decoder_heads = 2", "ffn_mult = 2",
        "max_degree = 10", "lr = 3e-3", "warmup_updates = 10", "train_batch_size = 1",
        "max_steps = 150", "eval_every = 0", "log_every = 50", "seed = 0",
    ]))
    assert cli.main(["train", "--config", str(conf), "--train", str(data),
                     "--out", str(root / "run")]) == 0
    return root, data


def test_gen_verified_and_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    code, out, _ = run_cli(capsys, "gen", "--n", 2, "--q", 7, "--rho", 1.0, "--count", 100,
                           "--seed", 1, "--out", a)
    assert code == 0
    stats = json.loads(out)
    assert stats["num_samples"] == 100 and stats["verified"] == 100
    assert all(s.meta["verified"] for s in read_dataset(a))
    assert run_cli(capsys, "gen", "--n", 2, "--count", 100, "--seed", 1, "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    man = json.loads(a.with_suffix(".manifest.json").read_text())
    assert man["hash"] == stats["manifest"]


def test_gen_rejects_zero_density(tmp_path, capsys):
    code, _, err = run_cli(capsys, "gen", "--n", 2, "--rho", 0, "--count", 1,
                           "--out", tmp_path / "x.jsonl")
    assert code == cli.EXIT_USAGE
    assert "density" in err


def test_bench_cost_worked_example(capsys):
    code, out, _ = run_cli(capsys, "bench-cost", "--lengths", "3,4", "--d", 8)
    assert code == 0
    row = next(csv.DictReader(io.StringIO(out)))
    assert row["total"] == "4752" and row["measured"] == "4752"
    assert row["c_up"] == "3072|720" and row["c_down"] == "960"


def test_bench_cost_random(capsys):
    code, out, _ = run_cli(capsys, "bench-cost", "--random", 5, "--seed", 2)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 5 and all(r["total"] == r["measured"] for r in rows)


def test_train_artifacts(memorized):
    root, _ = memorized
    run = root / "run"
    lines = (run / "metrics.csv").read_text().splitlines()
    man = json.loads((run / "run_manifest.json").read_text())
    assert lines[0] == f"# manifest {man['hash']}"
    assert lines[1].startswith("step,loss")
    ck = json.loads((run / "last" / "manifest.json").read_text())
    assert ck["extra"]["manifest"]["hash"] == man["hash"]
    assert (run / "timing.csv").exists() and (run / "summary.json").exists()


def test_solve_memorized_sample(memorized, capsys):
    root, data = memorized
    sample = read_dataset(data)[0]
    system = "; ".join(format_poly(f) for f in sample.F)
    code, out, _ = run_cli(capsys, "solve", "--checkpoint", root / "run" / "last",
                           "--system", system, "--oracle-budget", 10)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[:-1] == [format_poly(g) for g in sample.G_system]
    assert lines[-1].startswith("oracle: MATCH")


def test_solve_reports_timeout(memorized, capsys, monkeypatch):
    root, data = memorized
    sample = read_dataset(data)[0]
    system = "; ".join(format_poly(f) for f in sample.F)

    def slow(*args, **kwargs):
        raise cli.OracleTimeout("time", 0, 1, 0.0)

    monkeypatch.setattr(cli, "buchberger", slow)
    code, out, _ = run_cli(capsys, "solve", "--checkpoint", root / "run" / "last",
                           "--system", system, "--oracle-budget", 0.001)
    assert code == cli.EXIT_TIMEOUT
    assert "TIMEOUT" in out


def test_eval_csv(memorized, tmp_path, capsys):
    root, data = memorized
    out_csv = tmp_path / "eval.csv"
    code, out, _ = run_cli(capsys, "eval", "--checkpoint", root / "run" / "last",
                           "--data", data, "--out", out_csv, "--oracle-budget", 10)
    assert code == 0
    row = next(csv.DictReader(out_csv.open()))
    assert float(row["exact"]) == 1.0 and float(row["oracle_success"]) == 1.0
    assert float(row["runtime_per_sample"]) > 0
    assert row["density"] == "1.0"


def test_eval_empty_dataset(memorized, tmp_path, capsys):
    root, _ = memorized
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, _, err = run_cli(capsys, "eval", "--checkpoint", root / "run" / "last",
                           "--data", empty)
    assert code == cli.EXIT_USAGE and "empty" in err


def test_missing_checkpoint_is_io_error(tmp_path, capsys):
    code, _, err = run_cli(capsys, "solve", "--checkpoint", tmp_path / "nope",
                           "--system", "x0", "--n", 2)
    assert code == cli.EXIT_IO


def test_config_keys(tmp_path):
    cfg = cli.resolve_train_config(cli.parse_config_text(
        "model = hatsolver.3\nfield = GF31\ncurriculum_scheduler_ramp = 0.25\n"
        "max_sequence_length = 4,16,5  # axes\n"))
    assert cfg["levels"] == 3 and cfg["q"] == 31 and cfg["v"] == 0.25
    assert cfg["max_tree"] == (4, 16, 5)
    with pytest.raises(cli.UsageError):
        cli.resolve_train_config({"bogus": "1"})
    with pytest.raises(cli.UsageError):
        cli.parse_config_text("no equals sign")


def test_manifest_hash_ignores_timestamp():
    a = cli.RunManifest("train", {"x": 1}, {"seed": 0}, created="2000-01-01T00:00:00")
    b = cli.RunManifest("train", {"x": 1}, {"seed": 0}, created="2020-01-01T00:00:00")
    assert a.hash == b.hash
    assert a.hash != cli.RunManifest("train", {"x": 2}, {"seed": 0}).hash
