"""Command-line surface: subcommands, exit codes, artifact files."""

import pytest

from moelab import fixtures
from moelab.cli import main
from moelab.offload_sim import synthetic_trace, write_trace
from moelab.trainer import synthesize_corpus


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "corpus.txt"
    synthesize_corpus(path, 80_000, seed=1)
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, corpus_file):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main([
        "train", "--corpus", str(corpus_file), "--steps", "3", "--seed", "1",
        "--experts", "4", "--active", "2", "--out", str(out),
    ])
    assert code == 0
    return out


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus-flag"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["simulate-offload"])  # missing --trace
    assert exc.value.code == 1
    capsys.readouterr()


def test_train_produces_checkpoint_and_metrics(run_dir, capsys):
    assert (run_dir / "checkpoint.npz").exists()
    assert (run_dir / "metrics.jsonl").exists()
    capsys.readouterr()


def test_train_without_corpus_exits_1(capsys):
    assert main(["train", "--steps", "1"]) == 1
    capsys.readouterr()


def test_train_invalid_parameters_exit_1(corpus_file, capsys):
    code = main(["train", "--corpus", str(corpus_file), "--steps", "1",
                 "--experts", "2", "--active", "5"])
    assert code == 1
    capsys.readouterr()


def test_eval_checkpoint(run_dir, corpus_file, capsys):
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint.npz"),
                 "--corpus", str(corpus_file)])
    assert code == 0
    out = capsys.readouterr().out
    assert "val_ppl" in out and "val_exrep" in out


def test_generate_and_trace_file(run_dir, tmp_path, capsys):
    trace_path = tmp_path / "gen.trace"
    code = main(["generate", "--checkpoint", str(run_dir / "checkpoint.npz"),
                 "--prompt", "Toza", "--tokens", "8", "--trace", str(trace_path)])
    assert code == 0
    assert trace_path.exists()
    capsys.readouterr()

    code = main(["simulate-offload", "--trace", str(trace_path), "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "tokens_per_sec" in out
    assert (tmp_path / "offload_report.csv").exists()


def test_simulate_offload_fixture_trace(tmp_path, capsys):
    trace = fixtures.bundled_traces()["bles"]
    path = tmp_path / "bles.trace"
    write_trace(trace, path)
    code = main(["simulate-offload", "--trace", str(path), "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    pct = float(next(l for l in out.splitlines() if l.startswith("exrep_pct")).split()[1])
    assert round(pct, 2) == 16.18
    assert "swap_events          11" in out


def test_simulate_offload_empty_trace_exits_2(tmp_path, capsys):
    empty = tmp_path / "empty.trace"
    empty.write_text("")
    assert main(["simulate-offload", "--trace", str(empty)]) == 2
    err = capsys.readouterr().err
    assert "data error" in err


def test_simulate_offload_parse_error_names_line(tmp_path, capsys):
    path = tmp_path / "broken.trace"
    trace = synthetic_trace(20.0, 8, 1, 4, 2, seed=0)
    write_trace(trace, path)
    lines = path.read_text().splitlines()
    lines[3] = "garbage"
    path.write_text("\n".join(lines) + "\n")
    assert main(["simulate-offload", "--trace", str(path)]) == 2
    assert "line 4" in capsys.readouterr().err


def test_higher_churn_trace_reports_lower_toks(tmp_path, capsys):
    rates = {}
    for name, pct in (("low", 5.0), ("high", 80.0)):
        path = tmp_path / f"{name}.trace"
        write_trace(synthetic_trace(pct, 64, 2, 8, 2, seed=3), path)
        assert main(["simulate-offload", "--trace", str(path), "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        rates[name] = float(next(l for l in out.splitlines() if l.startswith("tokens_per_sec")).split()[1])
    assert rates["high"] < rates["low"]


def test_fixtures_command_passes(capsys):
    assert main(["fixtures"]) == 0
    out = capsys.readouterr().out
    assert "replacements[bles]" in out
    assert "11/11 reference checks passed" in out


def test_fixtures_command_fails_on_tampered_expectation(monkeypatch, capsys):
    monkeypatch.setitem(fixtures.EXPECTED_REPLACEMENTS, "bles", 12)
    assert main(["fixtures"]) == 3
    out = capsys.readouterr().out
    assert "FAIL" in out
    failing = [l for l in out.splitlines() if "FAIL" in l]
    assert any("replacements[bles]" in l for l in failing)


def test_tampered_activation_grid_is_rejected():
    rows = list(fixtures.BLES_ACTIVATION)
    rows[1] = "1" + rows[1][1:]  # flip one bit: token 0 now has 3 active experts
    with pytest.raises(ValueError, match="token 0"):
        fixtures.activation_to_trace(tuple(rows))


def test_ablate_bles_axis(corpus_file, tmp_path, capsys):
    code = main([
        "ablate", "--corpus", str(corpus_file), "--steps", "2", "--seed", "0",
        "--experts", "4", "--active", "2", "--axis", "bles", "--values", "0,0.1",
        "--out", str(tmp_path / "abl"),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "bles=0" in out and "bles=0.1" in out
    assert (tmp_path / "abl" / "comparison.csv").exists()


def test_ablate_active_axis_structure(corpus_file, capsys):
    code = main([
        "ablate", "--corpus", str(corpus_file), "--steps", "2",
        "--experts", "8", "--axis", "active", "--values", "1,2,4",
    ])
    assert code == 0
    out = capsys.readouterr().out
    for v in ("active=1", "active=2", "active=4"):
        assert v in out
