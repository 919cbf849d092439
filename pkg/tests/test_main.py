"""
Integration tests for the command-line interface
Drives fixture -> evolve -> eval -> memory -> simulate through main()
"""
import json

import pytest

from mistake_notebook.fixtures import MOD_SUBJECT
from mistake_notebook.main import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, format_summary, main


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


@pytest.mark.integration
class TestEvolveAndEval:
    """Test cases for evolve and eval on the scripted fixture"""

    def test_fixture_command(self, tmp_path, capsys):
        code, out = run(capsys, "fixture", str(tmp_path / "demo"))
        assert code == EXIT_OK
        assert out.strip().endswith("run.json")
        for name in ("train.jsonl", "eval.jsonl", "script.jsonl", "run.json"):
            assert (tmp_path / "demo" / name).exists()

    def test_evolve_summary_and_outputs(self, fixture_dir, capsys):
        code, out = run(capsys, "evolve", "--config", str(fixture_dir / "run.json"))
        assert code == EXIT_OK
        assert out.strip().startswith("accepted=1/2 mem=1 len=")
        assert out.strip().endswith("acc=1.0000")

        ledger = (fixture_dir / "ledger.jsonl").read_text(encoding="utf-8").splitlines()
        assert [json.loads(line)["status"] for line in ledger] == ["accepted", "skipped"]
        memory = (fixture_dir / "memory.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(memory) == 1
        assert json.loads(memory[0])["subject"] == MOD_SUBJECT

    def test_two_epochs(self, fixture_dir, capsys):
        code, _ = run(capsys, "evolve", "--config", str(fixture_dir / "run.json"), "--epochs", "2")
        assert code == EXIT_OK
        ledger = [json.loads(line) for line in (fixture_dir / "ledger.jsonl").read_text(encoding="utf-8").splitlines()]
        assert [(r["epoch"], r["failure_count"]) for r in ledger] == [(1, 2), (1, 0), (2, 0), (2, 0)]

    def test_ledger_and_memory_flags(self, fixture_dir, tmp_path, capsys):
        ledger, memory = tmp_path / "out" / "ledger.jsonl", tmp_path / "out" / "memory.jsonl"
        code, _ = run(capsys, "evolve", "--config", str(fixture_dir / "run.json"),
                      "--ledger", str(ledger), "--memory", str(memory))
        assert code == EXIT_OK
        assert ledger.exists()
        assert memory.exists()

    def test_eval_with_and_without_memory(self, fixture_dir, tmp_path, capsys):
        config = str(fixture_dir / "run.json")
        run(capsys, "evolve", "--config", config)
        code, out = run(capsys, "eval", "--config", config)
        assert code == EXIT_OK
        assert out.strip() == f"acc=1.0000 mem=1 len={self.avg_len(fixture_dir)} graded=4/4"

        empty = tmp_path / "empty.jsonl"
        empty.write_text("", encoding="utf-8")
        code, out = run(capsys, "eval", "--config", config, "--memory", str(empty))
        assert code == EXIT_OK
        assert out.strip() == "acc=0.5000 mem=0 len=0.0 graded=4/4"

    def avg_len(self, fixture_dir):
        line = json.loads((fixture_dir / "memory.jsonl").read_text(encoding="utf-8"))
        return f"{len(' '.join(line['guidance'].values()).split()):.1f}"

    def test_reproducible(self, tmp_path, capsys):
        outputs = []
        for name in ("a", "b"):
            run(capsys, "fixture", str(tmp_path / name))
            code, out = run(capsys, "evolve", "--config", str(tmp_path / name / "run.json"), "--seed", "7")
            assert code == EXIT_OK
            outputs.append((
                out,
                (tmp_path / name / "memory.jsonl").read_bytes(),
                (tmp_path / name / "ledger.jsonl").read_bytes(),
            ))
        assert outputs[0] == outputs[1]


@pytest.mark.integration
class TestMemoryCommand:
    """Test cases for memory inspect and export"""

    def test_inspect(self, fixture_dir, capsys):
        run(capsys, "evolve", "--config", str(fixture_dir / "run.json"))
        code, out = run(capsys, "memory", "inspect", "--memory", str(fixture_dir / "memory.jsonl"))
        assert code == EXIT_OK
        lines = out.splitlines()
        assert lines[0] == f"[1] {MOD_SUBJECT}"
        assert "ANTI-PATTERNS" in lines[2]
        assert lines[-1].startswith("entries=1 avg_len=")

    def test_export_matches_file(self, fixture_dir, tmp_path, capsys):
        run(capsys, "evolve", "--config", str(fixture_dir / "run.json"))
        code, out = run(capsys, "memory", "export", "--config", str(fixture_dir / "run.json"))
        assert code == EXIT_OK
        assert out == (fixture_dir / "memory.jsonl").read_text(encoding="utf-8")

        target = tmp_path / "copy.jsonl"
        run(capsys, "memory", "export", "--memory", str(fixture_dir / "memory.jsonl"), "--output", str(target))
        assert target.read_text(encoding="utf-8") == out

    def test_missing_memory_file(self, tmp_path, capsys):
        code, _ = run(capsys, "memory", "inspect", "--memory", str(tmp_path / "absent.jsonl"))
        assert code == EXIT_ABORT


@pytest.mark.integration
class TestSimulateCommand:
    """Test cases for the simulate command"""

    def test_csv_output(self, capsys):
        code, out = run(capsys, "simulate", "--sizes", "1,4", "--trials", "2000", "--seed", "3")
        assert code == EXIT_OK
        lines = out.splitlines()
        assert lines[0] == "size,flip_rate,empirical_var,theoretical_var,theoretical_flip_rate"
        assert [line.split(",")[0] for line in lines[1:]] == ["1", "4"]

    def test_same_seed_same_output(self, capsys):
        argv = ("simulate", "--sizes", "1,2,4", "--trials", "1000", "--seed", "11")
        assert run(capsys, *argv)[1] == run(capsys, *argv)[1]

    def test_config_file_and_summary(self, tmp_path, capsys):
        config = tmp_path / "sim.json"
        config.write_text(json.dumps({"model": {"mu": 0.5, "sigma": 1.0}, "cluster_sizes": [1, 16], "trials": 500}))
        summary = tmp_path / "summary.json"
        code, _ = run(capsys, "simulate", "--config", str(config), "--noise-kind", "bounded-uniform",
                      "--summary", str(summary))
        assert code == EXIT_OK
        data = json.loads(summary.read_text(encoding="utf-8"))
        assert data["model"]["noise_kind"] == "bounded-uniform"
        assert data["trials"] == 500

    def test_invalid_sizes(self, capsys):
        code, _ = run(capsys, "simulate", "--sizes", "4,2")
        assert code == EXIT_CONFIG


@pytest.mark.integration
class TestExitCodes:
    """Test cases for configuration and validation failures"""

    def test_missing_config(self, tmp_path, capsys):
        code, out = run(capsys, "evolve", "--config", str(tmp_path / "absent.json"))
        assert code == EXIT_CONFIG
        assert out == ""

    def test_invalid_override(self, fixture_dir, capsys):
        code, _ = run(capsys, "evolve", "--config", str(fixture_dir / "run.json"), "--retrieval.top_k", "0")
        assert code == EXIT_CONFIG

    def test_zero_epochs_rejected_before_outputs(self, fixture_dir, capsys):
        ledger = fixture_dir / "ledger.jsonl"
        ledger.write_text("previous run\n", encoding="utf-8")
        code, out = run(capsys, "evolve", "--config", str(fixture_dir / "run.json"), "--epochs", "0")
        assert code == EXIT_CONFIG
        assert out == ""
        assert ledger.read_text(encoding="utf-8") == "previous run\n"
        assert not (fixture_dir / "memory.jsonl").exists()

    def test_duplicate_task_ids(self, fixture_dir, capsys):
        train = fixture_dir / "train.jsonl"
        first = train.read_text(encoding="utf-8").splitlines()[0]
        train.write_text(train.read_text(encoding="utf-8") + first + "\n", encoding="utf-8")
        code, _ = run(capsys, "evolve", "--config", str(fixture_dir / "run.json"))
        assert code == EXIT_CONFIG

    def test_supervised_needs_gold(self, fixture_dir, capsys):
        train = fixture_dir / "train.jsonl"
        train.write_text('{"id": "x", "question": "Compute 1 plus 1."}\n', encoding="utf-8")
        code, _ = run(capsys, "evolve", "--config", str(fixture_dir / "run.json"))
        assert code == EXIT_CONFIG

    def test_format_summary(self):
        assert format_summary(3, 4, 2, 152.25, 0.5) == "accepted=3/4 mem=2 len=152.2 acc=0.5000"
