"""End-to-end command-line tests."""

import hashlib
import pathlib

import numpy as np
import pytest

from genplan import domains, pddl
from genplan.cli import main, parse_size_distribution
from genplan.policy import PolicyNetwork
from genplan.search import validate_plan


def run_cli(*argv):
    return main(list(argv))


def file_hash(path):
    return hashlib.sha256(pathlib.Path(path).read_bytes()).hexdigest()


TRAIN_ARGS = (
    "train",
    "--domain", "gripper",
    "--iterations", "1",
    "--hidden-width", "8",
    "--quiet",
)


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    config = out / "config.txt"
    config.write_text(
        "domain = gripper\n"
        "iterations = 2\n"
        "episodes_per_iteration = 4\n"
        "max_update_steps = 2\n"
        "hidden_width = 8\n"
        "train_sizes = balls=1\n"
        "seed = 7\n"
    )
    code = run_cli("train", "--config", str(config), "--out", str(out))
    assert code == 0
    return out


class TestTrainCommand:
    def test_smoke_run_writes_stats_and_checkpoint(self, trained_dir):
        stats = (trained_dir / "train_stats.csv").read_text().strip().splitlines()
        assert len(stats) == 3  # header + 2 iterations
        assert stats[0].startswith("iteration,success_rate,mean_length")
        assert (trained_dir / "checkpoint-final.bin").exists()

    def test_missing_domain_file_exits_2(self, tmp_path, capsys):
        config = tmp_path / "c.txt"
        config.write_text("domain_file = /nonexistent/path/dom.pddl\n")
        code = run_cli("train", "--config", str(config), "--out", str(tmp_path))
        assert code == 2
        assert "/nonexistent/path/dom.pddl" in capsys.readouterr().err

    def test_missing_config_exits_2(self, tmp_path, capsys):
        code = run_cli("train", "--config", str(tmp_path / "absent.txt"),
                       "--out", str(tmp_path))
        assert code == 2

    def test_same_seed_identical_checkpoints(self, tmp_path):
        args = [
            "train", "--domain", "gripper", "--iterations", "1", "--seed", "5",
            "--hidden-width", "8", "--quiet",
        ]
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("train_sizes = balls=1\nepisodes_per_iteration = 3\n"
                       "max_update_steps = 1\n")
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run_cli(*args, "--config", str(cfg), "--out", str(a)) == 0
        assert run_cli(*args, "--config", str(cfg), "--out", str(b)) == 0
        assert file_hash(a / "checkpoint-final.bin") == file_hash(b / "checkpoint-final.bin")


class TestSolveCommand:
    def test_greedy_solve_trivial_instance(self, trained_dir, tmp_path):
        gen_dir = tmp_path / "problems"
        assert run_cli("generate", "--domain", "gripper", "--sizes", "balls=1",
                       "--count", "1", "--seed", "3", "--out", str(gen_dir)) == 0
        problem = next(gen_dir.glob("gripper-*.pddl"))
        out = tmp_path / "solve"
        code = run_cli(
            "solve",
            "--checkpoint", str(trained_dir / "checkpoint-final.bin"),
            "--domain", "gripper",
            "--problem", str(problem),
            "--time-limit", "60",
            "--out", str(out),
        )
        assert code == 0
        record = (out / f"{problem.stem}.result.csv").read_text()
        assert "gbfs-gnn" in record

    def test_emitted_plan_revalidates(self, trained_dir, tmp_path):
        gen_dir = tmp_path / "problems"
        run_cli("generate", "--domain", "gripper", "--sizes", "balls=1",
                "--count", "1", "--seed", "4", "--out", str(gen_dir))
        problem_path = next(gen_dir.glob("gripper-*.pddl"))
        out = tmp_path / "solve"
        run_cli(
            "solve",
            "--checkpoint", str(trained_dir / "checkpoint-final.bin"),
            "--domain", "gripper", "--problem", str(problem_path),
            "--time-limit", "60", "--out", str(out),
        )
        plan_file = out / f"{problem_path.stem}.plan"
        if plan_file.exists():
            domain = domains.load_domain("gripper")
            problem = pddl.parse_problem(problem_path.read_text(), domain)
            task = pddl.ground_task(domain, problem)
            by_name = {a.name: a for a in task.ground_actions}
            plan = [by_name[line] for line in plan_file.read_text().splitlines() if line]
            assert validate_plan(task, plan)

    def test_corrupt_checkpoint_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"JUNKJUNKJUNK" + b"\x00" * 100)
        gen_dir = tmp_path / "problems"
        run_cli("generate", "--domain", "gripper", "--sizes", "balls=1",
                "--count", "1", "--seed", "5", "--out", str(gen_dir))
        problem = next(gen_dir.glob("gripper-*.pddl"))
        code = run_cli("solve", "--checkpoint", str(bad), "--domain", "gripper",
                       "--problem", str(problem), "--out", str(tmp_path / "s"))
        assert code == 2

    def test_layout_mismatch_exits_2(self, trained_dir, tmp_path):
        gen_dir = tmp_path / "problems"
        run_cli("generate", "--domain", "blocksworld", "--sizes", "blocks=2",
                "--count", "1", "--seed", "6", "--out", str(gen_dir))
        problem = next(gen_dir.glob("blocksworld-*.pddl"))
        code = run_cli(
            "solve",
            "--checkpoint", str(trained_dir / "checkpoint-final.bin"),
            "--domain", "blocksworld", "--problem", str(problem),
            "--out", str(tmp_path / "s"),
        )
        assert code == 2


class TestEvaluateCommand:
    def test_smoke_two_instances(self, trained_dir, tmp_path):
        out = tmp_path / "eval"
        code = run_cli(
            "evaluate",
            "--checkpoint", str(trained_dir / "checkpoint-final.bin"),
            "--domain", "gripper",
            "--instances", "2",
            "--scale", "0.01",
            "--time-limit", "20",
            "--max-expansions", "50",
            "--seed", "1",
            "--out", str(out),
        )
        assert code == 0
        rows = (out / "evaluation.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 2 * 2  # header + 2 instances x 2 methods
        assert (out / "curve_expansions.csv").exists()
        assert (out / "curve_time.csv").exists()

    def test_instances_cached_and_curves_monotone(self, trained_dir, tmp_path):
        out = tmp_path / "eval"
        args = (
            "evaluate",
            "--checkpoint", str(trained_dir / "checkpoint-final.bin"),
            "--domain", "gripper", "--instances", "2", "--scale", "0.01",
            "--time-limit", "20", "--max-expansions", "50",
            "--seed", "2", "--out", str(out),
        )
        assert run_cli(*args) == 0
        manifest = out / "instances" / "manifest.txt"
        first = manifest.read_text()
        assert run_cli(*args) == 0  # second run reuses the cached set
        assert manifest.read_text() == first

        for curve in ("curve_expansions.csv", "curve_time.csv"):
            rows = (out / curve).read_text().strip().splitlines()[1:]
            by_method = {}
            for row in rows:
                method, cost, rate = row.split(",")
                by_method.setdefault(method, []).append((float(cost), float(rate)))
            for pts in by_method.values():
                rates = [r for _, r in pts]
                assert rates == sorted(rates)


class TestGenerateCommand:
    def test_zero_count(self, tmp_path):
        out = tmp_path / "gen"
        assert run_cli("generate", "--domain", "gripper", "--count", "0",
                       "--seed", "0", "--out", str(out)) == 0
        assert not list(out.glob("gripper-*.pddl"))

    def test_files_parse(self, tmp_path):
        out = tmp_path / "gen"
        assert run_cli("generate", "--domain", "gripper", "--sizes", "balls=3",
                       "--count", "5", "--seed", "2", "--out", str(out)) == 0
        files = sorted(out.glob("gripper-*.pddl"))
        assert len(files) == 5
        domain = domains.load_domain("gripper")
        for path in files:
            problem = pddl.parse_problem(path.read_text(), domain)
            assert len(problem.objects) == 7

    def test_identical_seed_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run_cli("generate", "--domain", "ferry", "--sizes",
                    "cars=2..3 locations=3..4", "--count", "3", "--seed", "9",
                    "--out", str(out))
        for pa, pb in zip(sorted(a.glob("*.pddl")), sorted(b.glob("*.pddl"))):
            assert pa.read_text() == pb.read_text()

    def test_unknown_domain_exits_2(self, tmp_path, capsys):
        code = run_cli("generate", "--domain", "freecell", "--count", "1",
                       "--seed", "0", "--out", str(tmp_path / "x"))
        assert code == 2


class TestSizeDistributionParsing:
    def test_single(self):
        dist = parse_size_distribution("balls=3", "gripper")
        assert len(dist) == 1
        assert dist[0][0].params == (("balls", (3, 3)),)

    def test_weighted_multi(self):
        dist = parse_size_distribution("blocks=4 @ 1; blocks=5..6 @ 0.5", "blocksworld")
        assert [w for _, w in dist] == [1.0, 0.5]
        assert dist[1][0].params == (("blocks", (5, 6)),)
