"""Command-line surface: train, solve, evaluate, generate.

Config files are flat ``key = value`` text; command-line flags override
file values. All commands honor ``--seed`` end to end. Worker counts come
from ``--workers`` or the GENPLAN_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import os
import pathlib
import random
import sys

import numpy as np

from genplan import domains, generators
from genplan.encoder import build_layout
from genplan.generators import SizeSpec, UnsupportedDomain
from genplan.heuristics import UnsolvableRelaxation, horizon as episode_horizon
from genplan.pddl import (
    DomainDef,
    ParseError,
    PddlError,
    Task,
    ground_task,
    parse_domain,
    parse_problem,
    unparse_domain,
    unparse_problem,
)
from genplan.policy import LayoutMismatch, PolicyNetwork, TaskContext
from genplan.search import Budget, SearchResult, gbfs_gnn, gbfs_hff, validate_plan
from genplan.trainer import (
    STATS_COLUMNS,
    TrainConfig,
    run_episode,
    train,
)

RESULT_COLUMNS = (
    "instance",
    "method",
    "solved",
    "plan_length",
    "expanded_states",
    "generated_nodes",
    "rollout_steps",
    "wall_time",
)

DEFAULT_TIME_LIMIT = 600.0
DEFAULT_INSTANCES = 50


class CliError(Exception):
    """User-facing configuration problem; exits with status 2."""


# ---------------------------------------------------------------------------
# Config parsing


def read_config(path: str) -> dict[str, str]:
    cfg_path = pathlib.Path(path)
    if not cfg_path.exists():
        raise CliError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(cfg_path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def parse_size_distribution(text: str, domain_name: str) -> generators.Distribution:
    """Parse entries like ``balls=3..5 @ 1.0; balls=8 @ 0.5``."""
    dist = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        weight = 1.0
        if "@" in chunk:
            chunk, wtext = chunk.rsplit("@", 1)
            weight = float(wtext)
        ranges: dict[str, tuple[int, int]] = {}
        for token in chunk.split():
            if "=" not in token:
                raise CliError(f"bad size token {token!r}")
            key, val = token.split("=", 1)
            if ".." in val:
                lo, hi = val.split("..", 1)
                ranges[key] = (int(lo), int(hi))
            else:
                ranges[key] = (int(val), int(val))
        dist.append((SizeSpec.of(domain_name, **ranges), weight))
    if not dist:
        raise CliError(f"empty size distribution {text!r}")
    return dist


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def build_train_config(values: dict[str, str]) -> TrainConfig:
    cfg = TrainConfig()
    domain_name = values.get("domain", cfg.domain_name)
    if "domain_file" in values:
        path = values["domain_file"]
        if not os.path.exists(path):
            raise CliError(f"domain file not found: {path}")
        domain = parse_domain(pathlib.Path(path).read_text())
        if domain.name not in domains.DOMAIN_NAMES:
            raise CliError(
                f"domain file {path} defines {domain.name!r}; training needs a "
                f"generator, available for {domains.DOMAIN_NAMES}"
            )
        domain_name = domain.name
    cfg.domain_name = domain_name

    casts = {
        "iterations": int,
        "episodes_per_iteration": int,
        "max_update_steps": int,
        "lr": float,
        "gamma": float,
        "entropy_bonus": float,
        "clip_ratio": float,
        "kl_cutoff": float,
        "value_loss_weight": float,
        "hidden_width": int,
        "history_length": int,
        "seed": int,
        "workers": int,
        "checkpoint_every": int,
    }
    for key, cast in casts.items():
        if key in values:
            try:
                setattr(cfg, key, cast(values[key]))
            except ValueError as exc:
                raise CliError(f"bad value for {key!r}: {values[key]!r}") from exc
    if "arch" in values:
        cfg.arch = values["arch"]
    if "normalize_advantages" in values:
        cfg.normalize_advantages = _BOOL.get(values["normalize_advantages"].lower(), True)
    if "grad_clip_norm" in values:
        raw = values["grad_clip_norm"]
        cfg.grad_clip_norm = None if raw.lower() in ("none", "off") else float(raw)
    if "train_sizes" in values:
        cfg.size_distribution = parse_size_distribution(values["train_sizes"], cfg.domain_name)
    return cfg


def _resolve_domain(spec: str) -> DomainDef:
    """A bundled domain name, or a path to a domain file."""
    if spec in domains.DOMAIN_NAMES:
        return domains.load_domain(spec)
    if os.path.exists(spec):
        return parse_domain(pathlib.Path(spec).read_text())
    raise CliError(f"domain {spec!r}: not a bundled name and file does not exist")


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return max(1, args.workers)
    env = os.environ.get("GENPLAN_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise CliError(f"GENPLAN_WORKERS={env!r} is not an integer") from exc
    return 1


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    values = read_config(args.config) if args.config else {}
    for key in ("seed", "iterations", "hidden_width", "arch", "domain"):
        override = getattr(args, key, None)
        if override is not None:
            values[key] = str(override)
    if args.workers is not None:
        values["workers"] = str(args.workers)
    elif "workers" not in values and os.environ.get("GENPLAN_WORKERS"):
        values["workers"] = os.environ["GENPLAN_WORKERS"]
    cfg = build_train_config(values)

    out_dir = pathlib.Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats_path = out_dir / "train_stats.csv"

    def log_row(row):
        print(
            f"iter {row.iteration:4d}  success {row.success_rate:5.2f}  "
            f"len {row.mean_length:6.1f}  kl {row.kl:8.5f}  "
            f"ent {row.entropy:6.3f}  {row.seconds:6.1f}s",
            flush=True,
        )

    result = train(cfg, checkpoint_dir=out_dir, stats_path=stats_path,
                   log_fn=log_row if not args.quiet else None)
    print(f"final checkpoint: {out_dir / 'checkpoint-final.bin'}")
    print(f"stats: {stats_path} ({len(result.stats)} rows)")
    return 0


# ---------------------------------------------------------------------------
# solve


def _load_policy_for(domain: DomainDef, checkpoint: str) -> PolicyNetwork:
    if not os.path.exists(checkpoint):
        raise CliError(f"checkpoint not found: {checkpoint}")
    layout = build_layout(domain, history_length=None or 1)
    # history length comes from the checkpoint; rebuild layout accordingly
    policy = PolicyNetwork.load(checkpoint)
    expected = build_layout(domain, policy.layout.history_length)
    if (expected.p0, expected.p1, expected.p2) != (
        policy.layout.p0, policy.layout.p1, policy.layout.p2
    ):
        raise LayoutMismatch(
            f"checkpoint was trained for a different predicate layout than "
            f"domain {domain.name!r}"
        )
    return policy


def _write_result_row(path: pathlib.Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def cmd_solve(args) -> int:
    domain = _resolve_domain(args.domain)
    problem_path = pathlib.Path(args.problem)
    if not problem_path.exists():
        raise CliError(f"problem file not found: {args.problem}")
    problem = parse_problem(problem_path.read_text(), domain)
    task = ground_task(domain, problem)
    policy = _load_policy_for(domain, args.checkpoint)

    out_dir = pathlib.Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    budget = Budget(max_time=args.time_limit, max_expansions=args.max_expansions)

    if args.greedy_only:
        ctx = TaskContext(task, policy.layout)
        try:
            hz = episode_horizon(task)
        except UnsolvableRelaxation:
            hz = 0
        traj = run_episode(policy, task, hz, rng, mode="greedy", ctx=ctx)
        plan = (
            [task.ground_actions[int(s.action_ids[s.chosen])] for s in traj.steps]
            if traj.solved
            else None
        )
        result = SearchResult(plan, 0, 0, len(traj.steps), 0.0)
    else:
        result = gbfs_gnn(task, policy, budget, rng)

    row = {
        "instance": problem.name,
        "method": "greedy" if args.greedy_only else "gbfs-gnn",
        "solved": int(result.solved),
        "plan_length": len(result.plan) if result.plan is not None else -1,
        "expanded_states": result.expanded_states,
        "generated_nodes": result.generated_nodes,
        "rollout_steps": result.rollout_steps,
        "wall_time": f"{result.wall_time:.3f}",
    }
    _write_result_row(out_dir / f"{problem_path.stem}.result.csv", [row])

    if result.plan is not None:
        if not validate_plan(task, result.plan):
            raise AssertionError("plan failed validation before writing")
        plan_path = out_dir / f"{problem_path.stem}.plan"
        plan_path.write_text("".join(a.name + "\n" for a in result.plan))
        print(f"solved: plan of length {len(result.plan)} -> {plan_path}")
    else:
        print("unsolved within budget")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _instance_set(domain_name: str, count: int, scale: float, seed: int,
                  out_dir: pathlib.Path) -> list[pathlib.Path]:
    """Generate (once) and cache the held-out evaluation instances."""
    inst_dir = out_dir / "instances"
    manifest = inst_dir / "manifest.txt"
    if manifest.exists():
        paths = [inst_dir / line for line in manifest.read_text().split()]
        if all(p.exists() for p in paths):
            return paths
    inst_dir.mkdir(parents=True, exist_ok=True)
    dist = generators.evaluation_distribution(domain_name, scale)
    rng = random.Random(seed)
    domain = domains.load_domain(domain_name)
    paths = []
    for i in range(count):
        spec = generators.draw_size_spec(dist, rng)
        problem = generators.generate(spec, rng.randrange(2**31))
        path = inst_dir / f"instance-{i:03d}.pddl"
        path.write_text(unparse_problem(problem, domain))
        paths.append(path)
    manifest.write_text("\n".join(p.name for p in paths))
    return paths


def _cumulative_curve(rows: list[dict], key: str, total: int) -> list[tuple[float, float]]:
    solved_costs = sorted(float(r[key]) for r in rows if r["solved"])
    points = [(0.0, sum(1 for c in solved_costs if c <= 0) / total)]
    for cost in solved_costs:
        points.append((cost, sum(1 for c in solved_costs if c <= cost) / total))
    return points


def cmd_evaluate(args) -> int:
    if args.domain not in domains.DOMAIN_NAMES:
        raise CliError(
            f"evaluation needs a bundled domain with a generator; "
            f"got {args.domain!r}, available: {domains.DOMAIN_NAMES}"
        )
    domain = domains.load_domain(args.domain)
    policy = _load_policy_for(domain, args.checkpoint)
    out_dir = pathlib.Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = _instance_set(args.domain, args.instances, args.scale, args.seed, out_dir)
    budget = Budget(max_time=args.time_limit, max_expansions=args.max_expansions)

    def eval_one(path: pathlib.Path) -> list[dict]:
        problem = parse_problem(path.read_text(), domain)
        task = ground_task(domain, problem)
        rng = np.random.default_rng((args.seed, hash(path.name) & 0xFFFF))
        rows = []
        for method, runner in (
            ("gbfs-gnn", lambda: gbfs_gnn(task, policy, budget, rng)),
            ("gbfs-hff", lambda: gbfs_hff(task, budget)),
        ):
            res = runner()
            rows.append({
                "instance": path.name,
                "method": method,
                "solved": int(res.solved),
                "plan_length": len(res.plan) if res.plan is not None else -1,
                "expanded_states": res.expanded_states,
                "generated_nodes": res.generated_nodes,
                "rollout_steps": res.rollout_steps,
                "wall_time": f"{res.wall_time:.3f}",
            })
        return rows

    workers = _workers(args)
    all_rows: list[dict] = []
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(eval_one, paths):
                all_rows.extend(rows)
    else:
        for path in paths:
            all_rows.extend(eval_one(path))

    _write_result_row(out_dir / "evaluation.csv", all_rows)

    for key, fname in (("expanded_states", "curve_expansions.csv"),
                       ("wall_time", "curve_time.csv")):
        with open(out_dir / fname, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", key, "success_rate"])
            for method in ("gbfs-gnn", "gbfs-hff"):
                rows = [r for r in all_rows if r["method"] == method]
                for cost, rate in _cumulative_curve(rows, key, len(paths)):
                    writer.writerow([method, f"{cost:.3f}", f"{rate:.4f}"])

    for method in ("gbfs-gnn", "gbfs-hff"):
        rows = [r for r in all_rows if r["method"] == method]
        solved = sum(r["solved"] for r in rows)
        print(f"{method}: {solved}/{len(rows)} solved")
    print(f"records: {out_dir / 'evaluation.csv'}")
    return 0


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    try:
        dist = (
            parse_size_distribution(args.sizes, args.domain)
            if args.sizes
            else generators.default_training_distribution(args.domain)
        )
    except UnsupportedDomain as exc:
        raise CliError(f"no generator for domain {exc}") from exc
    domain = domains.load_domain(args.domain)
    out_dir = pathlib.Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "domain.pddl").write_text(unparse_domain(domain))
    rng = random.Random(args.seed)
    for i in range(args.count):
        spec = generators.draw_size_spec(dist, rng)
        problem = generators.generate(spec, rng.randrange(2**31))
        path = out_dir / f"{args.domain}-{i:03d}.pddl"
        path.write_text(unparse_problem(problem, domain))
    print(f"wrote {args.count} problems to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genplan",
        description="Learn generalized planning policies and solve PDDL tasks with them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a policy with PPO")
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--domain", help="bundled domain name")
    p_train.add_argument("--iterations", type=int)
    p_train.add_argument("--hidden-width", dest="hidden_width", type=int)
    p_train.add_argument("--arch", choices=("gn-gn", "gnat-gn"))
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--workers", type=int)
    p_train.add_argument("--out", default="runs/train")
    p_train.add_argument("--quiet", action="store_true")
    p_train.set_defaults(fn=cmd_train)

    p_solve = sub.add_parser("solve", help="solve one problem with a trained policy")
    p_solve.add_argument("--checkpoint", required=True)
    p_solve.add_argument("--domain", required=True, help="bundled name or domain file")
    p_solve.add_argument("--problem", required=True)
    p_solve.add_argument("--greedy-only", action="store_true",
                         help="single greedy rollout, no search")
    p_solve.add_argument("--time-limit", type=float, default=DEFAULT_TIME_LIMIT)
    p_solve.add_argument("--max-expansions", type=float, default=float("inf"))
    p_solve.add_argument("--seed", type=int, default=0)
    p_solve.add_argument("--out", default="runs/solve")
    p_solve.set_defaults(fn=cmd_solve)

    p_eval = sub.add_parser("evaluate", help="compare GBFS-GNN against GBFS+hff")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--domain", required=True, help="bundled domain name")
    p_eval.add_argument("--instances", type=int, default=DEFAULT_INSTANCES)
    p_eval.add_argument("--scale", type=float, default=1.0,
                        help="shrink factor for the evaluation size ranges")
    p_eval.add_argument("--time-limit", type=float, default=DEFAULT_TIME_LIMIT)
    p_eval.add_argument("--max-expansions", type=float, default=float("inf"))
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--workers", type=int)
    p_eval.add_argument("--out", default="runs/evaluate")
    p_eval.set_defaults(fn=cmd_evaluate)

    p_gen = sub.add_parser("generate", help="emit random problem files")
    p_gen.add_argument("--domain", required=True)
    p_gen.add_argument("--sizes", help='e.g. "balls=3..5" or "blocks=4 @ 1; blocks=5 @ 0.5"')
    p_gen.add_argument("--count", type=int, default=1)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", default="runs/generate")
    p_gen.set_defaults(fn=cmd_generate)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PddlError, UnsupportedDomain, LayoutMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
