"""Single command-line entry point for the whole experiment pipeline.

Every command resolves its settings as CLI flags > config file > defaults,
echoes the resolved configuration into the run directory, and draws all
randomness from one master seed. Timestamps are confined to run.log so that
two runs with identical configuration produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .evolve import (
    AnnealTarget,
    EvolveConfig,
    PsoConfig,
    run_pso,
    run_sae,
    write_pso_trace,
    write_trace,
)
from .landscape import (
    ConvexityResult,
    EigConfig,
    GridSpec,
    convexity_grid,
    loss_grid,
    random_directions,
    write_convexity_csv,
    write_grid_csv,
    write_pgm,
)
from .merge import MergeConfig, RedenseMode, task_arithmetic, weight_average
from .params import ParameterSet, load_checkpoint, save_checkpoint
from .seeding import TAG_EIG, derive_seed
from .sparsity import Granularity, SparsityMeasure, SparsitySchedule
from .tasks import (
    ExpertTrainConfig,
    ModularOp,
    ModularTaskSpec,
    accuracy,
    build_experts,
    full_split,
    gen_dataset,
    pool_sizes,
    sample_pairs,
    twin_tasks,
)

SUMMARY_HEADER = ["method", "task_a", "task_b", "avg"]


@dataclass(frozen=True)
class Opt:
    flag: str
    kind: Callable[[str], Any]
    default: Any
    choices: tuple[str, ...] | None = None
    help: str = ""

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")

    @property
    def key(self) -> str:
        return self.flag.lstrip("-")


SHARED_OPTS = [
    Opt("--seed", int, 0, help="master seed; all randomness derives from it"),
    Opt("--out", str, None, help="output directory"),
    Opt("--config", str, None, help="flat key=value config file; flags override it"),
    Opt("--jobs", int, 1, help="worker cap; results are independent of it"),
]

TASK_OPTS = [
    Opt("--m", int, 13, help="modulus of the twin tasks"),
    Opt("--hidden", int, 32, help="hidden width of the network"),
    Opt("--split-seed", int, None, help="train/test partition seed (defaults to --seed)"),
]

TRAIN_OPTS = [
    Opt("--base-epochs", int, 30),
    Opt("--expert-epochs", int, 8000),
    Opt("--lr", float, 0.5),
    Opt("--batch-size", int, 32),
    Opt("--weight-decay", float, 0.012),
]

EVOLVE_OPTS = [
    Opt("--experts", str, None, help="directory produced by train-experts"),
    Opt("--pop", int, 8),
    Opt("--steps", int, 12),
    Opt("--s-min", float, 0.1),
    Opt("--s-max", float, 0.6),
    Opt("--t0", int, 3),
    Opt("--t-mult", int, 2),
    Opt("--measure", str, "magnitude", choices=("magnitude", "zero-count")),
    Opt("--granularity", str, "global", choices=("global", "local")),
    Opt("--redense", str, "parents", choices=("parents", "original-dense")),
    Opt("--gamma", float, 0.2),
    Opt("--anneal", str, "offspring", choices=("offspring", "archive")),
    Opt("--opt-batch", int, 64),
    Opt("--label", str, "sae"),
]

PSO_OPTS = [
    Opt("--experts", str, None),
    Opt("--swarm", int, 8),
    Opt("--iters", int, 12),
    Opt("--w", float, 0.729),
    Opt("--c1", float, 1.49445),
    Opt("--c2", float, 1.49445),
    Opt("--vmax", float, 0.5),
    Opt("--opt-batch", int, 64),
    Opt("--label", str, "pso"),
]

BASELINE_OPTS = [
    Opt("--experts", str, None),
    Opt("--method", str, None, choices=("weight-average", "task-arithmetic")),
    Opt("--scale", float, 1.0),
]

GRID_OPTS = [
    Opt("--ckpt", str, None, help="checkpoint to scan around"),
    Opt("--op", str, "add", choices=("add", "sub")),
    Opt("--split", str, "train", choices=("train", "test")),
    Opt("--grid", int, 21),
    Opt("--alpha-max", float, 1.0),
    Opt("--beta-max", float, 1.0),
    Opt("--eps", float, 1e-8),
    Opt("--eig-iters", int, 100),
    Opt("--eig-tol", float, 1e-6),
    Opt("--hess-batch", int, 64),
]

GEN_DATA_OPTS = [
    Opt("--op", str, "add", choices=("add", "sub")),
    Opt("--which", str, "train", choices=("train", "opt", "test")),
    Opt("--n", int, 0, help="sample size; 0 means the whole pool"),
]

EVAL_OPTS = [
    Opt("--ckpt", str, None),
    Opt("--label", str, "model"),
]

COMMAND_OPTS: dict[str, list[Opt]] = {
    "gen-data": SHARED_OPTS + TASK_OPTS + GEN_DATA_OPTS,
    "train-experts": SHARED_OPTS + TASK_OPTS + TRAIN_OPTS,
    "evolve": SHARED_OPTS + TASK_OPTS + EVOLVE_OPTS,
    "pso": SHARED_OPTS + TASK_OPTS + PSO_OPTS,
    "baseline": SHARED_OPTS + TASK_OPTS + BASELINE_OPTS,
    "eval": SHARED_OPTS + TASK_OPTS + EVAL_OPTS,
    "landscape": SHARED_OPTS + TASK_OPTS + GRID_OPTS,
    "convexity": SHARED_OPTS + TASK_OPTS + GRID_OPTS,
    "report": SHARED_OPTS,
}

# Keys that never enter the echoed config: they either locate the run or
# cannot affect results.
NON_SCIENCE_KEYS = {"out", "config", "jobs", "runs"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsemerge",
        description="sparsity-driven evolutionary model merging experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in COMMAND_OPTS.items():
        sp = sub.add_parser(command)
        for opt in opts:
            kwargs: dict[str, Any] = {"default": None, "help": opt.help}
            if opt.choices:
                kwargs["choices"] = opt.choices
            sp.add_argument(opt.flag, **kwargs)
        if command == "report":
            sp.add_argument("--runs", nargs="+", default=None,
                            help="run directories whose summary.csv rows to join")
    return parser


def read_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def resolve_options(ns: argparse.Namespace, opts: list[Opt]) -> dict[str, Any]:
    """CLI flag > config file > built-in default."""
    file_values: dict[str, str] = {}
    if getattr(ns, "config", None):
        cfg_path = Path(ns.config)
        if not cfg_path.is_file():
            raise FileNotFoundError(f"config file not found: {cfg_path}")
        file_values = read_config_file(cfg_path)
        unknown = sorted(set(file_values) - {opt.key for opt in opts})
        if unknown:
            raise ValueError(f"unknown config keys for this command: {', '.join(unknown)}")
    resolved: dict[str, Any] = {}
    for opt in opts:
        raw = getattr(ns, opt.dest, None)
        if raw is None and opt.key in file_values:
            raw = file_values[opt.key]
        if raw is None:
            resolved[opt.dest] = opt.default
        else:
            resolved[opt.dest] = opt.kind(raw) if isinstance(raw, str) else raw
    return resolved


def echo_config(out_dir: Path, values: dict[str, Any]) -> None:
    lines = []
    for key in sorted(values):
        if key in NON_SCIENCE_KEYS or key.startswith("_") or values[key] is None:
            continue
        value = values[key]
        rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key.replace('_', '-')}={rendered}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def log_line(out_dir: Path, message: str) -> None:
    stamp = time.strftime("%Y-%m-%d %H:%M:%S")
    with open(out_dir / "run.log", "a") as f:
        f.write(f"[{stamp}] {message}\n")


def write_summary(path: Path, rows: list[tuple[str, float, float, float]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_HEADER)
        for method, a, b, avg in rows:
            writer.writerow([method, repr(a), repr(b), repr(avg)])


def read_summary(path: Path) -> list[list[str]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != SUMMARY_HEADER:
        raise ValueError(f"{path} is not a summary file")
    return rows[1:]


def fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 2


def report_violations(violations: list[str]) -> int:
    for v in violations:
        print(f"invalid config: {v}", file=sys.stderr)
    return 2


def task_specs(cfg: dict[str, Any]) -> tuple[ModularTaskSpec, ModularTaskSpec]:
    split_seed = cfg["split_seed"] if cfg["split_seed"] is not None else cfg["seed"]
    return twin_tasks(cfg["m"], split_seed=split_seed)


def evaluate_model(
    params: ParameterSet, specs: tuple[ModularTaskSpec, ModularTaskSpec]
) -> tuple[float, float, float]:
    acc_a = accuracy(params, full_split(specs[0], "test"))
    acc_b = accuracy(params, full_split(specs[1], "test"))
    return acc_a, acc_b, (acc_a + acc_b) / 2.0


def load_experts_dir(path_str: str | None) -> tuple[ParameterSet, ParameterSet, ParameterSet, dict[str, str]]:
    if not path_str:
        raise FileNotFoundError("--experts directory is required")
    path = Path(path_str)
    for name in ("base.ckpt", "expert_add.ckpt", "expert_sub.ckpt"):
        if not (path / name).is_file():
            raise FileNotFoundError(f"missing {path / name}")
    meta: dict[str, str] = {}
    if (path / "config.txt").is_file():
        meta = read_config_file(path / "config.txt")
    return (
        load_checkpoint(path / "base.ckpt"),
        load_checkpoint(path / "expert_add.ckpt"),
        load_checkpoint(path / "expert_sub.ckpt"),
        meta,
    )


def inherit_task_settings(cfg: dict[str, Any], meta: dict[str, str]) -> None:
    """Fill task settings from the experts run unless set explicitly."""
    if cfg["split_seed"] is None and "split-seed" in meta:
        cfg["split_seed"] = int(meta["split-seed"])
    if cfg["split_seed"] is None and "seed" in meta:
        cfg["split_seed"] = int(meta["seed"])
    if "m" in meta and cfg.get("_m_explicit") is not True:
        cfg["m"] = int(meta["m"])
    if "hidden" in meta and cfg.get("_hidden_explicit") is not True:
        cfg["hidden"] = int(meta["hidden"])


def prepare_out(cfg: dict[str, Any]) -> Path:
    if not cfg.get("out"):
        raise FileNotFoundError("--out directory is required")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: dict[str, Any]) -> int:
    out_dir = prepare_out(cfg)
    split_seed = cfg["split_seed"] if cfg["split_seed"] is not None else cfg["seed"]
    spec = ModularTaskSpec(
        cfg["m"], ModularOp.ADD if cfg["op"] == "add" else ModularOp.SUB, split_seed
    )
    n = cfg["n"] or _pool_len(spec, cfg["which"])
    pairs = sample_pairs(spec, cfg["which"], n, cfg["seed"])
    name = f"{cfg['op']}_{cfg['which']}.csv"
    with open(out_dir / name, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["a", "b", "label"])
        for a, b in pairs:
            writer.writerow([int(a), int(b), spec.label(int(a), int(b))])
    echo_config(out_dir, cfg)
    log_line(out_dir, f"gen-data wrote {name} with {len(pairs)} rows")
    print(f"wrote {out_dir / name}")
    return 0


def _pool_len(spec: ModularTaskSpec, which: str) -> int:
    train_n, test_n = pool_sizes(spec)
    return test_n if which == "test" else train_n


def cmd_train_experts(cfg: dict[str, Any]) -> int:
    out_dir = prepare_out(cfg)
    specs = task_specs(cfg)
    recipe = ExpertTrainConfig(
        base_epochs=cfg["base_epochs"],
        expert_epochs=cfg["expert_epochs"],
        learning_rate=cfg["lr"],
        batch_size=cfg["batch_size"],
        weight_decay=cfg["weight_decay"],
    )
    started = time.time()
    base, expert_add, expert_sub = build_experts(
        cfg["seed"], cfg["m"], cfg["hidden"], recipe
    )
    save_checkpoint(base, out_dir / "base.ckpt")
    save_checkpoint(expert_add, out_dir / "expert_add.ckpt")
    save_checkpoint(expert_sub, out_dir / "expert_sub.ckpt")
    rows = [
        ("base", *evaluate_model(base, specs)),
        ("expert_add", *evaluate_model(expert_add, specs)),
        ("expert_sub", *evaluate_model(expert_sub, specs)),
    ]
    write_summary(out_dir / "summary.csv", rows)
    cfg["split_seed"] = specs[0].split_seed
    echo_config(out_dir, cfg)
    log_line(out_dir, f"train-experts finished in {time.time() - started:.1f}s")
    for method, a, b, avg in rows:
        print(f"{method}: task_a={a:.4f} task_b={b:.4f} avg={avg:.4f}")
    return 0


def validate_evolve(cfg: dict[str, Any]) -> list[str]:
    bad = []
    if cfg["pop"] < 2 or cfg["pop"] % 2 != 0:
        bad.append(f"pop must be even and >= 2, got {cfg['pop']}")
    if not (0.0 <= cfg["s_min"] <= cfg["s_max"] <= 1.0):
        bad.append(f"need 0 <= s-min <= s-max <= 1, got ({cfg['s_min']}, {cfg['s_max']})")
    if cfg["t0"] < 1:
        bad.append(f"t0 must be >= 1, got {cfg['t0']}")
    if cfg["t_mult"] < 1:
        bad.append(f"t-mult must be >= 1, got {cfg['t_mult']}")
    if cfg["steps"] < 0:
        bad.append(f"steps must be >= 0, got {cfg['steps']}")
    if not (0.0 <= cfg["gamma"] <= 1.0):
        bad.append(f"gamma must be in [0, 1], got {cfg['gamma']}")
    if cfg["opt_batch"] < 1:
        bad.append(f"opt-batch must be >= 1, got {cfg['opt_batch']}")
    return bad


def cmd_evolve(cfg: dict[str, Any]) -> int:
    violations = validate_evolve(cfg)
    if violations:
        return report_violations(violations)
    _, expert_add, expert_sub, meta = load_experts_dir(cfg["experts"])
    inherit_task_settings(cfg, meta)
    out_dir = prepare_out(cfg)
    specs = task_specs(cfg)
    evolve_cfg = EvolveConfig(
        capacity=cfg["pop"],
        schedule=SparsitySchedule(
            cfg["s_min"], cfg["s_max"], cfg["t0"], cfg["t_mult"], cfg["steps"]
        ),
        merge_cfg=MergeConfig(
            measure=SparsityMeasure(cfg["measure"]),
            granularity=Granularity(cfg["granularity"]),
            redense_mode=RedenseMode(cfg["redense"]),
            gamma=cfg["gamma"],
        ),
        seed=cfg["seed"],
        tasks=specs,
        opt_batch=cfg["opt_batch"],
        anneal=AnnealTarget.OFFSPRING_ONLY
        if cfg["anneal"] == "offspring"
        else AnnealTarget.OFFSPRING_AND_ARCHIVE,
    )
    started = time.time()
    best, records = run_sae([expert_add, expert_sub], evolve_cfg)
    write_trace(out_dir / "trace.csv", records)
    save_checkpoint(best.params, out_dir / "best.ckpt")
    row = (cfg["label"], *evaluate_model(best.params, specs))
    write_summary(out_dir / "summary.csv", [row])
    cfg["split_seed"] = specs[0].split_seed
    echo_config(out_dir, cfg)
    log_line(out_dir, f"evolve finished in {time.time() - started:.1f}s")
    print(
        f"{row[0]}: best id={best.id} total_score={best.total_score:.4f} "
        f"task_a={row[1]:.4f} task_b={row[2]:.4f} avg={row[3]:.4f}"
    )
    return 0


def validate_pso(cfg: dict[str, Any]) -> list[str]:
    bad = []
    if cfg["swarm"] < 2:
        bad.append(f"swarm must be >= 2, got {cfg['swarm']}")
    if cfg["iters"] < 1:
        bad.append(f"iters must be >= 1, got {cfg['iters']}")
    for key in ("w", "c1", "c2", "vmax"):
        if cfg[key] <= 0:
            bad.append(f"{key} must be > 0, got {cfg[key]}")
    return bad


def cmd_pso(cfg: dict[str, Any]) -> int:
    violations = validate_pso(cfg)
    if violations:
        return report_violations(violations)
    _, expert_add, expert_sub, meta = load_experts_dir(cfg["experts"])
    inherit_task_settings(cfg, meta)
    out_dir = prepare_out(cfg)
    specs = task_specs(cfg)
    pso_cfg = PsoConfig(
        swarm=cfg["swarm"],
        iters=cfg["iters"],
        w=cfg["w"],
        c1=cfg["c1"],
        c2=cfg["c2"],
        vmax=cfg["vmax"],
        seed=cfg["seed"],
    )
    started = time.time()
    best, trace = run_pso([expert_add, expert_sub], pso_cfg, specs, opt_batch=cfg["opt_batch"])
    write_pso_trace(out_dir / "trace.csv", trace)
    save_checkpoint(best, out_dir / "best.ckpt")
    row = (cfg["label"], *evaluate_model(best, specs))
    write_summary(out_dir / "summary.csv", [row])
    cfg["split_seed"] = specs[0].split_seed
    echo_config(out_dir, cfg)
    log_line(out_dir, f"pso finished in {time.time() - started:.1f}s")
    print(f"{row[0]}: task_a={row[1]:.4f} task_b={row[2]:.4f} avg={row[3]:.4f}")
    return 0


def cmd_baseline(cfg: dict[str, Any]) -> int:
    if cfg["method"] is None:
        return fail("--method is required (weight-average or task-arithmetic)")
    base, expert_add, expert_sub, meta = load_experts_dir(cfg["experts"])
    inherit_task_settings(cfg, meta)
    out_dir = prepare_out(cfg)
    specs = task_specs(cfg)
    if cfg["method"] == "weight-average":
        merged = weight_average([expert_add, expert_sub])
    else:
        merged = task_arithmetic(base, [expert_add, expert_sub], cfg["scale"])
    save_checkpoint(merged, out_dir / "merged.ckpt")
    row = (cfg["method"], *evaluate_model(merged, specs))
    write_summary(out_dir / "summary.csv", [row])
    cfg["split_seed"] = specs[0].split_seed
    echo_config(out_dir, cfg)
    log_line(out_dir, f"baseline {cfg['method']} done")
    print(f"{row[0]}: task_a={row[1]:.4f} task_b={row[2]:.4f} avg={row[3]:.4f}")
    return 0


def cmd_eval(cfg: dict[str, Any]) -> int:
    if not cfg["ckpt"] or not Path(cfg["ckpt"]).is_file():
        return fail(f"checkpoint not found: {cfg['ckpt']}")
    out_dir = prepare_out(cfg)
    specs = task_specs(cfg)
    params = load_checkpoint(cfg["ckpt"])
    row = (cfg["label"], *evaluate_model(params, specs))
    write_summary(out_dir / "summary.csv", [row])
    echo_config(out_dir, cfg)
    log_line(out_dir, f"eval of {cfg['ckpt']} done")
    print(f"{row[0]}: task_a={row[1]:.4f} task_b={row[2]:.4f} avg={row[3]:.4f}")
    return 0


def _grid_inputs(cfg: dict[str, Any]):
    if not cfg["ckpt"] or not Path(cfg["ckpt"]).is_file():
        raise FileNotFoundError(f"checkpoint not found: {cfg['ckpt']}")
    params = load_checkpoint(cfg["ckpt"])
    split_seed = cfg["split_seed"] if cfg["split_seed"] is not None else cfg["seed"]
    spec = ModularTaskSpec(
        cfg["m"], ModularOp.ADD if cfg["op"] == "add" else ModularOp.SUB, split_seed
    )
    grid = GridSpec(cfg["alpha_max"], cfg["beta_max"], cfg["grid"], cfg["eps"])
    dirs = random_directions(params, cfg["seed"])
    return params, spec, grid, dirs


def cmd_landscape(cfg: dict[str, Any]) -> int:
    params, spec, grid, dirs = _grid_inputs(cfg)
    out_dir = prepare_out(cfg)
    dataset = full_split(spec, cfg["split"])
    started = time.time()
    losses = loss_grid(params, dirs, grid, dataset)
    write_grid_csv(out_dir / "landscape.csv", grid, losses)
    write_pgm(out_dir / "landscape.pgm", losses)
    echo_config(out_dir, cfg)
    log_line(out_dir, f"landscape finished in {time.time() - started:.1f}s")
    print(f"landscape grid {grid.resolution}x{grid.resolution}: "
          f"min={losses.min():.4f} center={losses[grid.resolution // 2, grid.resolution // 2]:.4f}")
    return 0


def cmd_convexity(cfg: dict[str, Any]) -> int:
    params, spec, grid, dirs = _grid_inputs(cfg)
    out_dir = prepare_out(cfg)
    batch = gen_dataset(spec, "opt", cfg["hess_batch"], derive_seed(cfg["seed"], TAG_EIG))
    eig_cfg = EigConfig(iters=cfg["eig_iters"], tol=cfg["eig_tol"], seed=cfg["seed"])
    started = time.time()
    result: ConvexityResult = convexity_grid(params, dirs, grid, batch, eig_cfg)
    write_convexity_csv(out_dir / "convexity.csv", grid, result)
    write_pgm(out_dir / "convexity.pgm", result.convexity)
    echo_config(out_dir, cfg)
    log_line(out_dir, f"convexity finished in {time.time() - started:.1f}s")
    print(
        f"convexity grid {grid.resolution}x{grid.resolution}: "
        f"mean={result.convexity.mean():.4f} "
        f"converged={int(result.converged.sum())}/{result.converged.size}"
    )
    return 0


def cmd_report(cfg: dict[str, Any], runs: list[str]) -> int:
    if not runs:
        return fail("--runs requires at least one run directory")
    out_dir = prepare_out(cfg)
    rows: list[list[str]] = []
    for run in runs:
        summary = Path(run) / "summary.csv"
        if not summary.is_file():
            return fail(f"missing summary: {summary}")
        rows.extend(read_summary(summary))
    with open(out_dir / "report.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(rows)
    print(f"report with {len(rows)} rows -> {out_dir / 'report.csv'}")
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-experts": cmd_train_experts,
    "evolve": cmd_evolve,
    "pso": cmd_pso,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "landscape": cmd_landscape,
    "convexity": cmd_convexity,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    opts = COMMAND_OPTS[ns.command]
    try:
        cfg = resolve_options(ns, opts)
        # Track explicit task flags so experts-dir settings do not override them.
        cfg["_m_explicit"] = getattr(ns, "m", None) is not None
        cfg["_hidden_explicit"] = getattr(ns, "hidden", None) is not None
        if ns.command == "report":
            return cmd_report(cfg, ns.runs or [])
        code = HANDLERS[ns.command](cfg)
        return code
    except FileNotFoundError as exc:
        return fail(str(exc))
    except ValueError as exc:
        return fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
